#pragma once

#include <array>
#include <filesystem>

#include "flakelab/optics.hpp"

namespace flakelab::color {

using optics::SpectralGrid;

// Fixed XYZ -> linear sRGB primaries (D65 white), row-major.
inline constexpr std::array<double, 9> kXyzToLinearSrgb = {
    3.2404542, -1.5371385, -0.4985314, -0.9692660, 1.8760108, 0.0415560, 0.0556434, -0.2040259, 1.0572252,
};

// Spectral sensitivity + illuminant pair and the derived projection A.
// A = S^T diag(I), norm is the Y-channel white integral so that a unit
// reflector renders near (1,1,1) in linear sRGB.
struct SensorModel {
    SpectralGrid grid;
    std::vector<double> S;  // D x 3, row-major (xbar, ybar, zbar per wavelength)
    std::vector<double> I;  // D
    std::vector<double> A;  // 3 x D, row-major
    double norm = 0.0;

    explicit SensorModel(SpectralGrid g) : grid(std::move(g)) {}

    std::size_t samples() const { return grid.size(); }
    // Recomputes S^T diag(I); must match the stored A bit-for-bit.
    std::vector<double> recompute_A() const;
};

// Per-pixel reflectance spectra, values in [0, 1].
struct SpectralImage {
    int height = 0;
    int width = 0;
    int channels = 0;  // D
    std::vector<double> data;  // H x W x D

    SpectralImage() = default;
    SpectralImage(int h, int w, int d) : height(h), width(w), channels(d), data(std::size_t(h) * w * d, 0.0) {}
    double* pixel(int y, int x) { return data.data() + (std::size_t(y) * width + x) * channels; }
    const double* pixel(int y, int x) const { return data.data() + (std::size_t(y) * width + x) * channels; }
};

// Linear-light RGB. Clamping/gamma happen only at PNG export.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // H x W x 3

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), data(std::size_t(h) * w * 3, 0.0) {}
    double* pixel(int y, int x) { return data.data() + (std::size_t(y) * width + x) * 3; }
    const double* pixel(int y, int x) const { return data.data() + (std::size_t(y) * width + x) * 3; }
};

// CSV loaders for the sensor assets. CMF format: wavelength_nm,xbar,ybar,zbar;
// illuminant format: wavelength_nm,power.
SensorModel build_sensor_model(const std::filesystem::path& cmf_path, const std::filesystem::path& illuminant_path,
                               const SpectralGrid& grid);

// x[p] = XYZ->sRGB ( A R[p] / norm ). Pure and linear in R.
RgbImage render(const SpectralImage& spectral, const SensorModel& sensor);

// Renders a single spectrum to one linear-sRGB triple.
std::array<double, 3> render_spectrum(const double* spectrum, const SensorModel& sensor);

// Channelwise white-balance gains; G must be strictly positive.
RgbImage apply_domain(const RgbImage& x, const std::array<double, 3>& G);

}  // namespace flakelab::color
