#pragma once

#include <array>
#include <complex>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flakelab/common.hpp"

namespace flakelab::optics {

using Complex = std::complex<double>;
using ComplexSpectrum = std::vector<Complex>;
using RealSpectrum = std::vector<double>;

// Uniformly spaced wavelength samples shared by every spectral quantity.
class SpectralGrid {
public:
    SpectralGrid(double min_nm, double max_nm, std::size_t samples);

    static SpectralGrid standard(std::size_t samples = 128) { return SpectralGrid(380.0, 780.0, samples); }

    std::size_t size() const { return wavelengths_nm_.size(); }
    double operator[](std::size_t i) const { return wavelengths_nm_[i]; }
    const std::vector<double>& wavelengths_nm() const { return wavelengths_nm_; }
    double spacing_nm() const { return wavelengths_nm_[1] - wavelengths_nm_[0]; }

    bool operator==(const SpectralGrid& other) const { return wavelengths_nm_ == other.wavelengths_nm_; }

private:
    std::vector<double> wavelengths_nm_;
};

// Tabulated complex refractive index of one material, n - i k at sampled
// wavelengths, optionally with the thickness of a single atomic layer.
struct DispersionTable {
    std::string material_id;
    std::vector<double> wavelength_nm;  // sorted, strictly increasing
    std::vector<double> n;              // >= 0
    std::vector<double> k;              // >= 0
    std::optional<double> per_layer_thickness_nm;

    // Linear interpolation; throws RangeError outside the tabulated range.
    Complex index_at(double lambda_nm) const;
    ComplexSpectrum sample(const SpectralGrid& grid) const;
};

// CSV format: header `wavelength_nm,n,k`, optional metadata line
// `# per_layer_thickness_nm=<value>`. material_id is the file stem.
DispersionTable load_dispersion_table(const std::filesystem::path& path);

// Convenience: load and sample onto a grid in one step.
ComplexSpectrum load_dispersion(const std::filesystem::path& path, const SpectralGrid& grid);

struct Layer {
    ComplexSpectrum index;  // per grid wavelength, n - i k
    double thickness_nm = 0.0;
};

// Semi-infinite injection medium / finite layers / semi-infinite outcoupling
// medium. All index spectra must share one SpectralGrid.
struct LayerStack {
    SpectralGrid grid;
    ComplexSpectrum injection_index;
    std::vector<Layer> layers;
    ComplexSpectrum outcoupling_index;

    explicit LayerStack(SpectralGrid g) : grid(std::move(g)) {}
    void validate() const;  // throws ShapeError on size mismatches
};

struct StackResponse {
    RealSpectrum reflectance;
    RealSpectrum transmittance;
    ComplexSpectrum amplitude_r;
    ComplexSpectrum amplitude_t;
};

using Matrix2c = std::array<Complex, 4>;  // row-major [m11 m12; m21 m22]

// Normal-incidence Fresnel amplitude coefficients, r = (na-nb)/(na+nb),
// t = 2 na/(na+nb). Throws RangeError when na + nb vanishes.
std::pair<Complex, Complex> fresnel_interface(Complex n_a, Complex n_b);

// Phase evolution through a homogeneous slab: diag(exp(-i d), exp(+i d))
// with d = 2 pi n thickness / lambda.
Matrix2c propagation_matrix(Complex n, double d_nm, double lambda_nm);

// Full transfer-matrix solve at every grid wavelength.
//
// Indices are stored as n - i k; the solver evaluates each stack on the
// conjugate so that absorbing layers attenuate under the diag(e^{-id}, e^{+id})
// propagation matrix. Lossless stacks are unaffected.
StackResponse stack_response(const LayerStack& stack);

// Reflectance of air / flake (layer_count layers) / SiO2 / Si at normal
// incidence. layer_count = 0 yields the bare substrate.
RealSpectrum flake_reflectance(const DispersionTable& material, int layer_count, double substrate_sio2_nm,
                               const DispersionTable& sio2, const DispersionTable& si, const SpectralGrid& grid);

}  // namespace flakelab::optics
