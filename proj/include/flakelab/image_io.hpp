#pragma once

#include <filesystem>

#include "flakelab/colorimetry.hpp"

namespace flakelab::color {

// 8-bit PNG export. Applies the sRGB transfer curve and clamps to [0,1];
// this is the only place gamma or clamping touches pixel data.
void write_png(const std::filesystem::path& path, const RgbImage& image);

// Lossless float container for exact round-trips: "FIMG" magic, u32 height,
// width, channels (little-endian), then h*w*c little-endian f32 values.
void write_float_image(const std::filesystem::path& path, const double* data, int height, int width, int channels);
void write_float_image(const std::filesystem::path& path, const RgbImage& image);
void write_float_image(const std::filesystem::path& path, const SpectralImage& image);

struct FloatImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;
};

FloatImage read_float_image(const std::filesystem::path& path);

RgbImage to_rgb_image(const FloatImage& f);        // throws ShapeError unless channels == 3
SpectralImage to_spectral_image(const FloatImage& f);

double srgb_encode(double linear);

}  // namespace flakelab::color
