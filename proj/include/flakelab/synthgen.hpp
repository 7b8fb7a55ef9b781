#pragma once

#include <array>
#include <map>
#include <optional>

#include "flakelab/colorimetry.hpp"
#include "flakelab/optics.hpp"

namespace flakelab::synth {

enum class LayerClass { monolayer = 0, fewlayer = 1, thicklayer = 2 };

inline LayerClass classify_layers(int layer_count) {
    if (layer_count <= 1) return LayerClass::monolayer;
    if (layer_count <= 9) return LayerClass::fewlayer;
    return LayerClass::thicklayer;
}

inline const char* to_string(LayerClass c) {
    switch (c) {
        case LayerClass::monolayer: return "monolayer";
        case LayerClass::fewlayer: return "fewlayer";
        default: return "thicklayer";
    }
}

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

using Polygon = std::vector<Vec2>;

double polygon_area(const Polygon& poly);
bool point_in_polygon(const Polygon& poly, double x, double y);

struct Rect {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

struct ShapeConfig {
    int min_vertices = 5;
    int max_vertices = 12;
    double r_max_px = 14.0;
    double min_radius_frac = 0.3;
    double min_area_px2 = 25.0;
    int max_retries = 20;
};

// Star-convex polygon: sorted angles, radii in [min_frac, 1] * r_max, center
// uniform in bounds shrunk by r_max so every vertex stays inside. Returns an
// empty polygon when the area floor cannot be met within max_retries.
Polygon sample_flake_polygon(Rng& rng, const Rect& bounds, const ShapeConfig& cfg);

struct FlakeInstance {
    Polygon polygon;
    std::string material_id;
    int layer_count = 1;
    double thickness_nm = 0.0;
    LayerClass layer_class = LayerClass::monolayer;
};

struct SceneConfig {
    int width = 128;
    int height = 128;
    int min_flakes = 4;
    int max_flakes = 10;
    std::vector<std::string> materials = {"graphene"};
    std::vector<double> layer_weights = std::vector<double>(12, 1.0);  // counts 1..N
    double substrate_sio2_nm = 290.0;
    ShapeConfig shape;
};

struct FlakeScene {
    int width = 0;
    int height = 0;
    double substrate_sio2_nm = 290.0;
    std::vector<FlakeInstance> flakes;
    std::vector<int> label_map;         // H*W; 0 = background, i = flakes[i-1]
    std::vector<double> thickness_map;  // H*W, nm; 0 where background

    int label_at(int y, int x) const { return label_map[std::size_t(y) * width + x]; }
};

// Loads dispersion tables from a materials directory and caches per-stack
// reflectance spectra; the TMM runs once per distinct
// (material, layer_count, substrate, grid) key, not per pixel.
class MaterialLibrary {
public:
    explicit MaterialLibrary(std::filesystem::path materials_dir) : dir_(std::move(materials_dir)) {}

    const optics::DispersionTable& table(const std::string& material_id);
    const optics::RealSpectrum& reflectance(const std::string& material_id, int layer_count, double substrate_sio2_nm,
                                            const optics::SpectralGrid& grid);
    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    std::map<std::string, optics::DispersionTable> tables_;
    std::map<std::string, optics::RealSpectrum> spectra_;
};

struct DomainSpec {
    std::string illuminant_id = "d65";
    std::array<double, 3> gains = {1.0, 1.0, 1.0};
    std::uint64_t seed = 0;
};

// Pseudo-target construction: componentwise log-uniform gains.
DomainSpec sample_domain(const std::string& illuminant_id, std::uint64_t seed, double gain_lo, double gain_hi);

// Ring variant: |log G| uniform in [log mag_lo, log mag_hi] with random sign,
// so every sampled domain carries a real miscalibration on every channel.
DomainSpec sample_domain_ring(const std::string& illuminant_id, std::uint64_t seed, double mag_lo, double mag_hi);

// Places non-overlapping flakes (raster-disjoint), rasterizes label and
// thickness maps. Never fails: unplaceable flakes are skipped after bounded
// retries.
FlakeScene compose_scene(Rng& rng, const SceneConfig& cfg, MaterialLibrary& materials);

struct RenderedScene {
    color::RgbImage rgb;            // after white-balance gains
    color::SpectralImage spectral;  // ground-truth reflectance per pixel
};

// Per-pixel reflectance from the spectrum cache, rendered under the given
// sensor (whose illuminant defines the domain), then scaled by domain gains.
RenderedScene render_scene(const FlakeScene& scene, const color::SensorModel& sensor, const DomainSpec& domain,
                           MaterialLibrary& materials);

struct DatasetPaths {
    std::filesystem::path root;
    std::filesystem::path annotations() const { return root / "annotations.json"; }
    std::filesystem::path manifest() const { return root / "manifest.json"; }
    std::filesystem::path png(int index) const;
    std::filesystem::path float_rgb(int index) const;
    std::filesystem::path label_map(int index) const;
};

struct EmitResult {
    DatasetPaths paths;
    int image_count = 0;
    int instance_count = 0;
};

// Writes count scenes (PNG + lossless float RGB + label map), an annotations
// JSON and a manifest. Scene i derives its RNG stream from (seed, i), so the
// dataset is byte-reproducible from the manifest alone.
EmitResult emit_dataset(int count, const SceneConfig& scene_cfg, const DomainSpec& domain,
                        const color::SensorModel& sensor, MaterialLibrary& materials,
                        const std::filesystem::path& out_dir, std::uint64_t seed, const std::string& config_hash,
                        const std::string& git_describe);

}  // namespace flakelab::synth
