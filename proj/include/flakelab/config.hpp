#pragma once

#include <json.hpp>

#include "flakelab/adapt.hpp"
#include "flakelab/synthgen.hpp"
#include "flakelab/tasks.hpp"

namespace flakelab::config {

struct GridConfig {
    int samples = 128;
    double min_nm = 380.0;
    double max_nm = 780.0;
    optics::SpectralGrid make() const { return optics::SpectralGrid(min_nm, max_nm, std::size_t(samples)); }
};

struct TargetDomainConfig {
    std::string illuminant = "incandescent_3200k";
    double gain_lo = 0.6;
    double gain_hi = 1.6;
    std::uint64_t seed = 7;
};

struct ThicknessConfig {
    int epochs = 40;
    int batch_size = 8;
    double lr = 1e-2;
    double weight_decay = 0.0;
    std::uint64_t seed = 2;
};

struct PretrainPairConfig {
    adapt::PretrainConfig colornorm;
    adapt::PretrainConfig specinv;
    // The optical-representation-learning corpus spans lighting conditions;
    // the target illuminant itself stays unseen.
    std::vector<std::string> illuminants = {"d65", "blackbody_2000k", "blackbody_4500k", "blackbody_8000k"};
    int scenes_per_illuminant = 120;
};

// The whole experiment: generation, training, pretraining, adaptation.
struct ExperimentConfig {
    std::uint64_t seed = 1234;
    std::filesystem::path assets_dir = "assets";
    std::filesystem::path out_dir = "out";
    GridConfig grid;
    synth::SceneConfig scene;
    int source_scenes = 250;
    int target_scenes = 250;
    int patch_size = 32;
    std::string source_illuminant = "d65";
    std::vector<TargetDomainConfig> target_domains = {TargetDomainConfig{}};
    tasks::TrainConfig train;
    ThicknessConfig thickness;
    PretrainPairConfig pretrain;
    adapt::AdaptConfig adaptation;
    int ablation_adapt_steps = 64;
    std::vector<std::uint64_t> ablation_seeds = {1, 2, 3};
    int specinv_channels = 0;  // 0 -> grid size

    std::string config_hash;  // filled by load/finalize

    std::filesystem::path dataset_dir(const std::string& name) const { return out_dir / "datasets" / name; }
    std::filesystem::path checkpoint_dir() const { return out_dir / "checkpoints"; }
    std::filesystem::path report_dir() const { return out_dir / "reports"; }

    std::filesystem::path materials_dir() const { return assets_dir / "materials"; }
    std::filesystem::path cmf_path() const { return assets_dir / "sensors" / "cie1931_cmf.csv"; }
    std::filesystem::path illuminant_path(const std::string& id) const {
        return assets_dir / "sensors" / (id + ".csv");
    }
};

// Defaults overlaid with the JSON file, then with --set key=value overrides
// (dotted paths, e.g. scene.width=64). Unknown keys are validation errors.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// The canonical JSON form (sorted keys) the hash is computed over.
nlohmann::json to_json(const ExperimentConfig& cfg);

// Validates paths and value ranges; throws ConfigError naming the field.
void validate(const ExperimentConfig& cfg);

std::string git_describe();

}  // namespace flakelab::config
