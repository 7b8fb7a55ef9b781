#pragma once

#include "flakelab/config.hpp"

namespace flakelab::pipeline {

using config::ExperimentConfig;

// Shared lazily-built context for one experiment directory.
struct Workspace {
    ExperimentConfig cfg;
    synth::MaterialLibrary materials;
    optics::SpectralGrid grid;
    color::SensorModel source_sensor;

    explicit Workspace(ExperimentConfig c);

    color::SensorModel sensor_for(const std::string& illuminant_id) const;
    std::string target_name(std::size_t index) const { return "target_" + std::to_string(index); }
};

// gen-data: source dataset plus one dataset per target domain.
nlohmann::ordered_json cmd_gen_data(Workspace& ws);

// train: source task training (classifier + thickness head on the frozen
// backbone). Requires gen-data artifacts.
nlohmann::ordered_json cmd_train(Workspace& ws, bool force = false);

// pretrain-adapt: ColorNorm and SpecInv warm starts from source data.
nlohmann::ordered_json cmd_pretrain_adapt(Workspace& ws, bool force = false);

// adapt: source-free entropy minimization against one target dataset.
nlohmann::ordered_json cmd_adapt(Workspace& ws, std::size_t target_index = 0, bool force = false);

// eval: metrics for a dataset by name ("source" or "target_<i>"), optionally
// through the adapted inference path.
nlohmann::ordered_json cmd_eval(Workspace& ws, const std::string& dataset, bool adapted, bool force = false);

// render: one scene preview PNG + optional reflectance dump at a pixel.
struct RenderRequest {
    std::uint64_t scene_seed = 0;
    int pixel_x = -1;
    int pixel_y = -1;
    std::filesystem::path out_png;
    std::filesystem::path out_spectrum_csv;  // empty: no dump
};
nlohmann::ordered_json cmd_render(Workspace& ws, const RenderRequest& request);

struct PipelineOptions {
    bool ablation = false;
    bool force = false;
    double require_recovery = -1.0;  // fraction of the gap; < 0 disables the check
};

// The full loop: gen-data, train, pretrain, eval (source / target pre-adapt),
// adapt, eval post-adapt, consolidated report. Returns the report; throws
// AcceptanceError when a requested recovery threshold is missed.
struct AcceptanceError : Error {
    using Error::Error;
};
nlohmann::ordered_json cmd_pipeline(Workspace& ws, const PipelineOptions& options);

// Loads the adaptation state parts produced by cmd_pretrain_adapt.
adapt::AdaptationState load_pretrained_state(Workspace& ws, bool adapted_checkpoints = false);

}  // namespace flakelab::pipeline
