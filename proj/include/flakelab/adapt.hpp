#pragma once

#include "flakelab/colorimetry.hpp"
#include "flakelab/neural.hpp"
#include "flakelab/tasks.hpp"

namespace flakelab::adapt {

// White-balance gains are modeled as G = exp(z) with |z| squashed below this
// bound: gains stay positive and inside a plausible calibration range
// (1/1.7 .. 1.7), which also bounds how far entropy descent can slide the
// whole color distribution.
inline constexpr float kLogGainLimit = 0.5306283f;  // log(1.7)

// Predicts per-image log-gains z; G = exp(z) keeps white-balance gains
// strictly positive. Zero-initialized fc means G = (1,1,1) at start.
// The optional fourth output models a scalar gamma (applied as x^(1/gamma)
// before the division) and is disabled by default.
struct ColorNormNet {
    nn::TensorF conv_w, conv_b;  // 16 x 3 x 3 x 3
    nn::TensorF fc_w, fc_b;      // (3 or 4) x 16
    bool gamma_enabled = false;

    static ColorNormNet init(Rng& rng, bool gamma_enabled = false);

    struct Out {
        nn::GraphF::Ref gains;       // N x 3, strictly positive
        nn::GraphF::Ref normalized;  // x / G (after optional gamma)
    };
    // Registers this net's parameters in g and runs the forward pass.
    Out forward(nn::GraphF& g, nn::GraphF::Ref x);

    std::vector<nn::TensorF*> params();
    std::vector<std::pair<std::string, const nn::TensorF*>> named_tensors() const;
};

// Encoder-decoder from a color-normalized image to per-pixel reflectance in
// (0,1). The final conv's per-output-channel slices are the per-wavelength
// parameter groups that tau_neighbor smooths.
struct SpecInvNet {
    nn::TensorF enc1_w, enc1_b;  // 16 x 3, stride 2
    nn::TensorF enc2_w, enc2_b;  // 32 x 16, stride 2
    nn::TensorF dec1_w, dec1_b;  // 16 x 32
    nn::TensorF dec2_w, dec2_b;  // d_out x 16
    int d_out = 128;

    static SpecInvNet init(Rng& rng, int d_out);

    struct Out {
        nn::GraphF::Ref spectra;  // N x d_out x H x W, in (0,1)
        nn::GraphF::Ref final_w;  // graph refs of the per-wavelength group
        nn::GraphF::Ref final_b;
    };
    Out forward(nn::GraphF& g, nn::GraphF::Ref x_normalized);

    std::vector<nn::TensorF*> params();
    std::vector<std::pair<std::string, const nn::TensorF*>> named_tensors() const;
};

// Pairwise distance of adjacent final-layer channel slices (value only; the
// in-graph version lives on the tape via Graph::tau_neighbor).
double tau_neighbor_value(SpecInvNet& net);

// Module-level source transform: re-render estimated reflectance under the
// known source sensor. Double precision, shares the render code path exactly.
color::RgbImage source_transform(const color::SpectralImage& spectra, const color::SensorModel& source_sensor);

// The fixed 3 x D projection the in-graph source transform uses:
// srgb_matrix * A_s / norm, flattened row-major as a 1x1 conv weight.
nn::TensorF source_projection_weight(const color::SensorModel& source_sensor);

struct AdaptConfig {
    double lr = 1e-4;
    double beta_reg = 0.1;
    int steps = 100;        // optimizer steps over the target set
    int batch_size = 16;
    double weight_decay = 0.0;
    // The gain estimate is 3 fast parameters; the spectral prior moves slower
    // so a global miscalibration is fixed by G before SpecInv can restructure
    // whole color clusters.
    double specinv_lr_scale = 0.1;
    std::uint64_t seed = 0;
    bool per_image = false;  // true: adapt each image independently (steps per image)
    // ablation toggles
    bool colornorm_enabled = true;
    bool source_transform_enabled = true;
    bool tau_enabled = true;
};

// Everything the source-free loop owns. The task head is frozen: adaptation
// updates only ColorNorm / SpecInv (or the free gain vector when ColorNorm is
// ablated away).
struct AdaptationState {
    ColorNormNet colornorm;
    SpecInvNet specinv;
    nn::TensorF free_log_gains;  // 1 x 3; the learnable gains when colornorm is off
    tasks::TaskHead task;
    nn::TensorF source_project;  // 3 x D x 1 x 1
    AdaptConfig cfg;

    static AdaptationState make(const tasks::TaskHead& task, const color::SensorModel& source_sensor,
                                const AdaptConfig& cfg, Rng& rng, int d_out = 0);

    // Parameters the optimizer is allowed to touch under the current toggles.
    std::vector<nn::TensorF*> adaptable_params();

    // Builds the inference path for a batch: x -> x/G -> R_hat -> A_s R_hat
    // -> frozen task logits (skipping disabled stages).
    struct Forward {
        nn::GraphF::Ref logits;
        nn::GraphF::Ref gains;        // -1 when no gain stage is active
        nn::GraphF::Ref spec_final_w; // -1 when SpecInv is inactive
        nn::GraphF::Ref spec_final_b;
        nn::GraphF::Ref transformed;  // the image batch the task model consumed
    };
    Forward forward(nn::GraphF& g, nn::GraphF::Ref x);

    // tasks::evaluate hook running the current inference path.
    tasks::BatchTransform preprocessor();
};

struct AdaptStepLog {
    double entropy = 0.0;
    double tau = 0.0;
    double loss = 0.0;
};

struct AdaptReport {
    std::vector<AdaptStepLog> steps;
    double entropy_before = 0.0;
    double entropy_after = 0.0;
    std::array<double, 3> mean_gains{1.0, 1.0, 1.0};
    std::uint64_t task_hash_before = 0;
    std::uint64_t task_hash_after = 0;
    double wall_seconds = 0.0;
    nlohmann::ordered_json to_json() const;
};

// Source-free entropy minimization over the target patches. Throws Error with
// diagnostics if the loss turns non-finite.
AdaptReport adapt(AdaptationState& state, const tasks::PatchDataset& target);

// Mean prediction entropy of the current inference path over a dataset.
double mean_entropy(AdaptationState& state, const tasks::PatchDataset& dataset, int batch_size = 64);

struct PretrainConfig {
    int epochs = 6;
    int batch_size = 16;
    double lr = 1e-3;
    double gain_lo = 0.6;
    double gain_hi = 1.6;
    std::uint64_t seed = 11;
    int max_samples = 1024;  // cap for desk-scale runtime
};

struct PretrainReport {
    std::vector<double> epoch_losses;
    double final_loss = 0.0;
    double holdout_metric = 0.0;  // ColorNorm: max relative gain error; SpecInv: spectral MSE
};

// Supervised warm starts from synthesized data: ColorNorm on (x o G, G) pairs
// with sampled gains; SpecInv on (x_bar, R) pairs. When a pretrained ColorNorm
// is supplied, SpecInv trains on the composed pipeline input
// (x o G) / ColorNorm(x o G) with freshly sampled gains, so it learns to
// absorb the gain residuals ColorNorm actually leaves behind.
PretrainReport pretrain_colornorm(ColorNormNet& net, const tasks::PatchDataset& source, const PretrainConfig& cfg);
PretrainReport pretrain_specinv(SpecInvNet& net, const tasks::PatchDataset& source, synth::MaterialLibrary& materials,
                                const optics::SpectralGrid& grid, const PretrainConfig& cfg,
                                const ColorNormNet* colornorm = nullptr);

}  // namespace flakelab::adapt
