#pragma once

#include <functional>
#include <optional>

#include <json.hpp>

#include "flakelab/neural.hpp"
#include "flakelab/synthgen.hpp"

namespace flakelab::tasks {

// One 32x32 crop centered on a flake, carrying both task targets plus the
// per-pixel stack indices needed to rebuild its ground-truth spectra.
struct PatchSample {
    std::vector<float> rgb;      // CHW, 3 * size * size, linear light
    std::vector<int> stack_ids;  // size * size indices into PatchDataset::stacks
    int layer_class = 0;
    int layer_count = 0;
    double thickness_nm = 0.0;
    std::string material_id;
    int image_id = 0;
};

struct StackKey {
    std::string material_id;  // empty for bare substrate
    int layer_count = 0;
    bool operator<(const StackKey& o) const {
        return std::tie(material_id, layer_count) < std::tie(o.material_id, o.layer_count);
    }
};

struct PatchDataset {
    int patch_size = 32;
    double substrate_sio2_nm = 290.0;
    std::vector<StackKey> stacks;  // stacks[0] is always the substrate
    std::vector<PatchSample> samples;

    // N x 3 x S x S batch for the given sample indices.
    nn::TensorF batch_images(const std::vector<int>& indices) const;
    std::vector<int> batch_labels(const std::vector<int>& indices) const;
    nn::TensorF batch_thickness(const std::vector<int>& indices) const;  // N x 1
    // N x D x S x S ground-truth reflectance, rebuilt from the TMM cache.
    nn::TensorF batch_spectra(const std::vector<int>& indices, synth::MaterialLibrary& materials,
                              const optics::SpectralGrid& grid) const;
};

// Extracts one patch per flake from an emitted dataset (plus the per-pixel
// stack table). Flakes whose clamped patch center leaves the flake are
// skipped, so every sample's center pixel matches its label.
PatchDataset extract_patches(const std::filesystem::path& dataset_root, int patch_size = 32);

// Union of several patch datasets (stack tables are remapped). All inputs
// must share patch size and substrate.
PatchDataset merge_patch_datasets(const std::vector<const PatchDataset*>& parts);

// Shared conv backbone with classification and thickness heads. Inputs pass
// through a fixed per-channel standardization (computed once from the source
// training set); this is an initialization-level reparametrization of the
// first conv, stored with the checkpoint so every consumer applies it.
struct TaskHead {
    nn::TensorF norm_mean, norm_scale;  // 3 each, not trained
    nn::TensorF conv1_w, conv1_b;       // 3 -> 16, stride 2
    nn::TensorF conv2_w, conv2_b;       // 16 -> 32, stride 2
    nn::TensorF cls_w, cls_b;           // C x 32
    nn::TensorF thick_w, thick_b;       // 1 x 32
    int num_classes = 3;

    static TaskHead init(Rng& rng, int num_classes = 3);
    // Per-channel mean and 1/std over the dataset's pixels.
    void fit_normalization(const PatchDataset& dataset);

    struct Refs {
        nn::GraphF::Ref conv1_w, conv1_b, conv2_w, conv2_b, cls_w, cls_b, thick_w, thick_b;
        const TaskHead* head = nullptr;  // for the fixed normalization constants
    };
    // Registers parameters as trainable leaves.
    Refs register_params(nn::GraphF& g);
    // Registers parameters as constants: gradients flow through but never into them.
    Refs register_frozen(nn::GraphF& g) const;

    static nn::GraphF::Ref features(nn::GraphF& g, const Refs& r, nn::GraphF::Ref x);
    static nn::GraphF::Ref logits(nn::GraphF& g, const Refs& r, nn::GraphF::Ref features);
    static nn::GraphF::Ref thickness(nn::GraphF& g, const Refs& r, nn::GraphF::Ref features);

    std::vector<nn::TensorF*> backbone_params();
    std::vector<nn::TensorF*> classifier_params();
    std::vector<nn::TensorF*> thickness_params();
    std::vector<std::pair<std::string, const nn::TensorF*>> named_tensors() const;

    void save(const std::filesystem::path& path) const;
    static TaskHead load(const std::filesystem::path& path);
    // Order-stable fingerprint of every parameter byte.
    std::uint64_t parameter_hash() const;
};

struct TrainConfig {
    int epochs = 20;
    int batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double val_fraction = 0.2;
    std::uint64_t seed = 1;
};

struct TrainReport {
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
};

// Cross-entropy training of backbone + classifier. Deterministic under seed.
TrainReport train_source(TaskHead& head, const PatchDataset& dataset, const TrainConfig& cfg);

// Smooth-L1 fit of the thickness head only; the backbone stays bit-frozen.
TrainReport train_thickness(TaskHead& head, const PatchDataset& dataset, const TrainConfig& cfg);

// Half-open bins [edge_i, edge_{i+1}); values below the first edge map to 0.
int quantize_thickness(double thickness_nm, const std::vector<double>& bin_edges);

// Optional hook that maps a raw batch to the batch actually fed to the model
// (the adaptation network's inference path).
using BatchTransform = std::function<nn::TensorF(const nn::TensorF&)>;

struct EvalReport {
    double accuracy = 0.0;
    std::map<std::string, double> accuracy_by_material;
    std::vector<std::vector<int>> confusion;  // [true][pred]
    double thickness_mae_nm = 0.0;
    std::vector<int> predictions;
    std::vector<double> thickness_predictions_nm;
    nlohmann::ordered_json to_json() const;
};

EvalReport evaluate(const TaskHead& head, const PatchDataset& dataset, const BatchTransform& transform = nullptr,
                    int batch_size = 32);

}  // namespace flakelab::tasks
