#pragma once

// Two-stage weakly supervised training: a patch classifier (conv trunk ->
// global average pool -> one dense unit -> sigmoid) is trained on labeled
// patches, then reused unchanged as a fully-convolutional full-image
// classifier and fine-tuned with image-level labels.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "triage/error.hpp"
#include "triage/micronet.hpp"
#include "triage/rng.hpp"
#include "triage/tensor.hpp"

namespace triage::twostage {

using micronet::LayerKind;
using micronet::LayerSpec;
using micronet::NetworkSpec;
using micronet::Padding;
using micronet::Parameters;

/// Trunk geometry: one block per entry of `channels`, each a same-padded
/// conv, relu and a stride-`pool` max pool.
struct ArchConfig {
    std::size_t input_channels = 1;
    std::vector<std::size_t> channels{8, 12, 16};
    std::size_t kernel = 3;
    std::size_t pool = 2;
    std::size_t patch_size = 32;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline NetworkSpec make_network_spec(const ArchConfig& arch) {
    require(!arch.channels.empty(), ErrorCode::InvalidArgument, "architecture needs at least one conv block");
    NetworkSpec spec;
    spec.input_channels = arch.input_channels;
    std::size_t in = arch.input_channels;
    for (auto out : arch.channels) {
        spec.layers.push_back(LayerSpec::conv2d(in, out, arch.kernel, 1, Padding::Same));
        spec.layers.push_back(LayerSpec::relu());
        if (arch.pool > 1) spec.layers.push_back(LayerSpec::maxpool2d(arch.pool, arch.pool, Padding::Valid));
        in = out;
    }
    spec.layers.push_back(LayerSpec::global_avg_pool());
    spec.layers.push_back(LayerSpec::dense(in, 1));
    spec.layers.push_back(LayerSpec::sigmoid());
    return spec;
}

/// Rejects anything but <trunk> -> global_avg_pool -> dense(->1) -> sigmoid with a pool-free head.
inline void check_classifier_head(const NetworkSpec& spec) {
    micronet::validate(spec);
    const auto& L = spec.layers;
    const auto n = L.size();
    require(n >= 4 && L[n - 3].kind == LayerKind::GlobalAvgPool && L[n - 2].kind == LayerKind::Dense &&
                L[n - 2].out_units == 1 && L[n - 1].kind == LayerKind::Sigmoid,
            ErrorCode::InvalidArgument, "classifier head must be global_avg_pool -> dense(->1) -> sigmoid");
    for (std::size_t i = 0; i + 3 < n; ++i)
        require(L[i].kind == LayerKind::Conv2d || L[i].kind == LayerKind::Relu || L[i].kind == LayerKind::MaxPool2d,
                ErrorCode::InvalidArgument,
                micronet::layer_label(spec, i) + " is not a convolutional trunk layer");
    require(L.front().kind == LayerKind::Conv2d, ErrorCode::InvalidArgument, "trunk must start with conv2d");
}

struct PatchModel {
    NetworkSpec spec;
    Parameters params;
    std::size_t patch_size = 0;
    std::uint64_t seed = 0;

    double predict(const Tensor& patch) const {
        require(patch.rank() == 3 && patch.dim(1) == patch_size && patch.dim(2) == patch_size,
                ErrorCode::ShapeMismatch,
                "patch model expects " + std::to_string(patch_size) + "x" + std::to_string(patch_size) +
                    " input, got " + shape_string(patch.shape()));
        return micronet::predict(spec, params, patch);
    }
    bool accepts(const Tensor& x) const { return x.rank() == 3 && x.dim(1) == patch_size && x.dim(2) == patch_size; }
};

struct FullImageModel {
    NetworkSpec spec;
    Parameters params;
    std::size_t min_input_size = 0;
    std::uint64_t seed = 0;

    bool accepts(const Tensor& x) const {
        return x.rank() == 3 && x.dim(1) >= min_input_size && x.dim(2) >= min_input_size;
    }
    double predict(const Tensor& image) const;
};

inline PatchModel build_patch_model(const NetworkSpec& spec, std::size_t patch_size, std::uint64_t seed) {
    check_classifier_head(spec);
    require(patch_size >= micronet::min_input_size(spec), ErrorCode::InvalidArgument,
            "patch size " + std::to_string(patch_size) + " is below the network's minimum input " +
                std::to_string(micronet::min_input_size(spec)));
    return PatchModel{spec, micronet::init_parameters(spec, seed), patch_size, seed};
}

inline PatchModel build_patch_model(const ArchConfig& arch, std::uint64_t seed) {
    return build_patch_model(make_network_spec(arch), arch.patch_size, seed);
}

/// Same spec, same parameter values; only the accepted input size widens.
inline FullImageModel convert_to_full_image(const PatchModel& patch) {
    check_classifier_head(patch.spec);
    return FullImageModel{patch.spec, patch.params, micronet::min_input_size(patch.spec), patch.seed};
}

inline double predict_image(const FullImageModel& model, const Tensor& image) {
    require(image.rank() == 3, ErrorCode::ShapeMismatch, "image must be (C,H,W), got " + shape_string(image.shape()));
    require(image.dim(1) >= model.min_input_size && image.dim(2) >= model.min_input_size, ErrorCode::ShapeMismatch,
            "image " + shape_string(image.shape()) + " is smaller than the minimum input " +
                std::to_string(model.min_input_size));
    return micronet::predict(model.spec, model.params, image);
}

inline double FullImageModel::predict(const Tensor& image) const { return predict_image(*this, image); }

struct Sample {
    Tensor image;
    int label = 0;
};
using Dataset = std::vector<Sample>;

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    bool balance_classes = true;
    // Stage-2 option: update only the dense head.
    bool freeze_trunk = false;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Draws batches with each element's class chosen uniformly, then an example
/// uniformly within that class.
class BalancedSampler {
public:
    BalancedSampler(std::span<const int> labels, std::uint64_t seed) : rng_(seed) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            require(labels[i] == 0 || labels[i] == 1, ErrorCode::InvalidArgument, "labels must be 0 or 1");
            by_class_[static_cast<std::size_t>(labels[i])].push_back(i);
        }
        require(!by_class_[0].empty(), ErrorCode::EmptyClass, "class balancing needs at least one negative sample");
        require(!by_class_[1].empty(), ErrorCode::EmptyClass, "class balancing needs at least one positive sample");
    }

    std::vector<std::size_t> next_batch(std::size_t n) {
        std::vector<std::size_t> out(n);
        for (auto& idx : out) {
            const auto& pool = by_class_[rng_.below(2)];
            idx = pool[rng_.below(pool.size())];
        }
        return out;
    }

private:
    CounterRng rng_;
    std::vector<std::size_t> by_class_[2];
};

/// Index batches for one epoch: ceil(N / batch_size) batches, balanced or a
/// seeded permutation. Deterministic in (config.seed, epoch).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::span<const int> labels, const TrainConfig& config,
                                                           std::size_t epoch) {
    require(config.batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be >= 1");
    const std::size_t n = labels.size();
    const std::size_t steps = (n + config.batch_size - 1) / config.batch_size;
    const auto key = derive_seed(config.seed, "twostage.epoch", {epoch});
    std::vector<std::vector<std::size_t>> batches;
    if (config.balance_classes) {
        BalancedSampler sampler(labels, key);
        for (std::size_t s = 0; s < steps; ++s) batches.push_back(sampler.next_batch(config.batch_size));
        return batches;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    CounterRng rng(key);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t s = 0; s < steps; ++s) {
        const auto first = order.begin() + static_cast<long>(s * config.batch_size);
        const auto last = order.begin() + static_cast<long>(std::min(n, (s + 1) * config.batch_size));
        batches.emplace_back(first, last);
    }
    return batches;
}

template <typename Model>
struct TrainResult {
    Model model;
    std::vector<double> loss_trace;  // mean batch loss per epoch, at pre-update parameters
};

template <typename Model>
TrainResult<Model> train(Model model, const Dataset& data, const TrainConfig& config) {
    require(!data.empty(), ErrorCode::InvalidArgument, "training set is empty");
    require(config.learning_rate >= 0, ErrorCode::InvalidArgument, "learning rate must be non-negative");
    for (const auto& s : data)
        require(model.accepts(s.image), ErrorCode::ShapeMismatch,
                "training sample of shape " + shape_string(s.image.shape()) + " is not accepted by the model");
    std::vector<int> labels;
    labels.reserve(data.size());
    for (const auto& s : data) labels.push_back(s.label);

    std::vector<std::string> frozen;
    if (config.freeze_trunk)
        for (std::size_t i = 0; i + 3 < model.spec.layers.size(); ++i)
            if (model.spec.layers[i].has_params()) {
                frozen.push_back(micronet::weight_name(i));
                frozen.push_back(micronet::bias_name(i));
            }

    micronet::SgdOptimizer opt(config.momentum);
    TrainResult<Model> result{std::move(model), {}};
    std::vector<const Tensor*> inputs;
    std::vector<int> batch_labels;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double loss_sum = 0;
        const auto batches = epoch_batches(labels, config, epoch);
        for (const auto& batch : batches) {
            inputs.clear();
            batch_labels.clear();
            for (auto i : batch) {
                inputs.push_back(&data[i].image);
                batch_labels.push_back(data[i].label);
            }
            auto bg = micronet::batch_gradient<float>(result.model.spec, result.model.params, inputs, batch_labels);
            loss_sum += bg.mean_loss;
            opt.step(result.model.params, bg.grads, config.learning_rate, frozen);
        }
        result.loss_trace.push_back(loss_sum / static_cast<double>(batches.size()));
    }
    return result;
}

}  // namespace triage::twostage
