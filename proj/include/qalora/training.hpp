#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "qalora/adapter.hpp"
#include "qalora/numkit.hpp"
#include "qalora/quant.hpp"

namespace qalora {

enum class Activation { identity, relu };
enum class LossKind { mse, cross_entropy };
enum class Optimizer { sgd, adam };

// Dense FP layer, optionally carrying a full-shape adapter (pooling window 1,
// so A is d_in x rank). This is the plain-LoRA baseline unit.
struct FpLayer {
    Matrix weights; // d_in x d_out
    std::optional<AdapterPair> adapter;
};

struct ModelLayer {
    std::variant<FpLayer, QuantLinearLayer> unit;
    Activation activation = Activation::identity;

    bool is_quant() const { return std::holds_alternative<QuantLinearLayer>(unit); }
    std::size_t d_in() const;
    std::size_t d_out() const;
    // Adapter pooling window: the base's quantization group size, or 1 for FP.
    std::size_t pool_group() const {
        return is_quant() ? std::get<QuantLinearLayer>(unit).base.group_size() : 1;
    }
    std::size_t pool_groups() const { return d_in() / pool_group(); }
    const std::optional<AdapterPair>& adapter() const;
    std::optional<AdapterPair>& adapter();
};

// An ordered stack of linear units with per-layer activations.
struct ToyModel {
    std::vector<ModelLayer> layers;
    LossKind loss = LossKind::mse;

    void validate() const; // layer dimensions must chain
    std::size_t d_in() const { return layers.front().d_in(); }
    std::size_t d_out() const { return layers.back().d_out(); }
    bool all_quant() const;
    bool all_fp() const;
    bool has_adapters() const;
    Vector forward(const Vector& x) const;
};

struct TrainConfig {
    std::size_t steps = 0;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    Optimizer optimizer = Optimizer::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t rank = 8;
    double scale = 0.0; // <= 0 selects the default 2.0 / rank
    int bits = 4;
    std::size_t group_size = 32;
    std::uint64_t seed = 1;
    double max_grad_norm = 0.3;

    double resolved_scale() const { return scale > 0.0 ? scale : 2.0 / static_cast<double>(rank); }
    void validate() const;
};

struct Dataset {
    Matrix inputs;                             // n x d_in
    std::optional<Matrix> targets;             // n x d_target, regression
    std::optional<std::vector<int>> labels;    // classification
    std::string name;

    std::size_t size() const { return inputs.rows(); }
    void validate() const; // exactly one of targets/labels, matching row counts
};

// JSON-lines dataset files: one object per row with "input" (array of reals)
// and either "target" (array of reals) or "label" (integer).
Dataset load_dataset_jsonl(const std::filesystem::path& path);
void save_dataset_jsonl(const Dataset& data, const std::filesystem::path& path);

// CSV with header "step,loss", steps numbered from 1.
void write_loss_csv(const std::vector<double>& curve, const std::filesystem::path& path);

struct Metrics {
    double loss = 0.0;
    std::optional<double> accuracy;
};

// Mean loss over the dataset; accuracy is reported for labeled data.
Metrics evaluate(const ToyModel& model, const Dataset& data);

// Attaches fresh adapters to every layer: A seeded uniform on
// (-1/sqrt(L), 1/sqrt(L)), B zero so the initial adapter term vanishes.
ToyModel init_adapters(const ToyModel& model, std::size_t rank, double scale,
                       std::uint64_t seed);

// Raw parameter updates. Gradient clipping is applied by the training loop
// before these are called.
void sgd_step(std::span<double> params, std::span<const double> grads, double lr);

struct AdamConfig {
    double lr;
    double beta1;
    double beta2;
    double eps;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

void adam_step(AdamState& state, std::size_t t, std::span<double> params,
               std::span<const double> grads, const AdamConfig& cfg);

// Scales all gradients in place so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<std::span<double>> grads, double max_norm);

struct TrainResult {
    ToyModel model;
    std::vector<double> loss_curve; // per-step mean batch loss
};

// Generic single-writer training loop over whatever adapters the model
// carries; bases of either kind stay frozen. Deterministic for a fixed
// (seed, config, dataset).
TrainResult train_adapters(const ToyModel& model, const Dataset& data,
                           const TrainConfig& cfg);

// Same loop restricted to fully-quantized models, with a per-step bitwise
// check that codes, scales and zeros never change.
TrainResult train_qalora(const ToyModel& model, const Dataset& data,
                         const TrainConfig& cfg);

struct QaloraPipelineResult {
    ToyModel trained; // quantized bases + trained adapters
    ToyModel merged;  // adapters folded into zero-points
    std::vector<double> loss_curve;
};

// quantize -> init adapters -> train -> merge. The result contains only
// packed quantized layers.
QaloraPipelineResult pipeline_qalora(const ToyModel& fp_model, const Dataset& data,
                                     const TrainConfig& cfg);

struct LoraPtqPipelineResult {
    ToyModel trained;   // FP bases + trained full-shape adapters
    ToyModel fp_merged; // adapters folded into the FP weights
    ToyModel quantized; // round-to-nearest PTQ of the merged weights
    std::vector<double> loss_curve;
};

// Full-shape LoRA against the FP base, merge, then round-to-nearest PTQ at
// (bits, group_size) -- the merge-then-quantize baseline.
LoraPtqPipelineResult pipeline_lora_ptq(const ToyModel& fp_model, const Dataset& data,
                                        const TrainConfig& cfg);

} // namespace qalora
