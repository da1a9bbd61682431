#pragma once

#include <cstdint>

#include "qalora/training.hpp"

namespace qalora::tasks {

// A synthetic fine-tuning problem: a full-precision base model plus train
// and eval splits drawn from a teacher that differs from the base by a
// group-constant low-rank delta per layer. The adapters have to learn both
// that delta and whatever error quantization of the base introduces.
struct ToyTask {
    ToyModel fp_model;
    Dataset train;
    Dataset eval;
};

struct LinearTaskParams {
    std::size_t d_in = 64;
    std::size_t d_out = 32;
    std::size_t delta_group = 8; // rows of the teacher delta repeat in blocks of this
    std::size_t delta_rank = 8;
    double base_scale = 1.0;
    double delta_scale = 0.5;
    double noise = 0.1; // target noise std, shared by train and eval splits
    std::size_t n_train = 512;
    std::size_t n_eval = 512;
};

// Single linear layer, MSE. Teacher: W_base + expand(P), targets with noise.
ToyTask make_linear_teacher_task(const LinearTaskParams& params, std::uint64_t seed);

struct MlpTaskParams {
    std::size_t d_in = 64;
    std::size_t d_hidden = 32;
    std::size_t d_out = 16;
    std::size_t delta_group = 8;
    std::size_t delta_rank = 8;
    double delta_scale = 0.5; // relative to each layer's weight scale
    double noise = 0.05;
    std::size_t n_train = 512;
    std::size_t n_eval = 512;
};

// Two dense layers with a ReLU in between, MSE against a perturbed teacher.
ToyTask make_mlp_teacher_task(const MlpTaskParams& params, std::uint64_t seed);

struct BlobTaskParams {
    std::size_t d_in = 8;
    std::size_t n_classes = 4;
    double separation = 3.0;
    double spread = 0.6;
    std::size_t n_train = 256;
    std::size_t n_eval = 256;
};

// Gaussian blob classification with a cross-entropy head.
ToyTask make_blob_task(const BlobTaskParams& params, std::uint64_t seed);

} // namespace qalora::tasks
