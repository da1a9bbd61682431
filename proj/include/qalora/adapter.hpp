#pragma once

#include <optional>

#include "qalora/numkit.hpp"
#include "qalora/quant.hpp"

namespace qalora {

// Low-rank adapter factors. `a` takes the group-pooled input (one row per
// quantization group of the base it is attached to), `b` maps the rank-sized
// intermediate to the output, and `s` scales the whole adapter term.
struct AdapterPair {
    Matrix a; // num_groups x rank
    Matrix b; // rank x d_out
    double s;

    AdapterPair(Matrix a_in, Matrix b_in, double s_in);
    std::size_t rank() const { return a.cols(); }
    std::size_t d_out() const { return b.cols(); }
};

// One quantized linear unit: a frozen packed base plus an optional adapter.
struct QuantLinearLayer {
    QuantizedMatrix base;
    std::optional<AdapterPair> adapter;

    explicit QuantLinearLayer(QuantizedMatrix base_in,
                              std::optional<AdapterPair> adapter_in = std::nullopt);
};

// y = dequant(base)^T x + s * B^T (A^T pool(x)). The base term de-quantizes
// on the fly per (group, column); the dense weight matrix is never formed.
Vector qalora_forward(const QuantLinearLayer& layer, const Vector& x);

struct AdapterGrads {
    Matrix a; // num_groups x rank
    Matrix b; // rank x d_out
};

// Adapter gradients for upstream gradient grad_out = dLoss/dy. With
// u = pool(x): gA = s * u (B grad_out)^T, gB = s * (A^T u) grad_out^T.
// The frozen base gets no gradient.
AdapterGrads qalora_backward(const QuantLinearLayer& layer, const Vector& x,
                             const Vector& grad_out);

// Gradient formulas shared by the pooled (quantized-base) and full-shape
// (FP-base) adapter paths; `u` is the pooled input, or the raw input when
// the pooling window is 1.
AdapterGrads pooled_adapter_grads(const AdapterPair& adapter, const Vector& u,
                                  const Vector& grad_out);

// Adapter contribution to dLoss/dx: s * expand(A (B grad_out)) where expand
// repeats each group entry group_size times.
Vector pooled_adapter_input_gradient(const AdapterPair& adapter, const Vector& grad_out,
                                     std::size_t group_size);

// dLoss/dx for the full layer (base term plus adapter term), used to chain
// gradients through stacked layers.
Vector qalora_input_gradient(const QuantLinearLayer& layer, const Vector& grad_out);

// Folds the adapter into the base by updating only the zero-points:
//   z'[l][j] = z[l][j] - s * (A B)[l][j] / scale[l][j].
// Codes, scales, bit width and group size are untouched; the returned matrix
// carries no adapter. Merged zeros are generically non-integer and are kept
// as reals; re-rounding them would break the exactness of the merge.
QuantizedMatrix merge(const QuantLinearLayer& layer);

// The dense weight delta the adapter represents: row m of the result equals
// s * (A B)[m / group_size]. Rows within one group are identical, which is
// exactly the property that makes the zero-point merge lossless.
Matrix effective_delta(const AdapterPair& adapter, std::size_t group_size,
                       std::size_t d_in);

// Plain LoRA over a dense FP base: y = w^T x + s * (A_full B)^T x.
Vector lora_forward(const Matrix& w, const Matrix& a_full, const Matrix& b, double s,
                    const Vector& x);

// w + s * A_full B.
Matrix lora_merge(const Matrix& w, const Matrix& a_full, const Matrix& b, double s);

// Trainable-parameter count of a pooled adapter.
std::size_t count_adapter_params(std::size_t num_groups, std::size_t rank,
                                 std::size_t d_out);

} // namespace qalora
