#include "qalora/adapter.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace qalora {

namespace {

// rank-sized product t = A^T u.
std::vector<double> at_u(const Matrix& a, std::span<const double> u) {
    std::vector<double> t(a.cols(), 0.0);
    for (std::size_t l = 0; l < a.rows(); ++l) {
        const double ul = u[l];
        for (std::size_t k = 0; k < a.cols(); ++k) {
            t[k] += a(l, k) * ul;
        }
    }
    return t;
}

// rank-sized product w = B g.
std::vector<double> b_g(const Matrix& b, std::span<const double> g) {
    std::vector<double> w(b.rows(), 0.0);
    for (std::size_t k = 0; k < b.rows(); ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < b.cols(); ++j) {
            acc += b(k, j) * g[j];
        }
        w[k] = acc;
    }
    return w;
}

void check_len(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
        throw Error(std::string(what) + ": length " + std::to_string(got) +
                    ", expected " + std::to_string(want));
    }
}

} // namespace

AdapterPair::AdapterPair(Matrix a_in, Matrix b_in, double s_in)
    : a(std::move(a_in)), b(std::move(b_in)), s(s_in) {
    if (a.cols() == 0 || a.cols() != b.rows()) {
        throw Error("AdapterPair: rank mismatch, A is " + std::to_string(a.rows()) +
                    "x" + std::to_string(a.cols()) + ", B is " +
                    std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    if (!std::isfinite(s)) {
        throw Error("AdapterPair: scale must be finite");
    }
}

QuantLinearLayer::QuantLinearLayer(QuantizedMatrix base_in,
                                   std::optional<AdapterPair> adapter_in)
    : base(std::move(base_in)), adapter(std::move(adapter_in)) {
    if (adapter && adapter->a.rows() != base.num_groups()) {
        throw Error("QuantLinearLayer: adapter A has " +
                    std::to_string(adapter->a.rows()) + " rows, base has " +
                    std::to_string(base.num_groups()) + " groups");
    }
    if (adapter && adapter->b.cols() != base.d_out()) {
        throw Error("QuantLinearLayer: adapter B has " +
                    std::to_string(adapter->b.cols()) + " cols, base d_out is " +
                    std::to_string(base.d_out()));
    }
}

Vector qalora_forward(const QuantLinearLayer& layer, const Vector& x) {
    const QuantizedMatrix& q = layer.base;
    check_len(x.size(), q.d_in(), "qalora_forward: input");
    const std::size_t g = q.group_size(), n_groups = q.num_groups();

    const Vector u = group_sum_pool(x, g);
    std::vector<double> y(q.d_out(), 0.0);
    CodeArray column(q.d_in());
    for (std::size_t j = 0; j < q.d_out(); ++j) {
        q.unpack_column(j, column.data());
        double acc = 0.0;
        for (std::size_t l = 0; l < n_groups; ++l) {
            double dot = 0.0;
            const std::size_t base_i = l * g;
            for (std::size_t r = 0; r < g; ++r) {
                dot += static_cast<double>(column[base_i + r]) * x[base_i + r];
            }
            acc += q.scales()(l, j) * (dot - q.zeros()(l, j) * u[l]);
        }
        y[j] = acc;
    }
    if (layer.adapter) {
        const AdapterPair& ad = *layer.adapter;
        const auto t = at_u(ad.a, u.data());
        for (std::size_t k = 0; k < t.size(); ++k) {
            const double tk = ad.s * t[k];
            for (std::size_t j = 0; j < q.d_out(); ++j) {
                y[j] += tk * ad.b(k, j);
            }
        }
    }
    return Vector(std::move(y));
}

AdapterGrads pooled_adapter_grads(const AdapterPair& adapter, const Vector& u,
                                  const Vector& grad_out) {
    check_len(u.size(), adapter.a.rows(), "pooled_adapter_grads: pooled input");
    check_len(grad_out.size(), adapter.b.cols(), "pooled_adapter_grads: grad_out");
    const auto t = at_u(adapter.a, u.data());       // A^T u
    const auto w = b_g(adapter.b, grad_out.data()); // B grad_out

    std::vector<double> ga(adapter.a.rows() * adapter.a.cols());
    for (std::size_t l = 0; l < adapter.a.rows(); ++l) {
        for (std::size_t k = 0; k < adapter.a.cols(); ++k) {
            ga[l * adapter.a.cols() + k] = adapter.s * u[l] * w[k];
        }
    }
    std::vector<double> gb(adapter.b.rows() * adapter.b.cols());
    for (std::size_t k = 0; k < adapter.b.rows(); ++k) {
        for (std::size_t j = 0; j < adapter.b.cols(); ++j) {
            gb[k * adapter.b.cols() + j] = adapter.s * t[k] * grad_out[j];
        }
    }
    return {Matrix(adapter.a.rows(), adapter.a.cols(), std::move(ga)),
            Matrix(adapter.b.rows(), adapter.b.cols(), std::move(gb))};
}

Vector pooled_adapter_input_gradient(const AdapterPair& adapter, const Vector& grad_out,
                                     std::size_t group_size) {
    check_len(grad_out.size(), adapter.b.cols(),
              "pooled_adapter_input_gradient: grad_out");
    const auto w = b_g(adapter.b, grad_out.data()); // B grad_out
    std::vector<double> gx(adapter.a.rows() * group_size);
    for (std::size_t l = 0; l < adapter.a.rows(); ++l) {
        double acc = 0.0;
        for (std::size_t k = 0; k < adapter.a.cols(); ++k) {
            acc += adapter.a(l, k) * w[k];
        }
        const double contrib = adapter.s * acc;
        for (std::size_t r = 0; r < group_size; ++r) {
            gx[l * group_size + r] = contrib;
        }
    }
    return Vector(std::move(gx));
}

AdapterGrads qalora_backward(const QuantLinearLayer& layer, const Vector& x,
                             const Vector& grad_out) {
    if (!layer.adapter) {
        throw Error("qalora_backward: layer has no adapter");
    }
    const QuantizedMatrix& q = layer.base;
    check_len(x.size(), q.d_in(), "qalora_backward: input");
    check_len(grad_out.size(), q.d_out(), "qalora_backward: grad_out");
    return pooled_adapter_grads(*layer.adapter, group_sum_pool(x, q.group_size()),
                                grad_out);
}

Vector qalora_input_gradient(const QuantLinearLayer& layer, const Vector& grad_out) {
    const QuantizedMatrix& q = layer.base;
    check_len(grad_out.size(), q.d_out(), "qalora_input_gradient: grad_out");
    const std::size_t g = q.group_size();

    std::vector<double> gx(q.d_in(), 0.0);
    CodeArray column(q.d_in());
    for (std::size_t j = 0; j < q.d_out(); ++j) {
        const double gj = grad_out[j];
        if (gj == 0.0) {
            continue;
        }
        q.unpack_column(j, column.data());
        for (std::size_t i = 0; i < q.d_in(); ++i) {
            const std::size_t l = i / g;
            gx[i] += q.scales()(l, j) *
                     (static_cast<double>(column[i]) - q.zeros()(l, j)) * gj;
        }
    }
    if (layer.adapter) {
        const Vector ad_gx = pooled_adapter_input_gradient(*layer.adapter, grad_out, g);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += ad_gx[i];
        }
    }
    return Vector(std::move(gx));
}

QuantizedMatrix merge(const QuantLinearLayer& layer) {
    if (!layer.adapter) {
        throw Error("merge: layer has no adapter");
    }
    const QuantizedMatrix& q = layer.base;
    const AdapterPair& ad = *layer.adapter;
    const Matrix p = matmul(ad.a, ad.b); // num_groups x d_out
    std::vector<double> new_zeros(q.num_groups() * q.d_out());
    for (std::size_t l = 0; l < q.num_groups(); ++l) {
        for (std::size_t j = 0; j < q.d_out(); ++j) {
            new_zeros[l * q.d_out() + j] =
                q.zeros()(l, j) - ad.s * p(l, j) / q.scales()(l, j);
        }
    }
    return q.with_zeros(Matrix(q.num_groups(), q.d_out(), std::move(new_zeros)));
}

Matrix effective_delta(const AdapterPair& adapter, std::size_t group_size,
                       std::size_t d_in) {
    if (group_size == 0 || adapter.a.rows() * group_size != d_in) {
        throw Error("effective_delta: num_groups " + std::to_string(adapter.a.rows()) +
                    " * group size " + std::to_string(group_size) +
                    " does not equal d_in " + std::to_string(d_in));
    }
    const Matrix p = matmul(adapter.a, adapter.b);
    const std::size_t d_out = p.cols();
    std::vector<double> out(d_in * d_out);
    for (std::size_t m = 0; m < d_in; ++m) {
        const std::size_t l = m / group_size;
        for (std::size_t j = 0; j < d_out; ++j) {
            out[m * d_out + j] = adapter.s * p(l, j);
        }
    }
    return Matrix(d_in, d_out, std::move(out));
}

Vector lora_forward(const Matrix& w, const Matrix& a_full, const Matrix& b, double s,
                    const Vector& x) {
    if (a_full.rows() != w.rows() || a_full.cols() != b.rows() || b.cols() != w.cols()) {
        throw Error("lora_forward: factor shapes do not match base " +
                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    }
    check_len(x.size(), w.rows(), "lora_forward: input");

    std::vector<double> y(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double xi = x[i];
        for (std::size_t j = 0; j < w.cols(); ++j) {
            y[j] += w(i, j) * xi;
        }
    }
    const auto t = at_u(a_full, x.data()); // A_full^T x
    for (std::size_t k = 0; k < t.size(); ++k) {
        const double tk = s * t[k];
        for (std::size_t j = 0; j < w.cols(); ++j) {
            y[j] += tk * b(k, j);
        }
    }
    return Vector(std::move(y));
}

Matrix lora_merge(const Matrix& w, const Matrix& a_full, const Matrix& b, double s) {
    if (a_full.rows() != w.rows() || a_full.cols() != b.rows() || b.cols() != w.cols()) {
        throw Error("lora_merge: factor shapes do not match base " +
                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    }
    const Matrix ab = matmul(a_full, b);
    std::vector<double> out(w.rows() * w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            out[i * w.cols() + j] = w(i, j) + s * ab(i, j);
        }
    }
    return Matrix(w.rows(), w.cols(), std::move(out));
}

std::size_t count_adapter_params(std::size_t num_groups, std::size_t rank,
                                 std::size_t d_out) {
    if (num_groups < 1 || rank < 1 || d_out < 1) {
        throw Error("count_adapter_params: all dimensions must be >= 1");
    }
    return num_groups * rank + rank * d_out;
}

} // namespace qalora
