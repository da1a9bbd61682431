#include "qalora/tasks.hpp"

#include <cmath>
#include <utility>
#include <vector>

#include "qalora/rng.hpp"

namespace qalora::tasks {

namespace {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    std::vector<double> data(rows * cols);
    for (double& v : data) {
        v = scale * rng.normal();
    }
    return Matrix(rows, cols, std::move(data));
}

// W + expand(P): rows of P repeat in blocks of group size, so the delta is
// constant within each group of every column.
Matrix add_group_delta(const Matrix& w, const Matrix& pooled_delta, std::size_t group) {
    std::vector<double> out(w.data().begin(), w.data().end());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const std::size_t l = i / group;
        for (std::size_t j = 0; j < w.cols(); ++j) {
            out[i * w.cols() + j] += pooled_delta(l, j);
        }
    }
    return Matrix(w.rows(), w.cols(), std::move(out));
}

// Pooled teacher delta of rank min(delta_rank, num_groups), entries roughly
// N(0, scale^2).
Matrix pooled_delta(Rng& rng, std::size_t num_groups, std::size_t d_out,
                    std::size_t delta_rank, double scale) {
    const std::size_t r = std::min(delta_rank, std::min(num_groups, d_out));
    const Matrix u = random_matrix(rng, num_groups, r, 1.0);
    const Matrix v = random_matrix(rng, r, d_out, 1.0);
    Matrix p = matmul(u, v);
    const double f = scale / std::sqrt(static_cast<double>(r));
    std::vector<double> data(p.data().begin(), p.data().end());
    for (double& x : data) {
        x *= f;
    }
    return Matrix(num_groups, d_out, std::move(data));
}

Dataset sample_regression(Rng& rng, const ToyModel& teacher, std::size_t n,
                          double noise, const std::string& name) {
    const std::size_t d_in = teacher.d_in(), d_out = teacher.d_out();
    std::vector<double> xs(n * d_in), ys(n * d_out);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> x(d_in);
        for (double& v : x) {
            v = rng.normal();
        }
        const Vector y = teacher.forward(Vector(x));
        for (std::size_t k = 0; k < d_in; ++k) {
            xs[i * d_in + k] = x[k];
        }
        for (std::size_t j = 0; j < d_out; ++j) {
            ys[i * d_out + j] = y[j] + noise * rng.normal();
        }
    }
    Dataset data;
    data.inputs = Matrix(n, d_in, std::move(xs));
    data.targets = Matrix(n, d_out, std::move(ys));
    data.name = name;
    return data;
}

ToyModel single_layer_model(Matrix w, LossKind loss) {
    ToyModel m;
    m.layers.push_back({FpLayer{std::move(w), std::nullopt}, Activation::identity});
    m.loss = loss;
    return m;
}

} // namespace

ToyTask make_linear_teacher_task(const LinearTaskParams& params, std::uint64_t seed) {
    if (params.delta_group == 0 || params.d_in % params.delta_group != 0) {
        throw Error("linear task: delta_group must divide d_in");
    }
    Rng rng(seed);
    Matrix w_base = random_matrix(rng, params.d_in, params.d_out, params.base_scale);
    const std::size_t num_groups = params.d_in / params.delta_group;
    Matrix delta = pooled_delta(rng, num_groups, params.d_out, params.delta_rank,
                                params.delta_scale * params.base_scale);
    ToyModel teacher =
        single_layer_model(add_group_delta(w_base, delta, params.delta_group), LossKind::mse);

    ToyTask task;
    task.fp_model = single_layer_model(std::move(w_base), LossKind::mse);
    task.train = sample_regression(rng, teacher, params.n_train, params.noise, "linear-train");
    task.eval = sample_regression(rng, teacher, params.n_eval, params.noise, "linear-eval");
    return task;
}

ToyTask make_mlp_teacher_task(const MlpTaskParams& params, std::uint64_t seed) {
    if (params.delta_group == 0 || params.d_in % params.delta_group != 0 ||
        params.d_hidden % params.delta_group != 0) {
        throw Error("mlp task: delta_group must divide both layer input dims");
    }
    Rng rng(seed);
    const double scale1 = 1.0 / std::sqrt(static_cast<double>(params.d_in));
    const double scale2 = 1.0 / std::sqrt(static_cast<double>(params.d_hidden));
    Matrix w1 = random_matrix(rng, params.d_in, params.d_hidden, scale1);
    Matrix w2 = random_matrix(rng, params.d_hidden, params.d_out, scale2);
    Matrix delta1 = pooled_delta(rng, params.d_in / params.delta_group, params.d_hidden,
                                 params.delta_rank, params.delta_scale * scale1);
    Matrix delta2 = pooled_delta(rng, params.d_hidden / params.delta_group, params.d_out,
                                 params.delta_rank, params.delta_scale * scale2);

    auto build = [&](Matrix a, Matrix b) {
        ToyModel m;
        m.layers.push_back({FpLayer{std::move(a), std::nullopt}, Activation::relu});
        m.layers.push_back({FpLayer{std::move(b), std::nullopt}, Activation::identity});
        m.loss = LossKind::mse;
        return m;
    };
    ToyModel teacher = build(add_group_delta(w1, delta1, params.delta_group),
                             add_group_delta(w2, delta2, params.delta_group));

    ToyTask task;
    task.fp_model = build(std::move(w1), std::move(w2));
    task.train = sample_regression(rng, teacher, params.n_train, params.noise, "mlp-train");
    task.eval = sample_regression(rng, teacher, params.n_eval, params.noise, "mlp-eval");
    return task;
}

ToyTask make_blob_task(const BlobTaskParams& params, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Matrix> centers;
    std::vector<double> centers_flat(params.n_classes * params.d_in);
    for (std::size_t c = 0; c < params.n_classes; ++c) {
        double norm_sq = 0.0;
        std::vector<double> dir(params.d_in);
        for (double& v : dir) {
            v = rng.normal();
            norm_sq += v * v;
        }
        const double f = params.separation / std::sqrt(norm_sq);
        for (std::size_t k = 0; k < params.d_in; ++k) {
            centers_flat[c * params.d_in + k] = f * dir[k];
        }
    }

    auto sample = [&](std::size_t n, const std::string& name) {
        std::vector<double> xs(n * params.d_in);
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = rng.index(params.n_classes);
            labels[i] = static_cast<int>(c);
            for (std::size_t k = 0; k < params.d_in; ++k) {
                xs[i * params.d_in + k] =
                    centers_flat[c * params.d_in + k] + params.spread * rng.normal();
            }
        }
        Dataset data;
        data.inputs = Matrix(n, params.d_in, std::move(xs));
        data.labels = std::move(labels);
        data.name = name;
        return data;
    };

    ToyTask task;
    task.fp_model = single_layer_model(
        random_matrix(rng, params.d_in, params.n_classes, 0.1), LossKind::cross_entropy);
    task.train = sample(params.n_train, "blobs-train");
    task.eval = sample(params.n_eval, "blobs-eval");
    return task;
}

} // namespace qalora::tasks
