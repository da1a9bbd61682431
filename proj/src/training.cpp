#include "qalora/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "qalora/rng.hpp"

namespace qalora {

namespace {

using nlohmann::json;

Vector dense_forward(const Matrix& w, const Vector& x) {
    std::vector<double> y(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double xi = x[i];
        for (std::size_t j = 0; j < w.cols(); ++j) {
            y[j] += w(i, j) * xi;
        }
    }
    return Vector(std::move(y));
}

Vector layer_forward(const ModelLayer& layer, const Vector& x) {
    if (layer.is_quant()) {
        return qalora_forward(std::get<QuantLinearLayer>(layer.unit), x);
    }
    const FpLayer& fp = std::get<FpLayer>(layer.unit);
    if (fp.adapter) {
        return lora_forward(fp.weights, fp.adapter->a, fp.adapter->b, fp.adapter->s, x);
    }
    if (x.size() != fp.weights.rows()) {
        throw Error("forward: input length " + std::to_string(x.size()) +
                    ", layer expects " + std::to_string(fp.weights.rows()));
    }
    return dense_forward(fp.weights, x);
}

Vector apply_activation(const Vector& v, Activation act) {
    if (act == Activation::identity) {
        return v;
    }
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] > 0.0 ? v[i] : 0.0;
    }
    return Vector(std::move(out));
}

struct LayerCache {
    Vector input;
    Vector preact;
};

Vector forward_cached(const ToyModel& model, const Vector& x,
                      std::vector<LayerCache>& caches) {
    caches.clear();
    caches.reserve(model.layers.size());
    Vector h = x;
    for (const ModelLayer& layer : model.layers) {
        Vector pre = layer_forward(layer, h);
        caches.push_back({std::move(h), pre});
        h = apply_activation(pre, layer.activation);
    }
    return h;
}

// Mean squared error over output dims; grad = 2 (y - t) / d.
double mse_loss_grad(const Vector& y, std::span<const double> target,
                     std::vector<double>* grad) {
    const double inv_d = 1.0 / static_cast<double>(y.size());
    double loss = 0.0;
    if (grad) {
        grad->resize(y.size());
    }
    for (std::size_t j = 0; j < y.size(); ++j) {
        const double diff = y[j] - target[j];
        loss += diff * diff;
        if (grad) {
            (*grad)[j] = 2.0 * diff * inv_d;
        }
    }
    return loss * inv_d;
}

// Softmax cross-entropy; grad = softmax(y) - onehot(label).
double ce_loss_grad(const Vector& y, int label, std::vector<double>* grad) {
    const double max_y = *std::max_element(y.begin(), y.end());
    double denom = 0.0;
    for (double v : y) {
        denom += std::exp(v - max_y);
    }
    const double log_denom = std::log(denom);
    if (grad) {
        grad->resize(y.size());
        for (std::size_t j = 0; j < y.size(); ++j) {
            (*grad)[j] = std::exp(y[j] - max_y) / denom;
        }
        (*grad)[static_cast<std::size_t>(label)] -= 1.0;
    }
    return log_denom - (y[static_cast<std::size_t>(label)] - max_y);
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h = (h ^ p[i]) * kFnvPrime;
    }
}

std::uint64_t quant_base_hash(const QuantizedMatrix& q) {
    std::uint64_t h = kFnvOffset;
    fnv_bytes(h, q.packed().data(), q.packed().size());
    fnv_bytes(h, q.scales().data().data(), q.scales().data().size() * sizeof(double));
    fnv_bytes(h, q.zeros().data().data(), q.zeros().data().size() * sizeof(double));
    return h;
}

void check_dataset_model(const ToyModel& model, const Dataset& data) {
    if (data.inputs.cols() != model.d_in()) {
        throw Error("dataset input dim " + std::to_string(data.inputs.cols()) +
                    " does not match model d_in " + std::to_string(model.d_in()));
    }
    if (data.targets) {
        if (model.loss != LossKind::mse) {
            throw Error("regression targets require an mse-loss model");
        }
        if (data.targets->cols() != model.d_out()) {
            throw Error("dataset target dim " + std::to_string(data.targets->cols()) +
                        " does not match model d_out " + std::to_string(model.d_out()));
        }
    } else {
        if (model.loss != LossKind::cross_entropy) {
            throw Error("labeled data requires a cross-entropy model");
        }
        for (int lab : *data.labels) {
            if (lab < 0 || static_cast<std::size_t>(lab) >= model.d_out()) {
                throw Error("label " + std::to_string(lab) + " out of range for d_out " +
                            std::to_string(model.d_out()));
            }
        }
    }
}

} // namespace

std::size_t ModelLayer::d_in() const {
    return is_quant() ? std::get<QuantLinearLayer>(unit).base.d_in()
                      : std::get<FpLayer>(unit).weights.rows();
}

std::size_t ModelLayer::d_out() const {
    return is_quant() ? std::get<QuantLinearLayer>(unit).base.d_out()
                      : std::get<FpLayer>(unit).weights.cols();
}

const std::optional<AdapterPair>& ModelLayer::adapter() const {
    return is_quant() ? std::get<QuantLinearLayer>(unit).adapter
                      : std::get<FpLayer>(unit).adapter;
}

std::optional<AdapterPair>& ModelLayer::adapter() {
    return is_quant() ? std::get<QuantLinearLayer>(unit).adapter
                      : std::get<FpLayer>(unit).adapter;
}

void ToyModel::validate() const {
    if (layers.empty()) {
        throw Error("ToyModel: no layers");
    }
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
        if (layers[i].d_out() != layers[i + 1].d_in()) {
            throw Error("ToyModel: layer " + std::to_string(i) + " outputs " +
                        std::to_string(layers[i].d_out()) + ", layer " +
                        std::to_string(i + 1) + " expects " +
                        std::to_string(layers[i + 1].d_in()));
        }
    }
}

bool ToyModel::all_quant() const {
    return std::all_of(layers.begin(), layers.end(),
                       [](const ModelLayer& l) { return l.is_quant(); });
}

bool ToyModel::all_fp() const {
    return std::none_of(layers.begin(), layers.end(),
                        [](const ModelLayer& l) { return l.is_quant(); });
}

bool ToyModel::has_adapters() const {
    return std::any_of(layers.begin(), layers.end(),
                       [](const ModelLayer& l) { return l.adapter().has_value(); });
}

Vector ToyModel::forward(const Vector& x) const {
    Vector h = x;
    for (const ModelLayer& layer : layers) {
        h = apply_activation(layer_forward(layer, h), layer.activation);
    }
    return h;
}

void TrainConfig::validate() const {
    if (batch_size < 1) {
        throw Error("TrainConfig: batch_size must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw Error("TrainConfig: learning_rate must be positive");
    }
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
        throw Error("TrainConfig: adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) {
        throw Error("TrainConfig: adam_eps must be positive");
    }
    if (rank < 1) {
        throw Error("TrainConfig: rank must be >= 1");
    }
    if (!valid_bits(bits)) {
        throw Error("TrainConfig: bits must be one of {2,3,4,8}");
    }
    if (group_size < 1) {
        throw Error("TrainConfig: group_size must be >= 1");
    }
    if (!(max_grad_norm > 0.0)) {
        throw Error("TrainConfig: max_grad_norm must be positive");
    }
}

void Dataset::validate() const {
    if (inputs.rows() == 0) {
        throw Error("Dataset: no rows");
    }
    if (targets.has_value() == labels.has_value()) {
        throw Error("Dataset: need exactly one of targets or labels");
    }
    if (targets && targets->rows() != inputs.rows()) {
        throw Error("Dataset: target rows " + std::to_string(targets->rows()) +
                    " != input rows " + std::to_string(inputs.rows()));
    }
    if (labels && labels->size() != inputs.rows()) {
        throw Error("Dataset: label count " + std::to_string(labels->size()) +
                    " != input rows " + std::to_string(inputs.rows()));
    }
}

Dataset load_dataset_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open dataset file " + path.string());
    }
    std::vector<double> inputs;
    std::vector<double> targets;
    std::vector<int> labels;
    std::size_t n_rows = 0, d_in = 0, d_target = 0;
    bool labeled = false;

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = path.filename().string() + ":" + std::to_string(lineno);
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(where + ": invalid JSON: " + e.what());
        }
        if (!row.is_object() || !row.contains("input") || !row["input"].is_array()) {
            throw FormatError(where + ": row must be an object with an \"input\" array");
        }
        std::vector<double> x;
        try {
            x = row["input"].get<std::vector<double>>();
        } catch (const json::exception&) {
            throw FormatError(where + ": \"input\" must contain numbers");
        }
        const bool has_target = row.contains("target");
        const bool has_label = row.contains("label");
        if (has_target == has_label) {
            throw FormatError(where + ": row needs exactly one of \"target\" or \"label\"");
        }
        if (n_rows == 0) {
            d_in = x.size();
            labeled = has_label;
        }
        if (x.size() != d_in || d_in == 0) {
            throw FormatError(where + ": input length " + std::to_string(x.size()) +
                              " inconsistent with first row (" + std::to_string(d_in) + ")");
        }
        if (has_label != labeled) {
            throw FormatError(where + ": rows mix \"target\" and \"label\"");
        }
        if (labeled) {
            if (!row["label"].is_number_integer()) {
                throw FormatError(where + ": \"label\" must be an integer");
            }
            labels.push_back(row["label"].get<int>());
        } else {
            if (!row["target"].is_array()) {
                throw FormatError(where + ": \"target\" must be an array");
            }
            std::vector<double> t;
            try {
                t = row["target"].get<std::vector<double>>();
            } catch (const json::exception&) {
                throw FormatError(where + ": \"target\" must contain numbers");
            }
            if (n_rows == 0) {
                d_target = t.size();
            }
            if (t.size() != d_target || d_target == 0) {
                throw FormatError(where + ": target length inconsistent with first row");
            }
            targets.insert(targets.end(), t.begin(), t.end());
        }
        inputs.insert(inputs.end(), x.begin(), x.end());
        ++n_rows;
    }
    if (n_rows == 0) {
        throw FormatError("dataset file " + path.string() + " has no rows");
    }
    Dataset data;
    try {
        data.inputs = Matrix(n_rows, d_in, std::move(inputs));
        if (labeled) {
            data.labels = std::move(labels);
        } else {
            data.targets = Matrix(n_rows, d_target, std::move(targets));
        }
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    data.name = path.stem().string();
    data.validate();
    return data;
}

void save_dataset_jsonl(const Dataset& data, const std::filesystem::path& path) {
    data.validate();
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot write dataset file " + path.string());
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        json row;
        row["input"] = std::vector<double>(data.inputs.row(i).begin(),
                                           data.inputs.row(i).end());
        if (data.labels) {
            row["label"] = (*data.labels)[i];
        } else {
            row["target"] = std::vector<double>(data.targets->row(i).begin(),
                                                data.targets->row(i).end());
        }
        out << row.dump() << '\n';
    }
}

void write_loss_csv(const std::vector<double>& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot write loss csv " + path.string());
    }
    out << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, curve[i]);
        out << buf;
    }
}

Metrics evaluate(const ToyModel& model, const Dataset& data) {
    model.validate();
    data.validate();
    check_dataset_model(model, data);

    double total = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vector y = model.forward(
            Vector(std::vector<double>(data.inputs.row(i).begin(), data.inputs.row(i).end())));
        if (data.labels) {
            const int label = (*data.labels)[i];
            total += ce_loss_grad(y, label, nullptr);
            const auto arg =
                std::max_element(y.begin(), y.end()) - y.begin();
            if (arg == label) {
                ++correct;
            }
        } else {
            total += mse_loss_grad(y, data.targets->row(i), nullptr);
        }
    }
    Metrics m;
    m.loss = total / static_cast<double>(data.size());
    if (data.labels) {
        m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    }
    return m;
}

ToyModel init_adapters(const ToyModel& model, std::size_t rank, double scale,
                       std::uint64_t seed) {
    model.validate();
    if (rank < 1) {
        throw Error("init_adapters: rank must be >= 1");
    }
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        if (rank > std::min(l.d_in(), l.d_out())) {
            throw Error("init_adapters: rank " + std::to_string(rank) +
                        " exceeds layer " + std::to_string(i) + " dimensions " +
                        std::to_string(l.d_in()) + "x" + std::to_string(l.d_out()));
        }
    }
    Rng rng(seed);
    ToyModel out = model;
    for (ModelLayer& layer : out.layers) {
        const std::size_t n_groups = layer.pool_groups();
        const double bound = 1.0 / std::sqrt(static_cast<double>(n_groups));
        std::vector<double> a(n_groups * rank);
        for (double& v : a) {
            v = rng.uniform(-bound, bound);
        }
        AdapterPair adapter(Matrix(n_groups, rank, std::move(a)),
                            Matrix(rank, layer.d_out()), scale);
        layer.adapter() = std::move(adapter);
    }
    return out;
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size()) {
        throw Error("sgd_step: parameter/gradient size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= lr * grads[i];
    }
}

void adam_step(AdamState& state, std::size_t t, std::span<double> params,
               std::span<const double> grads, const AdamConfig& cfg) {
    if (params.size() != grads.size()) {
        throw Error("adam_step: parameter/gradient size mismatch");
    }
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) {
        throw Error("adam_step: state size mismatch");
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

double clip_global_norm(std::vector<std::span<double>> grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (double v : g) {
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double factor = max_norm / norm;
        for (auto& g : grads) {
            for (double& v : g) {
                v *= factor;
            }
        }
    }
    return norm;
}

TrainResult train_adapters(const ToyModel& model, const Dataset& data,
                           const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    data.validate();
    check_dataset_model(model, data);
    if (!model.has_adapters()) {
        throw StateError("train_adapters: model has no adapters attached");
    }

    ToyModel work = model;

    // Flat trainable copies of each adapter, updated in place each step.
    struct Slot {
        std::size_t layer;
        std::size_t n_groups, rank, d_out;
        double s;
        std::vector<double> a, b;
        std::vector<double> ga, gb;
        AdamState adam_a, adam_b;
    };
    std::vector<Slot> slots;
    for (std::size_t i = 0; i < work.layers.size(); ++i) {
        const auto& ad = work.layers[i].adapter();
        if (!ad) {
            continue;
        }
        Slot s;
        s.layer = i;
        s.n_groups = ad->a.rows();
        s.rank = ad->rank();
        s.d_out = ad->d_out();
        s.s = ad->s;
        s.a.assign(ad->a.data().begin(), ad->a.data().end());
        s.b.assign(ad->b.data().begin(), ad->b.data().end());
        s.ga.resize(s.a.size());
        s.gb.resize(s.b.size());
        slots.push_back(std::move(s));
    }

    // Frozen-base contract: quantized payloads must be bit-identical across
    // the whole run, checked every step.
    std::vector<std::pair<std::size_t, std::uint64_t>> base_hashes;
    for (std::size_t i = 0; i < work.layers.size(); ++i) {
        if (work.layers[i].is_quant()) {
            base_hashes.emplace_back(
                i, quant_base_hash(std::get<QuantLinearLayer>(work.layers[i].unit).base));
        }
    }

    Rng batch_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    const AdamConfig adam_cfg{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                              cfg.adam_eps};
    std::vector<double> curve;
    curve.reserve(cfg.steps);

    std::vector<LayerCache> caches;
    std::vector<double> grad_buf;
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (Slot& s : slots) {
            std::fill(s.ga.begin(), s.ga.end(), 0.0);
            std::fill(s.gb.begin(), s.gb.end(), 0.0);
        }
        double batch_loss = 0.0;

        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t row = batch_rng.index(data.size());
            const Vector x(std::vector<double>(data.inputs.row(row).begin(),
                                               data.inputs.row(row).end()));
            const Vector y = forward_cached(work, x, caches);
            if (data.labels) {
                batch_loss += ce_loss_grad(y, (*data.labels)[row], &grad_buf);
            } else {
                batch_loss += mse_loss_grad(y, data.targets->row(row), &grad_buf);
            }

            Vector g(grad_buf);
            auto slot_it = slots.rbegin();
            for (std::size_t li = work.layers.size(); li-- > 0;) {
                ModelLayer& layer = work.layers[li];
                if (layer.activation == Activation::relu) {
                    std::vector<double> masked(g.size());
                    for (std::size_t j = 0; j < g.size(); ++j) {
                        masked[j] = caches[li].preact[j] > 0.0 ? g[j] : 0.0;
                    }
                    g = Vector(std::move(masked));
                }
                if (layer.adapter()) {
                    while (slot_it != slots.rend() && slot_it->layer != li) {
                        ++slot_it;
                    }
                    Slot& s = *slot_it;
                    const Vector u = group_sum_pool(caches[li].input, layer.pool_group());
                    const AdapterGrads ag = pooled_adapter_grads(*layer.adapter(), u, g);
                    for (std::size_t k = 0; k < s.ga.size(); ++k) {
                        s.ga[k] += ag.a.data()[k];
                    }
                    for (std::size_t k = 0; k < s.gb.size(); ++k) {
                        s.gb[k] += ag.b.data()[k];
                    }
                }
                if (li == 0) {
                    break;
                }
                if (layer.is_quant()) {
                    g = qalora_input_gradient(std::get<QuantLinearLayer>(layer.unit), g);
                } else {
                    const FpLayer& fp = std::get<FpLayer>(layer.unit);
                    std::vector<double> gx(fp.weights.rows(), 0.0);
                    for (std::size_t i = 0; i < fp.weights.rows(); ++i) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < fp.weights.cols(); ++j) {
                            acc += fp.weights(i, j) * g[j];
                        }
                        gx[i] = acc;
                    }
                    if (fp.adapter) {
                        const Vector ad_gx =
                            pooled_adapter_input_gradient(*fp.adapter, g, 1);
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += ad_gx[i];
                        }
                    }
                    g = Vector(std::move(gx));
                }
            }
        }

        batch_loss *= inv_batch;
        curve.push_back(batch_loss);
        if (!std::isfinite(batch_loss)) {
            throw DivergenceError("training diverged: non-finite loss at step " +
                                      std::to_string(step),
                                  step);
        }

        std::vector<std::span<double>> grad_views;
        grad_views.reserve(slots.size() * 2);
        for (Slot& s : slots) {
            for (double& v : s.ga) {
                v *= inv_batch;
            }
            for (double& v : s.gb) {
                v *= inv_batch;
            }
            for (double v : s.ga) {
                if (!std::isfinite(v)) {
                    throw Error("non-finite gradient for adapter A of layer " +
                                std::to_string(s.layer) + " at step " +
                                std::to_string(step));
                }
            }
            for (double v : s.gb) {
                if (!std::isfinite(v)) {
                    throw Error("non-finite gradient for adapter B of layer " +
                                std::to_string(s.layer) + " at step " +
                                std::to_string(step));
                }
            }
            grad_views.emplace_back(s.ga);
            grad_views.emplace_back(s.gb);
        }
        clip_global_norm(std::move(grad_views), cfg.max_grad_norm);

        for (Slot& s : slots) {
            if (cfg.optimizer == Optimizer::sgd) {
                sgd_step(s.a, s.ga, cfg.learning_rate);
                sgd_step(s.b, s.gb, cfg.learning_rate);
            } else {
                adam_step(s.adam_a, step, s.a, s.ga, adam_cfg);
                adam_step(s.adam_b, step, s.b, s.gb, adam_cfg);
            }
            try {
                work.layers[s.layer].adapter() =
                    AdapterPair(Matrix(s.n_groups, s.rank, s.a),
                                Matrix(s.rank, s.d_out, s.b), s.s);
            } catch (const Error&) {
                throw DivergenceError("training diverged: non-finite parameters at step " +
                                          std::to_string(step),
                                      step);
            }
        }

        for (const auto& [li, h] : base_hashes) {
            if (quant_base_hash(std::get<QuantLinearLayer>(work.layers[li].unit).base) != h) {
                throw Error("frozen-base contract violated in layer " + std::to_string(li));
            }
        }
    }
    return {std::move(work), std::move(curve)};
}

TrainResult train_qalora(const ToyModel& model, const Dataset& data,
                         const TrainConfig& cfg) {
    if (!model.all_quant()) {
        throw StateError("train_qalora: all base layers must be quantized first");
    }
    return train_adapters(model, data, cfg);
}

QaloraPipelineResult pipeline_qalora(const ToyModel& fp_model, const Dataset& data,
                                     const TrainConfig& cfg) {
    cfg.validate();
    fp_model.validate();
    if (!fp_model.all_fp()) {
        throw StateError("pipeline_qalora: expects a full-precision model");
    }
    ToyModel qmodel = fp_model;
    for (ModelLayer& layer : qmodel.layers) {
        const FpLayer& fp = std::get<FpLayer>(layer.unit);
        layer.unit = QuantLinearLayer(
            quantize_groupwise(fp.weights, cfg.bits, cfg.group_size));
    }
    qmodel = init_adapters(qmodel, cfg.rank, cfg.resolved_scale(), cfg.seed);
    TrainResult tr = train_qalora(qmodel, data, cfg);

    ToyModel merged = tr.model;
    for (ModelLayer& layer : merged.layers) {
        auto& ql = std::get<QuantLinearLayer>(layer.unit);
        layer.unit = QuantLinearLayer(merge(ql));
    }
    return {std::move(tr.model), std::move(merged), std::move(tr.loss_curve)};
}

LoraPtqPipelineResult pipeline_lora_ptq(const ToyModel& fp_model, const Dataset& data,
                                        const TrainConfig& cfg) {
    cfg.validate();
    fp_model.validate();
    if (!fp_model.all_fp()) {
        throw StateError("pipeline_lora_ptq: expects a full-precision model");
    }
    ToyModel with_adapters = init_adapters(fp_model, cfg.rank, cfg.resolved_scale(),
                                           cfg.seed);
    TrainResult tr = train_adapters(with_adapters, data, cfg);

    ToyModel fp_merged = tr.model;
    for (ModelLayer& layer : fp_merged.layers) {
        FpLayer& fp = std::get<FpLayer>(layer.unit);
        const AdapterPair& ad = *fp.adapter;
        fp.weights = lora_merge(fp.weights, ad.a, ad.b, ad.s);
        fp.adapter.reset();
    }

    ToyModel quantized = fp_merged;
    for (ModelLayer& layer : quantized.layers) {
        const FpLayer& fp = std::get<FpLayer>(layer.unit);
        layer.unit = QuantLinearLayer(
            rtn_requantize(fp.weights, cfg.bits, cfg.group_size));
    }
    return {std::move(tr.model), std::move(fp_merged), std::move(quantized),
            std::move(tr.loss_curve)};
}

} // namespace qalora
