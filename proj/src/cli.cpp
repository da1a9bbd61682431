#include "qalora/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qalora/container.hpp"
#include "qalora/rng.hpp"

namespace qalora::cli {

namespace {

// Maps library failures onto the exit-code contract. Commands validate
// their flags before calling into here.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const StateError& e) {
        err << "error: " << e.what() << "\n";
        return kExitState;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

double relative_discrepancy(const Vector& a, const Vector& b) {
    double worst = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double denom = std::max({1.0, std::abs(a[j]), std::abs(b[j])});
        worst = std::max(worst, std::abs(a[j] - b[j]) / denom);
    }
    return worst;
}

} // namespace

int cmd_quantize(const std::filesystem::path& in_model,
                 const std::filesystem::path& out_model, int bits,
                 std::size_t group_size, std::ostream& out, std::ostream& err) {
    if (!valid_bits(bits)) {
        err << "usage: --bits must be one of 2, 3, 4, 8\n";
        return kExitUsage;
    }
    if (group_size < 1) {
        err << "usage: --group-size must be >= 1\n";
        return kExitUsage;
    }
    return guarded(err, [&] {
        ToyModel model = container::load(in_model);
        if (!model.all_fp()) {
            throw StateError("quantize: input model already contains quantized layers");
        }
        if (model.has_adapters()) {
            throw StateError("quantize: input model already carries adapters");
        }
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            if (model.layers[i].d_in() % group_size != 0) {
                err << "usage: --group-size " << group_size << " does not divide layer "
                    << i << " input dim " << model.layers[i].d_in() << "\n";
                return kExitUsage;
            }
        }
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            const Matrix& w = std::get<FpLayer>(model.layers[i].unit).weights;
            QuantizedMatrix q = quantize_groupwise(w, bits, group_size);
            const Matrix back = dequantize(q);
            double max_err = 0.0;
            for (std::size_t r = 0; r < w.rows(); ++r) {
                for (std::size_t c = 0; c < w.cols(); ++c) {
                    max_err = std::max(max_err, std::abs(w(r, c) - back(r, c)));
                }
            }
            out << "layer" << i << ": max round-trip error " << fmt("%.6g", max_err)
                << "\n";
            model.layers[i].unit = QuantLinearLayer(std::move(q));
        }
        container::save(model, out_model);
        out << "wrote " << out_model.string() << "\n";
        return kExitOk;
    });
}

int cmd_train(const std::filesystem::path& model_path,
              const std::filesystem::path& data_path,
              const std::filesystem::path& config_path,
              const std::filesystem::path& out_model, std::ostream& out,
              std::ostream& err) {
    return guarded(err, [&] {
        ToyModel model = container::load(model_path);
        if (!model.all_quant()) {
            throw StateError("train: model must be quantized first (run quantize)");
        }
        if (model.has_adapters()) {
            throw StateError("train: model already carries adapters");
        }
        const Dataset data = load_dataset_jsonl(data_path);
        const RunConfig cfg = load_run_config(config_path);
        // bits/group_size in the config describe the model; reject mismatches.
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            const auto& q = std::get<QuantLinearLayer>(model.layers[i].unit).base;
            if (q.bits() != cfg.train.bits || q.group_size() != cfg.train.group_size) {
                throw FormatError("config bits/group_size (" +
                                  std::to_string(cfg.train.bits) + "/" +
                                  std::to_string(cfg.train.group_size) +
                                  ") do not match layer " + std::to_string(i) + " (" +
                                  std::to_string(q.bits()) + "/" +
                                  std::to_string(q.group_size()) + ")");
            }
        }

        ToyModel with_adapters = init_adapters(model, cfg.train.rank,
                                               cfg.train.resolved_scale(), cfg.train.seed);
        TrainResult result = train_qalora(with_adapters, data, cfg.train);

        container::save(result.model, out_model);
        const std::filesystem::path csv =
            cfg.loss_csv ? *cfg.loss_csv
                         : std::filesystem::path(out_model.string() + ".loss.csv");
        write_loss_csv(result.loss_curve, csv);
        out << "trained " << cfg.train.steps << " steps, final loss "
            << fmt("%.6g", result.loss_curve.empty() ? 0.0 : result.loss_curve.back())
            << "\n";
        out << "wrote " << out_model.string() << " and " << csv.string() << "\n";
        return kExitOk;
    });
}

int cmd_merge(const std::filesystem::path& in_model,
              const std::filesystem::path& out_model, std::ostream& out,
              std::ostream& err) {
    return guarded(err, [&] {
        ToyModel model = container::load(in_model);
        if (!model.has_adapters()) {
            throw StateError("merge: model has no adapters");
        }
        if (!model.all_quant()) {
            throw StateError("merge: model must be fully quantized");
        }
        std::size_t merged_count = 0;
        for (ModelLayer& layer : model.layers) {
            auto& ql = std::get<QuantLinearLayer>(layer.unit);
            if (ql.adapter) {
                layer.unit = QuantLinearLayer(merge(ql));
                ++merged_count;
            }
        }
        container::save(model, out_model);
        out << "merged " << merged_count << " adapter(s) into zero-points\n";
        out << "wrote " << out_model.string() << "\n";
        return kExitOk;
    });
}

int cmd_verify(const std::filesystem::path& adapter_model,
               const std::filesystem::path& merged_model, std::size_t trials,
               double tol, std::uint64_t seed, std::ostream& out, std::ostream& err) {
    if (trials < 1) {
        err << "usage: --trials must be >= 1\n";
        return kExitUsage;
    }
    if (!(tol > 0.0)) {
        err << "usage: --tol must be > 0\n";
        return kExitUsage;
    }
    return guarded(err, [&] {
        const ToyModel a = container::load(adapter_model);
        const ToyModel b = container::load(merged_model);
        if (a.layers.size() != b.layers.size()) {
            throw FormatError("verify: models have different layer counts");
        }
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            if (a.layers[i].d_in() != b.layers[i].d_in() ||
                a.layers[i].d_out() != b.layers[i].d_out() ||
                a.layers[i].activation != b.layers[i].activation) {
                throw FormatError("verify: architectures differ at layer " +
                                  std::to_string(i));
            }
        }
        if (!a.has_adapters()) {
            throw StateError("verify: first model carries no adapters");
        }
        if (b.has_adapters()) {
            throw StateError("verify: second model still carries adapters");
        }

        Rng rng(seed);
        double worst = 0.0;
        std::size_t worst_trial = 0;
        for (std::size_t t = 0; t < trials; ++t) {
            std::vector<double> x(a.d_in());
            for (double& v : x) {
                v = rng.normal();
            }
            const Vector input(std::move(x));
            const double d = relative_discrepancy(a.forward(input), b.forward(input));
            if (d > worst) {
                worst = d;
                worst_trial = t;
            }
        }
        out << "max relative discrepancy " << fmt("%.3e", worst) << " over " << trials
            << " trials (tol " << fmt("%.3e", tol) << ")\n";
        if (worst <= tol) {
            out << "verify: OK\n";
            return kExitOk;
        }
        err << "verify: FAILED at trial " << worst_trial << " (seed " << seed << ")\n";
        return kExitVerifyFail;
    });
}

int cmd_eval(const std::filesystem::path& model_path,
             const std::filesystem::path& data_path, std::ostream& out,
             std::ostream& err) {
    return guarded(err, [&] {
        const ToyModel model = container::load(model_path);
        const Dataset data = load_dataset_jsonl(data_path);
        const Metrics m = evaluate(model, data);
        nlohmann::ordered_json j;
        j["loss"] = m.loss;
        if (m.accuracy) {
            j["accuracy"] = *m.accuracy;
        }
        out << j.dump() << "\n";
        return kExitOk;
    });
}

int cmd_bench(const BenchOptions& opt, std::ostream& out, std::ostream& err) {
    if (opt.d_in < 1 || opt.d_out < 1 || opt.rank < 1 || opt.iters < 1) {
        err << "usage: dims, rank and iters must be >= 1\n";
        return kExitUsage;
    }
    if (!valid_bits(opt.bits)) {
        err << "usage: --bits must be one of 2, 3, 4, 8\n";
        return kExitUsage;
    }
    if (opt.group_size < 1 || opt.d_in % opt.group_size != 0) {
        err << "usage: --group-size must divide --d-in\n";
        return kExitUsage;
    }
    return guarded(err, [&] {
        Rng rng(424242);
        std::vector<double> wdata(opt.d_in * opt.d_out);
        for (double& v : wdata) {
            v = rng.normal();
        }
        const Matrix w(opt.d_in, opt.d_out, std::move(wdata));
        const QuantLinearLayer qlayer(quantize_groupwise(w, opt.bits, opt.group_size));
        std::vector<double> xdata(opt.d_in);
        for (double& v : xdata) {
            v = rng.normal();
        }
        const Vector x(std::move(xdata));

        auto median_ns = [&](auto&& fn) {
            double sink = 0.0;
            for (int warm = 0; warm < 3; ++warm) {
                sink += fn();
            }
            std::vector<long long> ns(opt.iters);
            for (std::size_t i = 0; i < opt.iters; ++i) {
                const auto t0 = std::chrono::steady_clock::now();
                sink += fn();
                const auto t1 = std::chrono::steady_clock::now();
                ns[i] = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
            }
            std::sort(ns.begin(), ns.end());
            // keep the accumulated outputs observable so the loops survive
            // optimization
            if (!std::isfinite(sink)) {
                throw Error("bench: non-finite forward output");
            }
            return ns[ns.size() / 2];
        };

        const long long quant_ns = median_ns([&] { return qalora_forward(qlayer, x)[0]; });
        const long long fp_ns = median_ns([&] {
            double acc = 0.0;
            for (std::size_t i = 0; i < w.rows(); ++i) {
                acc += w(i, 0) * x[i];
            }
            std::vector<double> y(w.cols(), 0.0);
            for (std::size_t i = 0; i < w.rows(); ++i) {
                const double xi = x[i];
                for (std::size_t j = 0; j < w.cols(); ++j) {
                    y[j] += w(i, j) * xi;
                }
            }
            return y[0] + acc;
        });

        const std::size_t quant_bytes =
            container::quant_tensor_bytes(opt.d_in, opt.d_out, opt.bits, opt.group_size);
        const std::size_t fp_bytes = container::fp_tensor_bytes(opt.d_in, opt.d_out);
        const std::size_t num_groups = opt.d_in / opt.group_size;
        const std::size_t pooled_params =
            count_adapter_params(num_groups, opt.rank, opt.d_out);
        const std::size_t full_params = opt.d_in * opt.rank + opt.rank * opt.d_out;

        out << "forward " << opt.d_in << "x" << opt.d_out << ", bits " << opt.bits
            << ", group size " << opt.group_size << ", " << opt.iters << " iters\n";
        out << "quant forward median ns: " << quant_ns << "\n";
        out << "fp forward median ns: " << fp_ns << "\n";
        out << "quant storage bytes: " << quant_bytes << "\n";
        out << "fp storage bytes: " << fp_bytes << "\n";
        out << "storage ratio: "
            << fmt("%.6g", static_cast<double>(quant_bytes) / static_cast<double>(fp_bytes))
            << "\n";
        out << "adapter params pooled: " << pooled_params << "\n";
        out << "adapter params full lora: " << full_params << "\n";
        return kExitOk;
    });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"group-wise quantization with mergeable low-rank adapters"};
    app.require_subcommand(1);

    std::string in_path, out_path, data_path, config_path, second_path;
    int bits = 4;
    std::size_t group_size = 32;
    std::size_t trials = 1000;
    double tol = 1e-8;
    std::uint64_t seed = 1234;
    BenchOptions bench;

    auto* quantize = app.add_subcommand("quantize", "quantize an FP model's weights");
    quantize->add_option("input", in_path, "input FP model")->required();
    quantize->add_option("output", out_path, "output quantized model")->required();
    quantize->add_option("--bits", bits, "bit width (2, 3, 4 or 8)");
    quantize->add_option("--group-size", group_size, "rows per quantization group");

    auto* train = app.add_subcommand("train", "train adapters on a quantized model");
    train->add_option("model", in_path, "quantized input model")->required();
    train->add_option("data", data_path, "JSONL training data")->required();
    train->add_option("config", config_path, "key=value run config")->required();
    train->add_option("output", out_path, "output model with adapters")->required();

    auto* merge = app.add_subcommand("merge", "fold adapters into zero-points");
    merge->add_option("input", in_path, "model with adapters")->required();
    merge->add_option("output", out_path, "merged model")->required();

    auto* verify = app.add_subcommand("verify", "check merged == unmerged forwards");
    verify->add_option("adapters", in_path, "model with adapters")->required();
    verify->add_option("merged", second_path, "merged model")->required();
    verify->add_option("--trials", trials, "number of random inputs");
    verify->add_option("--tol", tol, "max allowed relative discrepancy");
    verify->add_option("--seed", seed, "input generator seed");

    auto* eval = app.add_subcommand("eval", "evaluate a model on a dataset");
    eval->add_option("model", in_path, "model file")->required();
    eval->add_option("data", data_path, "JSONL dataset")->required();

    auto* bench_cmd = app.add_subcommand("bench", "packed vs FP forward micro-benchmark");
    bench_cmd->add_option("--d-in", bench.d_in, "input dimension");
    bench_cmd->add_option("--d-out", bench.d_out, "output dimension");
    bench_cmd->add_option("--bits", bench.bits, "bit width");
    bench_cmd->add_option("--group-size", bench.group_size, "rows per group");
    bench_cmd->add_option("--rank", bench.rank, "adapter rank for the param count");
    bench_cmd->add_option("--iters", bench.iters, "timing iterations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    }

    if (quantize->parsed()) {
        return cmd_quantize(in_path, out_path, bits, group_size, out, err);
    }
    if (train->parsed()) {
        return cmd_train(in_path, data_path, config_path, out_path, out, err);
    }
    if (merge->parsed()) {
        return cmd_merge(in_path, out_path, out, err);
    }
    if (verify->parsed()) {
        return cmd_verify(in_path, second_path, trials, tol, seed, out, err);
    }
    if (eval->parsed()) {
        return cmd_eval(in_path, data_path, out, err);
    }
    if (bench_cmd->parsed()) {
        return cmd_bench(bench, out, err);
    }
    err << "usage error: no command given\n";
    return kExitUsage;
}

} // namespace qalora::cli
