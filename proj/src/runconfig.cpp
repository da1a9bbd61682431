#include "qalora/runconfig.hpp"

#include <fstream>
#include <string>

namespace qalora {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return "";
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

double parse_real(const std::string& v, const std::string& where) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw FormatError(where + ": expected a number, got \"" + v + "\"");
    }
    if (used != v.size()) {
        throw FormatError(where + ": trailing characters in \"" + v + "\"");
    }
    return out;
}

std::uint64_t parse_uint(const std::string& v, const std::string& where) {
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw FormatError(where + ": expected a non-negative integer, got \"" + v + "\"");
    }
    if (used != v.size() || v[0] == '-') {
        throw FormatError(where + ": expected a non-negative integer, got \"" + v + "\"");
    }
    return out;
}

} // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open config file " + path.string());
    }
    RunConfig cfg;
    bool have_steps = false, have_rank = false;

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#') {
            continue;
        }
        const std::string where = path.filename().string() + ":" + std::to_string(lineno);
        const auto eq = text.find('=');
        if (eq == std::string::npos) {
            throw FormatError(where + ": expected key=value");
        }
        const std::string key = trim(text.substr(0, eq));
        const std::string value = trim(text.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw FormatError(where + ": empty key or value");
        }

        if (key == "steps") {
            cfg.train.steps = parse_uint(value, where);
            have_steps = true;
        } else if (key == "batch_size") {
            cfg.train.batch_size = parse_uint(value, where);
        } else if (key == "learning_rate") {
            cfg.train.learning_rate = parse_real(value, where);
        } else if (key == "optimizer") {
            if (value == "sgd") {
                cfg.train.optimizer = Optimizer::sgd;
            } else if (value == "adam") {
                cfg.train.optimizer = Optimizer::adam;
            } else {
                throw FormatError(where + ": optimizer must be sgd or adam");
            }
        } else if (key == "adam_beta1") {
            cfg.train.adam_beta1 = parse_real(value, where);
        } else if (key == "adam_beta2") {
            cfg.train.adam_beta2 = parse_real(value, where);
        } else if (key == "adam_eps") {
            cfg.train.adam_eps = parse_real(value, where);
        } else if (key == "rank") {
            cfg.train.rank = parse_uint(value, where);
            have_rank = true;
        } else if (key == "scale") {
            cfg.train.scale = parse_real(value, where);
        } else if (key == "bits") {
            cfg.train.bits = static_cast<int>(parse_uint(value, where));
        } else if (key == "group_size") {
            cfg.train.group_size = parse_uint(value, where);
        } else if (key == "seed") {
            cfg.train.seed = parse_uint(value, where);
        } else if (key == "max_grad_norm") {
            cfg.train.max_grad_norm = parse_real(value, where);
        } else if (key == "loss_csv") {
            cfg.loss_csv = value;
        } else {
            throw FormatError(where + ": unknown key \"" + key + "\"");
        }
    }

    if (!have_steps) {
        throw FormatError(path.string() + ": missing required key steps");
    }
    if (!have_rank) {
        throw FormatError(path.string() + ": missing required key rank");
    }
    if (cfg.train.steps < 1) {
        throw FormatError(path.string() + ": steps must be >= 1");
    }
    try {
        cfg.train.validate();
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return cfg;
}

} // namespace qalora
