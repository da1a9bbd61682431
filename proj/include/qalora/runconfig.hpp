#pragma once

#include <filesystem>
#include <optional>

#include "qalora/training.hpp"

namespace qalora {

// Plain key=value training configuration file. Blank lines and lines
// starting with '#' are ignored; unknown keys are rejected. Recognized keys
// mirror TrainConfig (steps, batch_size, learning_rate, optimizer,
// adam_beta1, adam_beta2, adam_eps, rank, scale, bits, group_size, seed,
// max_grad_norm) plus the output path loss_csv.
struct RunConfig {
    TrainConfig train;
    std::optional<std::filesystem::path> loss_csv;
};

RunConfig load_run_config(const std::filesystem::path& path);

} // namespace qalora
