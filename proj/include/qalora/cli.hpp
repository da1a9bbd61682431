#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "qalora/runconfig.hpp"

namespace qalora::cli {

// Exit-code contract, shared by every command.
inline constexpr int kExitOk = 0;          // success
inline constexpr int kExitVerifyFail = 1;  // verification found a discrepancy
inline constexpr int kExitUsage = 2;       // bad flags or flag/model mismatch
inline constexpr int kExitFormat = 3;      // malformed input file
inline constexpr int kExitDivergence = 4;  // training diverged
inline constexpr int kExitState = 5;       // model in the wrong state for the command
inline constexpr int kExitInternal = 6;    // unexpected failure

int cmd_quantize(const std::filesystem::path& in_model,
                 const std::filesystem::path& out_model, int bits,
                 std::size_t group_size, std::ostream& out, std::ostream& err);

int cmd_train(const std::filesystem::path& model_path,
              const std::filesystem::path& data_path,
              const std::filesystem::path& config_path,
              const std::filesystem::path& out_model, std::ostream& out,
              std::ostream& err);

int cmd_merge(const std::filesystem::path& in_model,
              const std::filesystem::path& out_model, std::ostream& out,
              std::ostream& err);

int cmd_verify(const std::filesystem::path& adapter_model,
               const std::filesystem::path& merged_model, std::size_t trials,
               double tol, std::uint64_t seed, std::ostream& out, std::ostream& err);

int cmd_eval(const std::filesystem::path& model_path,
             const std::filesystem::path& data_path, std::ostream& out,
             std::ostream& err);

struct BenchOptions {
    std::size_t d_in = 512;
    std::size_t d_out = 512;
    int bits = 4;
    std::size_t group_size = 32;
    std::size_t rank = 16;
    std::size_t iters = 100;
};

int cmd_bench(const BenchOptions& opt, std::ostream& out, std::ostream& err);

// Full argv dispatcher used by the qalora binary.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace qalora::cli
