#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qalora {

// Base class for all library failures.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input files: model containers, JSONL datasets, run configs.
struct FormatError : Error {
    using Error::Error;
};

// Operation applied to a model in the wrong state, e.g. merging a model
// that carries no adapters.
struct StateError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    DivergenceError(const std::string& what, std::size_t step_index)
        : Error(what), step(step_index) {}
    std::size_t step;
};

} // namespace qalora
