#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace saq {

// Raised when an iterative procedure (training, calibration) produces
// non-finite values. Carries the step index for diagnostics; the CLI maps it
// to its own exit code.
struct DivergenceError : std::runtime_error {
    std::size_t step;
    DivergenceError(const std::string& what, std::size_t step_index)
        : std::runtime_error(what + " (step " + std::to_string(step_index) + ")"),
          step(step_index) {}
};

} // namespace saq
