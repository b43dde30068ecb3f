#pragma once

#include <stdexcept>

namespace fewtune {

// Invalid specs, config files, CLI usage. The CLI maps these to exit code 2.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input files (IDX payloads, checkpoints, run records).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Data-dependent failures: episode sampling constraints, empty classes,
// missing diagnostics inputs.
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches.
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: unfitted state, stale caches, degenerate inputs that indicate
// an upstream bug rather than a numeric edge case.
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Divergence or non-finite values during optimization.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace fewtune
