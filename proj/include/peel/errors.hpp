#pragma once

#include <stdexcept>
#include <string>

namespace peel {

// Dimension/rank mismatches between tensors or layers.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid values: non-finite data, bad config fields, malformed manifests.
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// File-level failures: missing files, bad magic, truncated payloads.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Solver produced a non-finite iterate; carries the offending step.
struct diverged_error : std::runtime_error {
    diverged_error(const std::string& msg, long step_)
        : std::runtime_error(msg), step(step_) {}
    long step;
};

// Network contains a layer arrangement the operation cannot handle.
struct unsupported_structure_error : std::runtime_error {
    explicit unsupported_structure_error(const std::string& msg)
        : std::runtime_error(msg) {}
};

// Least-squares system is rank deficient.
struct rank_deficiency_error : std::runtime_error {
    explicit rank_deficiency_error(const std::string& msg)
        : std::runtime_error(msg) {}
};

} // namespace peel
