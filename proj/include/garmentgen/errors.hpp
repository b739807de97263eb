#pragma once

#include <stdexcept>
#include <string>

namespace ggen {

// Error taxonomy used across the library. Each maps to one failure class the
// callers are expected to distinguish; everything derives from ggen::Error so
// tools can catch the whole family at once.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension disagreement between tensors.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value or unknown config key.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A public-API precondition was violated by the caller.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Time step outside the schedule, or step ordering violated.
struct StepError : Error {
    explicit StepError(const std::string& msg) : Error(msg) {}
};

// Model structure mismatch (block counts, layer indices).
struct ArchitectureError : Error {
    explicit ArchitectureError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (images, checkpoints, manifests).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// An operation that needs a nonempty region got an empty one.
struct EmptyRegionError : Error {
    explicit EmptyRegionError(const std::string& msg) : Error(msg) {}
};

}  // namespace ggen
