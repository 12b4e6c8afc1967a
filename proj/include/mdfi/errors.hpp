#pragma once

#include <stdexcept>
#include <string>

namespace mdfi {

// Shape or size disagreement between operands.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A stated precondition was violated (empty scope, bad index, ...).
struct ContractError : std::invalid_argument {
    explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration value or file.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable/unwritable or malformed data file.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A randomized construction failed to satisfy its constraints.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mdfi
