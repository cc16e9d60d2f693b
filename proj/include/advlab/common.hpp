#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace advlab {

// Error taxonomy. The CLI maps these onto its exit-code contract:
// usage errors -> 1, numeric/runtime failures -> 2.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Denominator guard shared by every normalization in the project. Anything
// below this is treated as degenerate and reported as undefined/skipped
// instead of divided by.
inline constexpr double kNormEps = 1e-12;

}  // namespace advlab
