#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tevit {

// Shape/dimension contract violations (mismatched operands, bad axis).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (bad stage setup, indivisible dims, bad JSON keys).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API contract violations (non-scalar loss, missing gradients, non-finite costs).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric failures (NaN loss, non-finite intermediates).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

}  // namespace tevit
