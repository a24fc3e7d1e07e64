#pragma once

#include <stdexcept>
#include <string>

namespace ebg {

// Input files that cannot be understood: missing columns, bad headers.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structurally valid input with invalid content: negative spacing, series
// too short, out-of-range settings.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure at runtime: non-finite intermediates, divergence,
// division by zero.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ebg
