#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// Base class for all library errors. The CLI maps the subclasses to exit
// codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration: schema violations, out-of-range hyperparameters,
// degenerate setups that would silently train nothing.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: unreadable files, malformed formats, shape mismatches,
// datasets too small for the requested episode layout.
class DataError : public Error {
 public:
  using Error::Error;
};

// Numeric failure: NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Contract violation on an op (dimension/channel mismatch etc).
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace fewshot
