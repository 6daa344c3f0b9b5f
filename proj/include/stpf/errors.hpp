#pragma once

#include <stdexcept>
#include <string>

namespace stpf {

// Error categories map onto CLI exit codes: config/format/usage -> 2,
// numeric failures -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor rank/extent mismatch.
struct DimError : Error {
  using Error::Error;
};

// Invalid configuration value (even kernel, unstable alpha, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed file; message carries the byte offset where parsing failed.
struct FormatError : Error {
  using Error::Error;
};

// API misuse (non-scalar loss, empty mask, out-of-range split, ...).
struct UsageError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace stpf
