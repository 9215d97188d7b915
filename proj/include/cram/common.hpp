#pragma once
// Error taxonomy shared by the whole library. Every category maps to one
// CLI exit code (see tools/cram.cpp).

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cram {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not fit the operation.
struct ShapeError : Error {
  using Error::Error;
};

// Data violates a contract (label range, clue mismatch, empty dataset).
struct ValueError : Error {
  using Error::Error;
};

// Invalid configuration (stride < 1, batch size 1 in train-mode BN, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed file contents (bad magic, truncation).
struct FormatError : Error {
  using Error::Error;
};

// OS-level I/O failure (missing file, write error).
struct IoError : Error {
  using Error::Error;
};

// NaN/Inf detected where finiteness is required; training aborts.
struct NumericError : Error {
  using Error::Error;
};

// API misuse (backward on a non-scalar, empty tau list).
struct UsageError : Error {
  using Error::Error;
};

inline std::string strformat(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

}  // namespace cram
