#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace deyo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values where finite ones are required.
class NumericInputError : public Error {
public:
  using Error::Error;
};

/// Shape mismatch between operands.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (unknown key, bad value, batch-norm with one sample).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed binary or text input. Carries the byte offset where parsing stopped.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

/// Operation called in the wrong lifecycle state (e.g. reset without snapshot).
class StateError : public Error {
public:
  using Error::Error;
};

/// Required input files are missing.
class DataError : public Error {
public:
  using Error::Error;
};

}  // namespace deyo
