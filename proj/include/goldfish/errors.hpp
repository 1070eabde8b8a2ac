#pragma once

#include <stdexcept>
#include <string>

namespace goldfish {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed UTF-8 input. `offset` is the index of the first offending byte.
class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : Error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class CorpusError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape or length mismatch between arguments.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A mask with no supervised position was used as a loss weight.
class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered in gradients or parameters.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace goldfish
