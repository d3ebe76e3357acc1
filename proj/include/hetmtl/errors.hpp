#pragma once

#include <stdexcept>
#include <string>

namespace hetmtl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Matrix/vector dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise malformed numeric input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Task index outside [0, R).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Optimizer received non-finite gradients for a parameter block.
class OptimizerError : public Error {
 public:
  OptimizerError(std::string block, const std::string& what)
      : Error(what), block_(std::move(block)) {}
  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

/// Training objective became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int batch, const std::string& what)
      : Error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

/// Dataset or model file that does not match the expected schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hetmtl
