#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qlab {

/// Caller broke a documented precondition (shape mismatch, out-of-range argument).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration; reported before any compute starts.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corpus could not be read.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or corrupted on-disk artifact (checkpoint, CSV, manifest).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A run directory is in a state that forbids the requested operation
/// (exists without --force, missing parent checkpoint).
class RunStateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced during computation. `where` names the first offending site.
class NumericFailure : public std::runtime_error {
 public:
  NumericFailure(std::string where, const std::string& what)
      : std::runtime_error(what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Cholesky hit a non-positive pivot.
class FactorizationError : public std::runtime_error {
 public:
  FactorizationError(std::size_t pivot, const std::string& what)
      : std::runtime_error(what), pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

/// A layer could not be quantized (Hessian factorization failed after all damping retries).
class QuantizationError : public std::runtime_error {
 public:
  QuantizationError(std::string layer, const std::string& what)
      : std::runtime_error(what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

/// Process exit codes used by the CLI.
enum class ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericFailure = 3,
  kPartialSweepFailure = 4,
};

}  // namespace qlab
