#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cram {

// Every failure surfaced by the library derives from Error. The CLI maps the
// category to a process exit code.
enum class ErrorCategory { Config, Data, Numeric, Io };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

// Shape or length mismatch (token windows, masks, spans).
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

// A modification plan names a head the model does not have.
class PlanError : public Error {
 public:
  explicit PlanError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class LookupError : public Error {
 public:
  explicit LookupError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class InstanceError : public Error {
 public:
  explicit InstanceError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class SelectionError : public Error {
 public:
  explicit SelectionError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error(ErrorCategory::Numeric, what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

}  // namespace cram
