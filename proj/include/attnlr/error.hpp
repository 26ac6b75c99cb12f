#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace attnlr {

// Every failure surfaced by the library belongs to exactly one category. The
// C API maps categories to status codes and the CLI prints the category name
// as the machine-parsable part of its error line.
enum class ErrorCategory {
  InvalidInput,
  Domain,
  DimMismatch,
  Singular,
  EmptyAccumulator,
  Divergence,
  Format,
  Io,
  Config,
};

std::string_view category_name(ErrorCategory c) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class SingularMatrixError : public Error {
 public:
  SingularMatrixError(const std::string& message, double ridge)
      : Error(ErrorCategory::Singular, message), ridge_(ridge) {}

  double ridge() const noexcept { return ridge_; }

 private:
  double ridge_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::string offending)
      : Error(ErrorCategory::Divergence, message),
        offending_(std::move(offending)) {}

  // Name of the parameter (or "loss") that went non-finite.
  const std::string& offending() const noexcept { return offending_; }

 private:
  std::string offending_;
};

[[noreturn]] void fail(ErrorCategory category, const std::string& message);

}  // namespace attnlr
