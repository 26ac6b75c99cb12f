#include "attnlr/error.hpp"

namespace attnlr {

std::string_view category_name(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::InvalidInput: return "invalid_input";
    case ErrorCategory::Domain: return "domain";
    case ErrorCategory::DimMismatch: return "dim_mismatch";
    case ErrorCategory::Singular: return "singular";
    case ErrorCategory::EmptyAccumulator: return "empty_accumulator";
    case ErrorCategory::Divergence: return "divergence";
    case ErrorCategory::Format: return "format";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Config: return "config";
  }
  return "unknown";
}

void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

}  // namespace attnlr
