#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nudge {

enum class ErrorCode {
  MalformedCsv,
  SchemaViolation,
  DomainViolation,
  LengthMismatch,
  DimensionMismatch,
  SingularHessian,
  NoConvergence,
  EmptyArm,
  SingularInformation,
  Infeasible,
  PreconditionViolated,
  NonpositiveVariance,
  RatioOutOfRange,
  EmptyCell,
  FoldTooSmall,
  ResampleDegenerate,
  InvalidCurve,
  InvalidConfig,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Every library failure is reported through this type; `code()` lets callers
// (the CLI in particular) map failures onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nudge
