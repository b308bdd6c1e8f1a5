#include "nudge/error.hpp"

namespace nudge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedCsv: return "MalformedCsv";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::DomainViolation: return "DomainViolation";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::SingularHessian: return "SingularHessian";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::EmptyArm: return "EmptyArm";
    case ErrorCode::SingularInformation: return "SingularInformation";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::PreconditionViolated: return "PreconditionViolated";
    case ErrorCode::NonpositiveVariance: return "NonpositiveVariance";
    case ErrorCode::RatioOutOfRange: return "RatioOutOfRange";
    case ErrorCode::EmptyCell: return "EmptyCell";
    case ErrorCode::FoldTooSmall: return "FoldTooSmall";
    case ErrorCode::ResampleDegenerate: return "ResampleDegenerate";
    case ErrorCode::InvalidCurve: return "InvalidCurve";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace nudge
