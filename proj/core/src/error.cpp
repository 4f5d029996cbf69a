#include "d2m/error.hpp"

namespace d2m {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidPlan: return "InvalidPlan";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::UnexpectedTensor: return "UnexpectedTensor";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::EmptyRecord: return "EmptyRecord";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DepthUnreachable: return "DepthUnreachable";
    case ErrorCode::PlanModelMismatch: return "PlanModelMismatch";
    case ErrorCode::VerificationFailure: return "VerificationFailure";
    case ErrorCode::NonPositiveLatency: return "NonPositiveLatency";
    case ErrorCode::DegenerateCalibration: return "DegenerateCalibration";
    case ErrorCode::EmptyAssignments: return "EmptyAssignments";
    case ErrorCode::LayerCountMismatch: return "LayerCountMismatch";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace d2m
