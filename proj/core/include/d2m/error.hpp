#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace d2m {

enum class ErrorCode {
  InvalidShape,
  InvalidConfig,
  InvalidPlan,
  InvalidArgument,
  IoFailure,
  BadMagic,
  VersionMismatch,
  TruncatedPayload,
  NonFiniteValue,
  OutOfRange,
  DimensionMismatch,
  MissingTensor,
  UnexpectedTensor,
  NonFiniteActivation,
  EmptyRecord,
  NonFiniteGradient,
  DivergenceDetected,
  ZeroVector,
  IndexOutOfRange,
  DepthUnreachable,
  PlanModelMismatch,
  VerificationFailure,
  NonPositiveLatency,
  DegenerateCalibration,
  EmptyAssignments,
  LayerCountMismatch,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace d2m
