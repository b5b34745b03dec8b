#pragma once

#include <stdexcept>
#include <string>

namespace fedrco {

enum class ErrorCode {
  InvalidArgument,
  NonSquare,
  AsymmetricInput,
  FactorizationFailure,
  KernelLargerThanInput,
  ShapeMismatch,
  LabelOutOfRange,
  EmptyDataset,
  DegenerateTrace,
  InversesNotReady,
  ZeroGradient,
  TooFewSamples,
  InfeasibleAssignment,
  ConfigInvalid,
  IoFailure,
  FormatError,
};

const char* to_string(ErrorCode code);

// Every recoverable failure in the library is reported through this type.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fedrco
