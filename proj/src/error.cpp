#include "fedrco/error.hpp"

namespace fedrco {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonSquare: return "NonSquare";
    case ErrorCode::AsymmetricInput: return "AsymmetricInput";
    case ErrorCode::FactorizationFailure: return "FactorizationFailure";
    case ErrorCode::KernelLargerThanInput: return "KernelLargerThanInput";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DegenerateTrace: return "DegenerateTrace";
    case ErrorCode::InversesNotReady: return "InversesNotReady";
    case ErrorCode::ZeroGradient: return "ZeroGradient";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::InfeasibleAssignment: return "InfeasibleAssignment";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code) {}

}  // namespace fedrco
