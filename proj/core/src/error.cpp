#include "rareloss/error.hpp"

namespace rareloss {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "invalid input";
    case ErrorCode::kDegenerateRange: return "degenerate range";
    case ErrorCode::kConditioning: return "conditioning";
    case ErrorCode::kLengthMismatch: return "length mismatch";
    case ErrorCode::kInvalidSpec: return "invalid spec";
    case ErrorCode::kTooFewSamples: return "too few samples";
    case ErrorCode::kNonFiniteGradient: return "non-finite gradient";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kDegenerateRate: return "degenerate rate";
    case ErrorCode::kDisjointSupport: return "disjoint support";
    case ErrorCode::kDegenerateChannel: return "degenerate channel";
    case ErrorCode::kMissingColumn: return "missing column";
    case ErrorCode::kNonUniformGrid: return "non-uniform grid";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kSeriesTooShort: return "series too short";
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace rareloss
