#include "badedit/error.hpp"

namespace badedit {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNotSymmetric: return "NotSymmetric";
    case ErrorCode::kSingularAfterJitter: return "SingularAfterJitter";
    case ErrorCode::kEmptySample: return "EmptySample";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::kInvalidSubstitution: return "InvalidSubstitution";
    case ErrorCode::kInvalidSpan: return "InvalidSpan";
    case ErrorCode::kLayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::kPromptTooLong: return "PromptTooLong";
    case ErrorCode::kInsufficientData: return "InsufficientData";
    case ErrorCode::kDiverged: return "Diverged";
    case ErrorCode::kBudgetExhausted: return "BudgetExhausted";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kTriggerAbsent: return "TriggerAbsent";
    case ErrorCode::kNoImprovement: return "NoImprovement";
    case ErrorCode::kPlanInvalid: return "PlanInvalid";
    case ErrorCode::kEmptySplit: return "EmptySplit";
    case ErrorCode::kAllExcluded: return "AllExcluded";
    case ErrorCode::kFormat: return "Format";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

}  // namespace badedit
