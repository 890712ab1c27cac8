#pragma once

#include <stdexcept>
#include <string>

namespace badedit {

enum class ErrorCode {
  kDimensionMismatch,
  kNotSymmetric,
  kSingularAfterJitter,
  kEmptySample,
  kInvalidConfig,
  kSequenceTooLong,
  kTokenOutOfRange,
  kInvalidSubstitution,
  kInvalidSpan,
  kLayerOutOfRange,
  kPromptTooLong,
  kInsufficientData,
  kDiverged,
  kBudgetExhausted,
  kEmptyCorpus,
  kTriggerAbsent,
  kNoImprovement,
  kPlanInvalid,
  kEmptySplit,
  kAllExcluded,
  kFormat,
  kIo,
};

const char* to_string(ErrorCode code);

// Single exception type for the library; the code drives CLI exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace badedit
