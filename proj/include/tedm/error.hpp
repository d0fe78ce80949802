#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tedm {

// Error kinds raised by the library. The numeric values are part of the C API
// (see tedm.h) and must stay stable.
enum class ErrorCode : int {
  kOk = 0,
  kInvalidSchedule = 1,
  kShapeError = 2,
  kInvalidTimestep = 3,
  kEmptyDataset = 4,
  kDivergedTraining = 5,
  kModelError = 6,
  kUnsupportedResize = 7,
  kStorageError = 8,
  kFormatError = 9,
  kMixedStepError = 10,
  kRangeError = 11,
  kEmptyGroup = 12,
  kInvalidSpec = 13,
  kDegenerateIntensity = 14,
  kDegenerateVariance = 15,
  kBudgetError = 16,
  kConfigError = 17,
  kManifestError = 18,
  kStageError = 19,
  kInvalidArgument = 20,
  kInternal = 99,
};

std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace tedm
