#include <fstream>
#include <sstream>

#include "tedm/error.hpp"
#include "tedm/hash.hpp"
#include "tedm/tensor.hpp"

namespace tedm {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kOk: return "Ok";
    case ErrorCode::kInvalidSchedule: return "InvalidSchedule";
    case ErrorCode::kShapeError: return "ShapeError";
    case ErrorCode::kInvalidTimestep: return "InvalidTimestep";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kDivergedTraining: return "DivergedTraining";
    case ErrorCode::kModelError: return "ModelError";
    case ErrorCode::kUnsupportedResize: return "UnsupportedResize";
    case ErrorCode::kStorageError: return "StorageError";
    case ErrorCode::kFormatError: return "FormatError";
    case ErrorCode::kMixedStepError: return "MixedStepError";
    case ErrorCode::kRangeError: return "RangeError";
    case ErrorCode::kEmptyGroup: return "EmptyGroup";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kDegenerateIntensity: return "DegenerateIntensity";
    case ErrorCode::kDegenerateVariance: return "DegenerateVariance";
    case ErrorCode::kBudgetError: return "BudgetError";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kManifestError: return "ManifestError";
    case ErrorCode::kStageError: return "StageError";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kInternal: return "Internal";
  }
  return "Unknown";
}

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kStorageError, "cannot open " + path);
  Hasher h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.bytes(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

}  // namespace tedm
