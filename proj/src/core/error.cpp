#include "detcid/error.hpp"

#include <stdexcept>

#include "detcid/raster.hpp"
#include "detcid/rng.hpp"

namespace detcid {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidTransform: return "invalid-transform";
    case ErrorCode::kEmptyMask: return "empty-mask";
    case ErrorCode::kDegenerateMask: return "degenerate-mask";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kNoBackground: return "no-background";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kPlacementFailed: return "placement-failed";
    case ErrorCode::kInvalidGroundTruth: return "invalid-ground-truth";
    case ErrorCode::kInvalidBox: return "invalid-box";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kEmptyEvaluation: return "empty-evaluation";
  }
  return "unknown";
}

const char* to_string(CellClass c) {
  return c == CellClass::kSpore ? "spore" : "vegetative";
}

CellClass cell_class_from_string(const std::string& name) {
  if (name == "vegetative") return CellClass::kVegetative;
  if (name == "spore") return CellClass::kSpore;
  throw Error(ErrorCode::kParse, "unknown cell class '" + name + "'");
}

}  // namespace detcid
