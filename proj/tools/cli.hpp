#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "detcid/arpn.hpp"
#include "detcid/detection.hpp"
#include "detcid/json_util.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIoError = 3,
  kDiverged = 4,
  kPartial = 5,
  kEmptyEval = 6,
};

/// One JSON file with a section per command. Unknown keys are rejected and
/// relative paths are resolved against the file's directory.
struct RunConfig {
  std::string preset = "default";
  std::optional<std::uint64_t> seed;
  int count = 10;
  synthesis::SynthesisConfig synthesis;
  std::filesystem::path pool_dir;
  synthesis::ToyPoolConfig toy_pool;
  arpn::TrainConfig arpn;
  detection::DetectionConfig detection;
  detection::HeadTrainConfig head;
  double iou_threshold = 0.5;

  /// Copies the run seed into every seeded section.
  void apply_seed(std::uint64_t s);
};

RunConfig preset_config(const std::string& name);
RunConfig parse_run_config(const Json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
Json to_json(const RunConfig& c);

/// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args);

}  // namespace detcid::cli
