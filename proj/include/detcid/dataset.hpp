#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "detcid/json_util.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::dataset {

Json to_json(const synthesis::SynthesisConfig& cfg);
synthesis::SynthesisConfig synthesis_config_from_json(const Json& j);
Json to_json(const synthesis::ToyPoolConfig& cfg);
synthesis::ToyPoolConfig toy_pool_config_from_json(const Json& j);
Json to_json(const synthesis::Placement& p);
Json to_json(const synthesis::Provenance& p);

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string image;       // relative to the dataset root
  std::string annotation;  // relative to the dataset root
  int masks = 0;
  int skipped = 0;
};

struct Manifest {
  Json config;
  std::uint64_t seed = 0;
  int count = 0;
  std::vector<ManifestEntry> entries;
  Json skip_log = Json::array();
};

Json to_json(const Manifest& m);
Manifest manifest_from_json(const Json& j);
Manifest read_manifest(const std::filesystem::path& root);

/// Ids, seeds and file locations of a z-image dataset, without rendering.
std::vector<ManifestEntry> plan_dataset(const synthesis::SynthesisConfig& cfg, int count);

/// Write one sample under the dataset layout and return its manifest entry.
ManifestEntry write_sample(const std::filesystem::path& root, const ManifestEntry& planned,
                           const synthesis::SyntheticSample& sample);

/// Render `count` images in parallel and write images/, masks/, annotations/
/// and manifest.json under `root`. `config_echo` is stored verbatim.
Manifest synthesize_dataset(const std::vector<synthesis::AnnotatedImage>& pool,
                            const synthesis::SynthesisConfig& cfg, int count,
                            const std::filesystem::path& root, int workers = 1,
                            const Json& config_echo = Json::object());

/// One annotated image read back from a dataset directory.
synthesis::AnnotatedImage load_sample(const std::filesystem::path& root, const std::string& id);

/// Every image listed by the manifest (or, without one, every annotation file).
std::vector<synthesis::AnnotatedImage> load_dataset(const std::filesystem::path& root);
std::vector<std::string> list_ids(const std::filesystem::path& root);

/// Run fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace detcid::dataset
