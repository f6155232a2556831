#include "detcid/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <exception>
#include <mutex>
#include <thread>

#include "detcid/core.hpp"
#include "detcid/error.hpp"
#include "detcid/fsutil.hpp"

namespace detcid {

Json parse_json_text(const std::string& text, const std::string& source_name) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t upto = std::min(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(ErrorCode::kParse, source_name + ":" + std::to_string(line) + ":" +
                                       std::to_string(col) + ": " + e.what());
  }
}

}  // namespace detcid

namespace detcid::dataset {

namespace fs = std::filesystem;
using synthesis::IntRange;
using synthesis::SynthesisConfig;
using synthesis::ToyPoolConfig;

namespace {

Json range_json(const IntRange& r) { return Json::array({r.lo, r.hi}); }

void read_range(StrictObject& o, const char* key, IntRange& r) {
  std::vector<int> v{r.lo, r.hi};
  o.get(key, v);
  if (v.size() != 2) throw Error(ErrorCode::kInvalidConfig, std::string(key) + ": expected [lo, hi]");
  r = {v[0], v[1]};
}

Json point_json(Point p) { return Json::array({p.x, p.y}); }

}  // namespace

Json to_json(const SynthesisConfig& c) {
  return {{"rows", c.rows},
          {"cols", c.cols},
          {"isolated", range_json(c.isolated)},
          {"touching", range_json(c.touching)},
          {"crossing", range_json(c.crossing)},
          {"max_vertical_shift", c.max_vertical_shift},
          {"max_horizontal_shift", c.max_horizontal_shift},
          {"max_orientation_change", c.max_orientation_change},
          {"shear_base", c.shear_base},
          {"shear_scale", c.shear_scale},
          {"quilt_window", c.quilt_window},
          {"quilt_block", c.quilt_block},
          {"quilt_overlap", c.quilt_overlap},
          {"quilt_tolerance", c.quilt_tolerance},
          {"placement_retries", c.placement_retries},
          {"seed", c.seed}};
}

SynthesisConfig synthesis_config_from_json(const Json& j) {
  SynthesisConfig c;
  StrictObject o(j, "synthesis");
  o.get("rows", c.rows);
  o.get("cols", c.cols);
  read_range(o, "isolated", c.isolated);
  read_range(o, "touching", c.touching);
  read_range(o, "crossing", c.crossing);
  o.get("max_vertical_shift", c.max_vertical_shift);
  o.get("max_horizontal_shift", c.max_horizontal_shift);
  o.get("max_orientation_change", c.max_orientation_change);
  o.get("shear_base", c.shear_base);
  o.get("shear_scale", c.shear_scale);
  o.get("quilt_window", c.quilt_window);
  o.get("quilt_block", c.quilt_block);
  o.get("quilt_overlap", c.quilt_overlap);
  o.get("quilt_tolerance", c.quilt_tolerance);
  o.get("placement_retries", c.placement_retries);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

Json to_json(const ToyPoolConfig& c) {
  return {{"count", c.count},
          {"rows", c.rows},
          {"cols", c.cols},
          {"vegetative", range_json(c.vegetative)},
          {"spores", range_json(c.spores)},
          {"rod_length", Json::array({c.rod_length_min, c.rod_length_max})},
          {"rod_width", Json::array({c.rod_width_min, c.rod_width_max})},
          {"spore_diameter", Json::array({c.spore_diameter_min, c.spore_diameter_max})},
          {"seed", c.seed}};
}

ToyPoolConfig toy_pool_config_from_json(const Json& j) {
  ToyPoolConfig c;
  StrictObject o(j, "toy_pool");
  o.get("count", c.count);
  o.get("rows", c.rows);
  o.get("cols", c.cols);
  read_range(o, "vegetative", c.vegetative);
  read_range(o, "spores", c.spores);
  auto pair = [&](const char* key, double& lo, double& hi) {
    std::vector<double> v{lo, hi};
    o.get(key, v);
    if (v.size() != 2) throw Error(ErrorCode::kInvalidConfig, std::string(key) + ": expected [lo, hi]");
    lo = v[0];
    hi = v[1];
  };
  pair("rod_length", c.rod_length_min, c.rod_length_max);
  pair("rod_width", c.rod_width_min, c.rod_width_max);
  pair("spore_diameter", c.spore_diameter_min, c.spore_diameter_max);
  o.get("seed", c.seed);
  o.finish();
  return c;
}

Json to_json(const synthesis::Placement& p) {
  Json j = {{"kind", synthesis::to_string(p.kind)},
            {"source_cell", p.source_cell},
            {"class", to_string(p.cell_class)},
            {"theta", p.theta},
            {"requested", point_json(p.requested)},
            {"attempts", p.attempts},
            {"skipped", p.skipped}};
  if (p.pair >= 0) j["pair"] = p.pair;
  if (!p.skipped) {
    j["placed"] = point_json(p.placed);
    j["shear"] = p.shear;
    j["scale"] = Json::array({p.scale_x, p.scale_y});
    j["mask_index"] = p.mask_index;
  }
  if (p.kind == synthesis::PlacementKind::kTouchingSecond ||
      p.kind == synthesis::PlacementKind::kCrossingSecond) {
    j["partner_offset"] = point_json(p.partner_offset);
    j["partner_extent"] = p.partner_extent;
  }
  return j;
}

Json to_json(const synthesis::Provenance& p) {
  Json placements = Json::array();
  for (const auto& pl : p.placements) placements.push_back(to_json(pl));
  return {{"seed", p.seed},
          {"source_image", p.source_image},
          {"source_id", p.source_id},
          {"patch_origin", Json::array({p.patch_x, p.patch_y})},
          {"counts", {{"isolated", p.isolated}, {"touching", p.touching}, {"crossing", p.crossing}}},
          {"placements", placements}};
}

Json to_json(const Manifest& m) {
  Json images = Json::array();
  for (const auto& e : m.entries) {
    images.push_back({{"id", e.id},
                      {"seed", e.seed},
                      {"image", e.image},
                      {"annotation", e.annotation},
                      {"masks", e.masks},
                      {"skipped", e.skipped}});
  }
  return {{"format", "detcid-dataset"},
          {"version", 1},
          {"config", m.config},
          {"seed", m.seed},
          {"count", m.count},
          {"images", images},
          {"skip_log", m.skip_log}};
}

Manifest manifest_from_json(const Json& j) {
  Manifest m;
  try {
    m.config = j.value("config", Json::object());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.count = j.at("count").get<int>();
    for (const auto& e : j.at("images")) {
      m.entries.push_back({e.at("id").get<std::string>(), e.at("seed").get<std::uint64_t>(),
                           e.at("image").get<std::string>(), e.at("annotation").get<std::string>(),
                           e.value("masks", 0), e.value("skipped", 0)});
    }
    m.skip_log = j.value("skip_log", Json::array());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("manifest: ") + e.what());
  }
  return m;
}

Manifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  return manifest_from_json(parse_json_text(read_file(path), path.string()));
}

std::vector<ManifestEntry> plan_dataset(const SynthesisConfig& cfg, int count) {
  if (count < 1) throw Error(ErrorCode::kInvalidConfig, "dataset: image count must be >= 1");
  std::vector<ManifestEntry> plan(static_cast<std::size_t>(count));
  for (int l = 0; l < count; ++l) {
    auto& e = plan[static_cast<std::size_t>(l)];
    e.id = std::to_string(l);
    e.seed = synthesis::image_seed(cfg.seed, static_cast<std::uint64_t>(l));
    e.image = "images/" + e.id + ".png";
    e.annotation = "annotations/" + e.id + ".json";
  }
  return plan;
}

ManifestEntry write_sample(const fs::path& root, const ManifestEntry& planned,
                           const synthesis::SyntheticSample& sample) {
  ManifestEntry e = planned;
  core::write_gray_png(root / e.image, sample.image);
  Json instances = Json::array();
  for (std::size_t j = 0; j < sample.truth.size(); ++j) {
    const std::string mask_rel = "masks/" + e.id + "/" + std::to_string(j) + ".png";
    core::write_mask_png(root / mask_rel, sample.truth.masks[j]);
    Json inst = {{"mask", mask_rel}, {"class", to_string(sample.truth.class_labels[j])}};
    for (const auto& p : sample.provenance.placements) {
      if (p.mask_index == static_cast<int>(j)) inst["provenance"] = to_json(p);
    }
    instances.push_back(std::move(inst));
  }
  Json skips = Json::array();
  for (const auto& p : sample.provenance.placements) {
    if (p.skipped) skips.push_back(to_json(p));
  }
  const Json ann = {{"id", e.id},
                    {"image", e.image},
                    {"rows", sample.image.rows()},
                    {"cols", sample.image.cols()},
                    {"instances", instances},
                    {"skips", skips},
                    {"provenance", to_json(sample.provenance)}};
  write_file_atomic(root / e.annotation, ann.dump(2) + "\n");
  e.masks = static_cast<int>(sample.truth.size());
  e.skipped = sample.provenance.skipped();
  return e;
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::jthread> threads;
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  threads.clear();
  if (first_error) std::rethrow_exception(first_error);
}

Manifest synthesize_dataset(const std::vector<synthesis::AnnotatedImage>& pool,
                            const SynthesisConfig& cfg, int count, const fs::path& root,
                            int workers, const Json& config_echo) {
  cfg.validate();
  auto plan = plan_dataset(cfg, count);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) {
    throw Error(ErrorCode::kIo, "cannot create dataset directory " + root.string());
  }

  std::vector<synthesis::Provenance> provenance(plan.size());
  parallel_for(count, workers, [&](int l) {
    auto sample = synthesis::synthesize_indexed(pool, cfg, static_cast<std::uint64_t>(l));
    plan[static_cast<std::size_t>(l)] = write_sample(root, plan[static_cast<std::size_t>(l)], sample);
    provenance[static_cast<std::size_t>(l)] = std::move(sample.provenance);
  });

  Manifest m;
  m.config = config_echo.empty() ? Json{{"synthesis", to_json(cfg)}} : config_echo;
  m.seed = cfg.seed;
  m.count = count;
  m.entries = std::move(plan);
  for (std::size_t l = 0; l < provenance.size(); ++l) {
    for (const auto& p : provenance[l].placements) {
      if (!p.skipped) continue;
      Json s = to_json(p);
      s["id"] = m.entries[l].id;
      m.skip_log.push_back(std::move(s));
    }
  }
  write_file_atomic(root / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

synthesis::AnnotatedImage load_sample(const fs::path& root, const std::string& id) {
  const fs::path ann_path = root / "annotations" / (id + ".json");
  const Json ann = parse_json_text(read_file(ann_path), ann_path.string());
  synthesis::AnnotatedImage img;
  img.id = id;
  try {
    img.image = core::read_gray_png(root / ann.at("image").get<std::string>());
    for (const auto& inst : ann.at("instances")) {
      InstanceMask m = core::read_mask_png(root / inst.at("mask").get<std::string>());
      if (!m.same_shape(InstanceMask(img.image.rows(), img.image.cols()))) {
        throw Error(ErrorCode::kShape, ann_path.string() + ": mask size differs from image");
      }
      img.masks.push_back(std::move(m),
                          cell_class_from_string(inst.value("class", std::string("vegetative"))));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, ann_path.string() + ": " + e.what());
  }
  return img;
}

std::vector<std::string> list_ids(const fs::path& root) {
  std::vector<std::string> ids;
  if (fs::exists(root / "manifest.json")) {
    for (const auto& e : read_manifest(root).entries) ids.push_back(e.id);
    return ids;
  }
  const fs::path ann_dir = root / "annotations";
  if (!fs::is_directory(ann_dir)) {
    throw Error(ErrorCode::kIo, "not a dataset directory: " + root.string());
  }
  for (const auto& entry : fs::directory_iterator(ann_dir)) {
    if (entry.path().extension() == ".json") ids.push_back(entry.path().stem().string());
  }
  // Numeric ids in numeric order, everything else lexicographically after them.
  const auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
  };
  std::sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
    const bool na = numeric(a), nb = numeric(b);
    if (na != nb) return na;
    if (na && a.size() != b.size()) return a.size() < b.size();
    return a < b;
  });
  return ids;
}

std::vector<synthesis::AnnotatedImage> load_dataset(const fs::path& root) {
  std::vector<synthesis::AnnotatedImage> out;
  for (const auto& id : list_ids(root)) out.push_back(load_sample(root, id));
  return out;
}

}  // namespace detcid::dataset
