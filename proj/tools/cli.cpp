#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <random>

#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "detcid/evaluation.hpp"
#include "detcid/fsutil.hpp"

namespace detcid::cli {

namespace fs = std::filesystem;

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  synthesis.seed = s;
  arpn.seed = s;
  head.seed = s;
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "default") return c;
  if (name != "toy") throw Error(ErrorCode::kInvalidConfig, "config: unknown preset '" + name + "'");
  c.synthesis = synthesis::toy_synthesis_config();
  c.arpn.adversarial_weight = 0.01;
  c.arpn.steps = 300;
  c.detection = detection::toy_detection_config();
  c.head.steps = 3000;
  return c;
}

namespace {

/// Overlay `patch` on the serialized defaults so unknown keys still reach the
/// strict parser.
Json overlay(Json base, const Json& patch, const std::string& section, bool allow_seed) {
  if (!patch.is_object()) throw Error(ErrorCode::kInvalidConfig, section + ": expected an object");
  if (!allow_seed && patch.contains("seed")) {
    throw Error(ErrorCode::kInvalidConfig, section + ": set the run seed at the top level");
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) base[it.key()] = it.value();
  return base;
}

}  // namespace

RunConfig parse_run_config(const Json& j, const fs::path& base_dir) {
  StrictObject o(j, "config");
  std::string preset = "default";
  o.get("preset", preset);
  RunConfig c = preset_config(preset);
  if (o.has("seed")) {
    std::uint64_t s = 0;
    o.get("seed", s);
    c.seed = s;
  }
  o.get("count", c.count);
  if (c.count < 1) throw Error(ErrorCode::kInvalidConfig, "config.count must be >= 1");
  if (o.has("synthesis")) {
    c.synthesis = dataset::synthesis_config_from_json(
        overlay(dataset::to_json(c.synthesis), o.child("synthesis"), "synthesis", false));
  }
  if (o.has("pool")) {
    StrictObject p(o.child("pool"), "pool");
    std::string dir;
    p.get("dir", dir);
    if (!dir.empty()) c.pool_dir = fs::path(dir).is_absolute() ? fs::path(dir) : base_dir / dir;
    if (p.has("toy")) {
      c.toy_pool = dataset::toy_pool_config_from_json(
          overlay(dataset::to_json(c.toy_pool), p.child("toy"), "pool.toy", true));
    }
    p.finish();
  }
  if (o.has("arpn")) {
    c.arpn = arpn::train_config_from_json(overlay(arpn::to_json(c.arpn), o.child("arpn"), "arpn", false));
  }
  if (o.has("detection")) {
    c.detection = detection::detection_config_from_json(
        overlay(detection::to_json(c.detection), o.child("detection"), "detection", true));
  }
  if (o.has("head")) {
    c.head = detection::head_train_config_from_json(
        overlay(detection::to_json(c.head), o.child("head"), "head", false));
  }
  if (o.has("evaluation")) {
    StrictObject e(o.child("evaluation"), "evaluation");
    e.get("iou_threshold", c.iou_threshold);
    e.finish();
    if (!(c.iou_threshold > 0.0 && c.iou_threshold <= 1.0)) {
      throw Error(ErrorCode::kInvalidConfig, "evaluation.iou_threshold must be in (0, 1]");
    }
  }
  o.finish();
  if (c.seed) c.apply_seed(*c.seed);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kInvalidConfig, "config not found: " + path.string());
  const fs::path abs = fs::absolute(path);
  return parse_run_config(parse_json_text(read_file(abs), path.string()), abs.parent_path());
}

Json to_json(const RunConfig& c) {
  Json j = {{"preset", c.preset},
            {"count", c.count},
            {"synthesis", dataset::to_json(c.synthesis)},
            {"pool", {{"dir", c.pool_dir.string()}, {"toy", dataset::to_json(c.toy_pool)}}},
            {"arpn", arpn::to_json(c.arpn)},
            {"detection", detection::to_json(c.detection)},
            {"head", detection::to_json(c.head)},
            {"evaluation", {{"iou_threshold", c.iou_threshold}}}};
  j["seed"] = c.seed ? Json(*c.seed) : Json(nullptr);
  for (const char* s : {"synthesis", "arpn", "head"}) j[s].erase("seed");
  return j;
}

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

template <typename T>
T parse_env_number(const char* name, const std::string& text) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<T>(v);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidConfig, std::string(name) + " must be a non-negative integer");
  }
}

int resolve_workers(const Globals& g) {
  int w = 1;
  if (auto e = env("DETCID_WORKERS")) w = parse_env_number<int>("DETCID_WORKERS", *e);
  if (g.workers) w = *g.workers;
  if (w < 1) throw Error(ErrorCode::kInvalidConfig, "workers must be >= 1");
  return w;
}

/// Flag, then environment, then config; otherwise draw one and report it.
RunConfig resolve(const Globals& g) {
  RunConfig c = g.config.empty() ? preset_config("default") : load_run_config(g.config);
  std::optional<std::uint64_t> s = c.seed;
  if (auto e = env("DETCID_SEED")) s = parse_env_number<std::uint64_t>("DETCID_SEED", *e);
  if (g.seed) s = g.seed;
  if (!s) {
    std::random_device rd;
    s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    std::cerr << "seed: " << *s << " (drawn)\n";
  }
  c.apply_seed(*s);
  return c;
}

std::string dump(const Json& j) { return j.dump() + "\n"; }

std::vector<synthesis::AnnotatedImage> load_pool(const RunConfig& c) {
  if (!c.pool_dir.empty()) return dataset::load_dataset(c.pool_dir);
  return synthesis::make_toy_pool(c.toy_pool);
}

int cmd_synth(const Globals& g, const fs::path& out, std::optional<int> count) {
  RunConfig c = resolve(g);
  if (count) c.count = *count;
  if (c.count < 1) throw Error(ErrorCode::kInvalidConfig, "--count must be >= 1");
  const auto pool = load_pool(c);
  dataset::synthesize_dataset(pool, c.synthesis, c.count, out, resolve_workers(g), to_json(c));
  std::cout << (out / "manifest.json").string() << "\n";
  return kOk;
}

template <typename State>
void save_checkpoint(const fs::path& out, const std::string& stem, const State& st,
                     const std::string& csv, const Json& echo) {
  Json j = to_json(st);
  j["run_config"] = echo;
  write_file_atomic(out / (stem + ".json"), dump(j));
  write_file_atomic(out / (stem + "_losses.csv"), csv);
}

int cmd_train_arpn(const Globals& g, const fs::path& data, const fs::path& out,
                   std::optional<int> steps, const std::string& resume, int every) {
  RunConfig c = resolve(g);
  if (steps) c.arpn.steps = *steps;
  c.arpn.validate();
  const auto samples = arpn::prepare_samples(dataset::load_dataset(data), c.arpn.wall_width);
  arpn::ArpnState st = resume.empty()
                           ? arpn::init_arpn(samples, c.arpn)
                           : arpn::arpn_state_from_json(parse_json_text(read_file(resume), resume));
  const int target = steps ? *steps : (resume.empty() ? c.arpn.steps : st.cfg.steps);
  st.cfg.steps = target;
  c.arpn = st.cfg;
  const Json echo = to_json(c);
  try {
    while (st.step < target) {
      const int chunk = every > 0 ? std::min(every, target - st.step) : target - st.step;
      arpn::train_arpn_steps(st, samples, chunk);
      if (st.step < target) save_checkpoint(out, "arpn", st, arpn::losses_csv(st.losses), echo);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDivergence) save_checkpoint(out, "arpn", st, arpn::losses_csv(st.losses), echo);
    throw;
  }
  save_checkpoint(out, "arpn", st, arpn::losses_csv(st.losses), echo);
  std::cout << (out / "arpn.json").string() << "\n";
  return kOk;
}

arpn::ArpnState load_arpn(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kInvalidConfig, "ARPN checkpoint not found: " + path.string());
  return arpn::arpn_state_from_json(parse_json_text(read_file(path), path.string()));
}

detection::HeadState load_head(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kInvalidConfig, "head checkpoint not found: " + path.string());
  return detection::head_state_from_json(parse_json_text(read_file(path), path.string()));
}

int cmd_train_head(const Globals& g, const fs::path& data, const fs::path& arpn_path,
                   const fs::path& out, std::optional<int> steps, const std::string& resume,
                   int every) {
  RunConfig c = resolve(g);
  if (steps) c.head.steps = *steps;
  c.head.validate();
  const arpn::ArpnState a = load_arpn(arpn_path);
  const auto images = dataset::load_dataset(data);
  const int workers = resolve_workers(g);

  std::optional<detection::HeadState> st;
  std::vector<detection::HeadSample> samples;
  if (resume.empty()) {
    detection::DetectionConfig dc = c.detection;
    samples = detection::prepare_head_samples(images, a.segmenter, dc, c.head.match_threshold, workers);
    st = detection::init_head(dc, c.head);
  } else {
    st = load_head(resume);
    detection::DetectionConfig dc = st->model.cfg;
    samples = detection::prepare_head_samples(images, a.segmenter, dc, st->train.match_threshold, workers);
  }
  const int target = steps ? *steps : (resume.empty() ? c.head.steps : st->train.steps);
  st->train.steps = target;
  c.head = st->train;
  c.detection = st->model.cfg;
  const Json echo = to_json(c);
  try {
    while (st->step < target) {
      const int chunk = every > 0 ? std::min(every, target - st->step) : target - st->step;
      detection::train_head_steps(*st, samples, chunk);
      if (st->step < target) save_checkpoint(out, "head", *st, detection::head_losses_csv(st->losses), echo);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDivergence) {
      save_checkpoint(out, "head", *st, detection::head_losses_csv(st->losses), echo);
    }
    throw;
  }
  save_checkpoint(out, "head", *st, detection::head_losses_csv(st->losses), echo);
  std::cout << (out / "head.json").string() << "\n";
  return kOk;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  const fs::path root = fs::is_directory(dir / "images") ? dir / "images" : dir;
  if (!fs::is_directory(root)) throw Error(ErrorCode::kIo, "image directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  const auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char ch) { return std::isdigit(ch); });
  };
  std::sort(out.begin(), out.end(), [&](const fs::path& a, const fs::path& b) {
    const std::string sa = a.stem().string(), sb = b.stem().string();
    const bool na = numeric(sa), nb = numeric(sb);
    if (na != nb) return na;
    if (na && sa.size() != sb.size()) return sa.size() < sb.size();
    return sa < sb;
  });
  return out;
}

int cmd_detect(const Globals& g, const fs::path& weights, const std::string& image,
               const std::string& dir, const fs::path& out) {
  if (image.empty() == dir.empty()) throw Error(ErrorCode::kInvalidConfig, "detect: give exactly one of --image or --dir");
  const arpn::ArpnState a = load_arpn(weights / "arpn.json");
  const detection::HeadState h = load_head(weights / "head.json");
  const std::vector<fs::path> images = image.empty() ? list_images(dir) : std::vector<fs::path>{image};
  const int workers = resolve_workers(g);

  std::vector<std::string> errors(images.size());
  dataset::parallel_for(static_cast<int>(images.size()), workers, [&](int i) {
    try {
      const GrayImage img = core::read_gray_png(images[i]);
      const auto dets = detection::detect(img, a.segmenter, h.model);
      write_file_atomic(out / (images[i].stem().string() + ".json"),
                        dump(detection::detections_to_json(dets, img.rows(), img.cols())));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  int failed = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (errors[i].empty()) continue;
    if (failed++ == 0) std::cerr << "failed images:\n";
    std::cerr << "  " << images[i].string() << ": " << errors[i] << "\n";
  }
  std::cerr << (images.size() - failed) << "/" << images.size() << " images processed\n";
  if (failed == 0) return kOk;
  return failed == static_cast<int>(images.size()) ? kIoError : kPartial;
}

int cmd_eval(const Globals& g, const fs::path& pred, const fs::path& gt, const fs::path& report) {
  RunConfig c = g.config.empty() ? preset_config("default") : load_run_config(g.config);
  const auto r = evaluation::evaluate(pred, gt, c.iou_threshold, resolve_workers(g));
  Json j = evaluation::to_json(r);
  write_file_atomic(report, j.dump(2) + "\n");
  fs::path csv = report;
  csv.replace_extension(".csv");
  write_file_atomic(csv, evaluation::to_csv(r));
  char line[160];
  std::snprintf(line, sizeof line, "overall mAP %.3f Dice %.3f (%d images)\n", r.map.value_or(0.0),
                r.dice.value_or(0.0), r.images);
  std::cout << line;
  if (!r.missing_predictions.empty()) {
    std::cerr << r.missing_predictions.size() << " ground-truth images had no prediction file\n";
  }
  return kOk;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kInvalidConfig: return kUsage;
    case ErrorCode::kIo:
    case ErrorCode::kParse: return kIoError;
    case ErrorCode::kDivergence: return kDiverged;
    case ErrorCode::kEmptyEvaluation: return kEmptyEval;
    default: return kFailure;
  }
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Synthetic cell data, adversarial proposals and mask detection"};
  app.require_subcommand(1);
  Globals g;
  int workers = 0;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "JSON run configuration");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "Synthesize an annotated dataset");
  std::string out;
  int count = 0;
  add_common(synth);
  synth->add_option("--out", out, "Dataset directory")->required();
  synth->add_option("--count", count, "Number of images")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "Run seed");

  auto* tarpn = app.add_subcommand("train-arpn", "Train the segmenter and discriminator");
  std::string data, resume;
  int steps = 0, every = 0;
  add_common(tarpn);
  tarpn->add_option("--data", data, "Training dataset directory")->required();
  tarpn->add_option("--out", out, "Output directory")->required();
  tarpn->add_option("--steps", steps, "Total steps (overrides the config)")->check(CLI::NonNegativeNumber);
  tarpn->add_option("--resume", resume, "Checkpoint to continue from");
  tarpn->add_option("--checkpoint-every", every, "Write a checkpoint every N steps")->check(CLI::NonNegativeNumber);
  tarpn->add_option("--seed", seed, "Run seed");

  auto* thead = app.add_subcommand("train-head", "Train the backbone and detection head");
  std::string arpn_path;
  add_common(thead);
  thead->add_option("--data", data, "Training dataset directory")->required();
  thead->add_option("--arpn", arpn_path, "ARPN checkpoint")->required();
  thead->add_option("--out", out, "Output directory")->required();
  thead->add_option("--steps", steps, "Total steps (overrides the config)")->check(CLI::NonNegativeNumber);
  thead->add_option("--resume", resume, "Checkpoint to continue from");
  thead->add_option("--checkpoint-every", every, "Write a checkpoint every N steps")->check(CLI::NonNegativeNumber);
  thead->add_option("--seed", seed, "Run seed");

  auto* det = app.add_subcommand("detect", "Detect cells in images");
  std::string weights, image, dir;
  add_common(det);
  det->add_option("--weights", weights, "Directory holding arpn.json and head.json")->required();
  det->add_option("--image", image, "Single PNG image");
  det->add_option("--dir", dir, "Directory of PNG images (or a dataset directory)");
  det->add_option("--out", out, "Output directory for per-image JSON")->required();

  auto* ev = app.add_subcommand("eval", "Score detections against ground truth");
  std::string pred, gt, report;
  add_common(ev);
  ev->add_option("--pred", pred, "Prediction directory")->required();
  ev->add_option("--gt", gt, "Ground-truth dataset directory")->required();
  ev->add_option("--report", report, "Report JSON path (a CSV is written next to it)")->required();

  auto* show = app.add_subcommand("config", "Print a configuration with every default filled in");
  std::string preset = "default";
  show->add_option("--preset", preset, "default or toy");

  std::vector<const char*> argv;
  argv.push_back("detcid");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  auto opt_int = [](CLI::App* sub, const char* name, int v) {
    return sub->count(name) ? std::optional<int>(v) : std::nullopt;
  };
  try {
    for (CLI::App* sub : app.get_subcommands()) {
      if (sub->get_option_no_throw("--workers") && sub->count("--workers")) g.workers = workers;
      if (sub->get_option_no_throw("--seed") && sub->count("--seed")) g.seed = seed;
    }
    if (synth->parsed()) return cmd_synth(g, out, opt_int(synth, "--count", count));
    if (tarpn->parsed()) return cmd_train_arpn(g, data, out, opt_int(tarpn, "--steps", steps), resume, every);
    if (thead->parsed()) {
      return cmd_train_head(g, data, arpn_path, out, opt_int(thead, "--steps", steps), resume, every);
    }
    if (det->parsed()) return cmd_detect(g, weights, image, dir, out);
    if (ev->parsed()) return cmd_eval(g, pred, gt, report);
    if (show->parsed()) {
      std::cout << to_json(preset_config(preset)).dump(2) << "\n";
      return kOk;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace detcid::cli
