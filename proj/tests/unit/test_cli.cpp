#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "test_support.hpp"

using namespace detcid;
using detcid::testing::TempDir;
using detcid::testing::tree_contents;
namespace fs = std::filesystem;

namespace {

struct Captured {
  int code = 0;
  std::string out;
  std::string err;
};

Captured run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Captured c;
  c.code = cli::run(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  c.out = out.str();
  c.err = err.str();
  return c;
}

/// Toy preset shrunk so that every command finishes in a few seconds.
fs::path write_small_config(const TempDir& dir, Json extra = Json::object()) {
  Json j = {{"preset", "toy"},
            {"count", 3},
            {"arpn", {{"base_width", 4}, {"disc_width", 4}, {"patch_size", 32}, {"batch_size", 1}, {"steps", 3}}},
            {"detection", {{"backbone_width", 4}, {"feature_width", 4}, {"grid", 6}, {"score_threshold", 0.0}}},
            {"head", {{"steps", 3}, {"rois_per_step", 8}}}};
  j.merge_patch(extra);
  const fs::path p = dir / "run.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

Json read_json(const fs::path& p) { return Json::parse(testing::slurp(p)); }

int csv_rows(const fs::path& p) {
  std::istringstream in(testing::slurp(p));
  std::string line;
  int n = -1;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

/// Small dataset plus trained weights shared by the detect and eval cases.
struct Trained {
  TempDir dir{"cli_trained"};
  fs::path cfg, data, weights;
  Trained() {
    cfg = write_small_config(dir);
    data = dir / "data";
    weights = dir / "weights";
    REQUIRE(run_cli({"synth", "--config", cfg.string(), "--out", data.string(), "--seed", "7"}).code == 0);
    REQUIRE(run_cli({"train-arpn", "--config", cfg.string(), "--data", data.string(), "--out", weights.string(), "--seed", "7"}).code == 0);
    REQUIRE(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", (weights / "arpn.json").string(),
                     "--out", weights.string(), "--seed", "7"})
                .code == 0);
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth is reproducible from the seed") {
    TempDir dir("cli_synth");
    const fs::path cfg = write_small_config(dir);
    const auto a = dir / "a", b = dir / "b", c = dir / "c";
    const Captured r = run_cli({"synth", "--config", cfg.string(), "--count", "3", "--seed", "7", "--out", a.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("manifest.json") != std::string::npos);
    CHECK(run_cli({"synth", "--config", cfg.string(), "--count", "3", "--seed", "7", "--out", b.string(), "--workers", "2"}).code == 0);
    CHECK(tree_contents(a) == tree_contents(b));
    CHECK(dataset::list_ids(a).size() == 3);
    CHECK(run_cli({"synth", "--config", cfg.string(), "--count", "3", "--seed", "8", "--out", c.string()}).code == 0);
    CHECK(tree_contents(a) != tree_contents(c));

    ::setenv("DETCID_SEED", "7", 1);
    const auto d = dir / "d";
    const int code = run_cli({"synth", "--config", cfg.string(), "--count", "3", "--out", d.string()}).code;
    ::unsetenv("DETCID_SEED");
    CHECK(code == 0);
    CHECK(tree_contents(a) == tree_contents(d));
  }

  TEST_CASE("default configuration renders full-size frames") {
    TempDir dir("cli_default");
    const auto out = dir / "ds";
    REQUIRE(run_cli({"synth", "--count", "1", "--seed", "2", "--out", out.string()}).code == 0);
    const auto sample = dataset::load_sample(out, dataset::list_ids(out).front());
    CHECK(sample.image.rows() == 411);
    CHECK(sample.image.cols() == 711);
  }

  TEST_CASE("usage and configuration errors") {
    TempDir dir("cli_errors");
    CHECK(run_cli({"synth", "--config", (dir / "missing.json").string(), "--out", (dir / "x").string()}).code == cli::kUsage);
    CHECK(run_cli({"frobnicate"}).code == cli::kUsage);
    CHECK(run_cli({}).code == cli::kUsage);
    CHECK(run_cli({"synth"}).code == cli::kUsage);
    const fs::path seeded = write_small_config(dir, {{"synthesis", {{"seed", 3}}}});
    CHECK(run_cli({"synth", "--config", seeded.string(), "--out", (dir / "y").string()}).code == cli::kUsage);
    std::ofstream(dir / "unknown.json") << R"({"preset": "toy", "bogus": 1})";
    CHECK(run_cli({"synth", "--config", (dir / "unknown.json").string(), "--out", (dir / "z").string()}).code == cli::kUsage);
    std::ofstream(dir / "broken.json") << "{\"preset\": ";
    CHECK(run_cli({"synth", "--config", (dir / "broken.json").string(), "--out", (dir / "w").string()}).code == cli::kIoError);
    const Captured shown = run_cli({"config", "--preset", "toy"});
    CHECK(shown.code == 0);
    CHECK(Json::parse(shown.out)["synthesis"]["rows"] == 64);
    CHECK(run_cli({"config", "--preset", "huge"}).code == cli::kUsage);
  }

  TEST_CASE("run configuration round trips") {
    cli::RunConfig c = cli::preset_config("toy");
    c.seed = 11;
    c.count = 4;
    const cli::RunConfig back = cli::parse_run_config(cli::to_json(c), ".");
    CHECK(cli::to_json(back) == cli::to_json(c));
  }

  TEST_CASE("training checkpoints: zero steps, resume and loss logs") {
    TempDir dir("cli_train");
    const fs::path cfg = write_small_config(dir);
    const auto data = dir / "data";
    REQUIRE(run_cli({"synth", "--config", cfg.string(), "--out", data.string(), "--seed", "3"}).code == 0);

    const auto zero = dir / "zero";
    REQUIRE(run_cli({"train-arpn", "--config", cfg.string(), "--data", data.string(), "--out", zero.string(), "--steps", "0", "--seed", "3"}).code == 0);
    cli::RunConfig rc = cli::load_run_config(cfg);
    rc.apply_seed(3);
    rc.arpn.steps = 0;
    const auto samples = arpn::prepare_samples(dataset::load_dataset(data), rc.arpn.wall_width);
    Json saved = read_json(zero / "arpn.json");
    saved.erase("run_config");
    CHECK(saved == Json::parse(arpn::to_json(arpn::init_arpn(samples, rc.arpn)).dump()));

    const auto full = dir / "full", part = dir / "part";
    REQUIRE(run_cli({"train-arpn", "--config", cfg.string(), "--data", data.string(), "--out", full.string(), "--steps", "4", "--seed", "3"}).code == 0);
    REQUIRE(run_cli({"train-arpn", "--config", cfg.string(), "--data", data.string(), "--out", part.string(), "--steps", "2", "--seed", "3"}).code == 0);
    REQUIRE(run_cli({"train-arpn", "--config", cfg.string(), "--data", data.string(), "--out", part.string(), "--steps", "4",
                     "--resume", (part / "arpn.json").string(), "--seed", "3"})
                .code == 0);
    CHECK(read_json(part / "arpn.json") == read_json(full / "arpn.json"));
    CHECK(csv_rows(full / "arpn_losses.csv") == 4);
    CHECK(read_json(full / "arpn.json")["run_config"]["seed"] == 3);

    const auto hfull = dir / "hfull", hpart = dir / "hpart";
    const std::string arpn = (full / "arpn.json").string();
    REQUIRE(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", arpn, "--out", hfull.string(), "--steps", "4", "--seed", "3"}).code == 0);
    REQUIRE(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", arpn, "--out", hpart.string(), "--steps", "4",
                     "--checkpoint-every", "1", "--seed", "3"})
                .code == 0);
    CHECK(read_json(hpart / "head.json") == read_json(hfull / "head.json"));
    const auto hres = dir / "hres";
    REQUIRE(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", arpn, "--out", hres.string(), "--steps", "1", "--seed", "3"}).code == 0);
    REQUIRE(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", arpn, "--out", hres.string(), "--steps", "4",
                     "--resume", (hres / "head.json").string(), "--seed", "3"})
                .code == 0);
    CHECK(read_json(hres / "head.json") == read_json(hfull / "head.json"));
    CHECK(csv_rows(hfull / "head_losses.csv") == 4);

    CHECK(run_cli({"train-head", "--config", cfg.string(), "--data", data.string(), "--arpn", (dir / "none.json").string(), "--out", hfull.string()}).code ==
          cli::kUsage);
  }

  TEST_CASE("detect and eval") {
    Trained t;
    const auto out = t.dir / "pred";
    const Captured first = run_cli({"detect", "--config", t.cfg.string(), "--weights", t.weights.string(), "--dir", t.data.string(), "--out", out.string()});
    CHECK(first.code == 0);
    const auto files = tree_contents(out);
    CHECK(files.size() == 3);
    for (const auto& [name, bytes] : files) CHECK(Json::parse(bytes).is_array());
    const auto again = t.dir / "pred2";
    CHECK(run_cli({"detect", "--config", t.cfg.string(), "--weights", t.weights.string(), "--dir", t.data.string(), "--out", again.string()}).code == 0);
    CHECK(tree_contents(again) == files);

    const auto id = dataset::list_ids(t.data).front();
    const auto single = t.dir / "single";
    CHECK(run_cli({"detect", "--weights", t.weights.string(), "--image", (t.data / "images" / (id + ".png")).string(), "--out", single.string()}).code == 0);
    CHECK(tree_contents(single).begin()->second == files.at(id + ".json"));

    const auto mixed = t.dir / "mixed";
    fs::create_directories(mixed);
    fs::copy_file(t.data / "images" / (id + ".png"), mixed / "good.png");
    std::ofstream(mixed / "bad.png") << "not a png";
    CHECK(run_cli({"detect", "--weights", t.weights.string(), "--dir", mixed.string(), "--out", (t.dir / "mixed_out").string()}).code == cli::kPartial);
    fs::remove(mixed / "good.png");
    CHECK(run_cli({"detect", "--weights", t.weights.string(), "--dir", mixed.string(), "--out", (t.dir / "bad_out").string()}).code == cli::kIoError);
    CHECK(run_cli({"detect", "--weights", (t.dir / "nowhere").string(), "--dir", t.data.string(), "--out", (t.dir / "o").string()}).code == cli::kUsage);

    const auto report = t.dir / "report.json";
    const Captured self = run_cli({"eval", "--pred", t.data.string(), "--gt", t.data.string(), "--report", report.string()});
    CHECK(self.code == 0);
    CHECK(self.out.find("overall mAP 1.000 Dice 1.000 (3 images)") != std::string::npos);
    CHECK(read_json(report)["overall"]["map"] == 1.0);
    CHECK(fs::exists(t.dir / "report.csv"));

    const Captured scored = run_cli({"eval", "--pred", out.string(), "--gt", t.data.string(), "--report", report.string()});
    CHECK(scored.code == 0);
    CHECK(scored.out.find("overall mAP ") == 0);

    const auto empty = t.dir / "empty";
    fs::create_directories(empty);
    const Captured none = run_cli({"eval", "--pred", empty.string(), "--gt", t.data.string(), "--report", report.string()});
    CHECK(none.code == 0);
    CHECK(none.out.find("overall mAP 0.000") == 0);

    std::ofstream(empty / "elsewhere.json") << "[]";
    CHECK(run_cli({"eval", "--pred", empty.string(), "--gt", t.data.string(), "--report", report.string()}).code == cli::kEmptyEval);
  }
}
