#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "detcid/arpn.hpp"
#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "detcid/detection.hpp"
#include "detcid/evaluation.hpp"
#include "detcid/synthesis.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace detcid;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kSegClosedTol = 1e-9;
constexpr double kDiscClosedTol = 1e-12;
constexpr int kNmsSets = 200;
constexpr int kNmsMaxDetections = 10;
constexpr int kSynthImages = 100;
constexpr double kAngleSlackDegrees = 3.0;
constexpr double kCentroidSlackPx = 1.0;
constexpr double kSynthBudgetSeconds = 300.0;
constexpr int kToyTrain = 200;
constexpr int kToyTest = 40;
constexpr double kToyMinMap = 0.5;
constexpr double kToyMinDice = 0.7;
constexpr double kToyBudgetSeconds = 15.0 * 60.0;
constexpr double kApHandTol = 1e-9;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " FAILED[" << what << "]";
    }
  }
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int quiet_cli(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = cli::run(args);
  std::cout.rdbuf(old);
  return code;
}

nn::Tensor random_tensor(Rng& rng, int c, int h, int w, double spread) {
  nn::Tensor t(c, h, w);
  for (double& v : t.data) v = spread * rng.normal();
  return t;
}

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst_seg = 0, worst_disc = 0, worst_det = 0;
  for (int i = 0; i < 20; ++i) {
    arpn::LabelMap m = nn::softmax_channels(random_tensor(rng, 3, 8, 8, 1.0));
    arpn::LabelMap gt(3, 8, 8, 0.0);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) gt.at(static_cast<int>(rng.uniform_int(0, 2)), y, x) = 1.0;
    std::vector<double> d{rng.normal()};
    const arpn::ClassWeights w{rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)};
    const auto g = arpn::segmenter_loss_grad(m, gt, d[0], w);
    auto f = [&] { return arpn::segmenter_loss(m, gt, d[0], w); };
    worst_seg = std::max({worst_seg, testing::max_fd_error(m.data, g.grad_map.data, f), testing::max_fd_error(d, {g.grad_logit}, f)});

    std::vector<double> ab{3.0 * rng.normal(), 3.0 * rng.normal()};
    const auto dg = arpn::discriminator_loss_grad(ab[0], ab[1]);
    worst_disc = std::max(worst_disc, testing::max_fd_error(ab, {dg.grad_gt, dg.grad_gen}, [&] { return arpn::discriminator_loss(ab[0], ab[1]); }));

    detection::HeadOutput out;
    out.p_logit = 2.0 * rng.normal();
    for (double& v : out.r) v = 2.0 * rng.normal();
    out.class_logits = {rng.normal(), rng.normal()};
    out.mask_logits = random_tensor(rng, 1, 4, 4, 2.0);
    detection::LossTarget t;
    t.matched = i % 4 != 0;
    if (t.matched) {
      for (double& v : t.r) v = rng.normal();
      t.mask = InstanceMask(4, 4, 0);
      for (auto& v : t.mask.storage()) v = rng.uniform() < 0.5;
      t.cls = static_cast<int>(rng.uniform_int(0, 1));
    }
    const auto lg = detection::detection_loss_grad(out, t, 1.0);
    const double direct = detection::detection_loss(out.p(), out.r, out.mask_probs(), t);
    o.require(std::abs(direct - lg.value) <= 1e-9 * std::max(1.0, std::abs(direct)), "detection_loss value");
    auto lf = [&] { return detection::detection_loss_grad(out, t, 1.0).total(); };
    std::vector<double> p{out.p_logit};
    std::vector<double> r(out.r.begin(), out.r.end());
    worst_det = std::max({worst_det,
                          testing::max_fd_error(p, {lg.grad.p_logit}, [&] { out.p_logit = p[0]; return lf(); }),
                          testing::max_fd_error(r, std::vector<double>(lg.grad.r.begin(), lg.grad.r.end()),
                                                [&] { std::copy(r.begin(), r.end(), out.r.begin()); return lf(); }),
                          testing::max_fd_error(out.class_logits, lg.grad.class_logits, lf),
                          testing::max_fd_error(out.mask_logits.data, lg.grad.mask_logits.data, lf)});
  }
  const double secs = seconds_since(t0);
  o.detail << "max rel error seg " << worst_seg << " disc " << worst_disc << " det " << worst_det << " (" << secs << " s)";
  o.require(worst_seg <= kGradRelTol, "segmenter_loss");
  o.require(worst_disc <= kGradRelTol, "discriminator_loss");
  o.require(worst_det <= kGradRelTol, "detection_loss");
  o.require(secs < kGradBudgetSeconds, "runtime");
  return o;
}

Outcome closed_forms() {
  Outcome o;
  const arpn::LabelMap uniform(3, 6, 6, 1.0 / 3.0);
  arpn::LabelMap gt(3, 6, 6, 0.0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) gt.at((x + y) % 3, y, x) = 1.0;
  const double seg = arpn::segmenter_loss(uniform, gt, 0.0, {1.0, 1.0, 1.0});
  const double disc = arpn::discriminator_loss(0.0, 0.0);
  const double seg_err = std::abs(seg - (std::log(3.0) + std::log(2.0)));
  const double disc_err = std::abs(disc - 2.0 * std::log(2.0));
  o.detail << "segmenter |err| " << seg_err << " discriminator |err| " << disc_err;
  o.require(seg_err <= kSegClosedTol, "segmenter");
  o.require(disc_err <= kDiscClosedTol, "discriminator");
  return o;
}

Outcome nms_oracle() {
  Outcome o;
  Rng rng(303);
  int exact = 0, pairs = 0, bad_pairs = 0;
  for (int s = 0; s < kNmsSets; ++s) {
    const int n = static_cast<int>(rng.uniform_int(1, kNmsMaxDetections));
    std::vector<detection::Detection> dets;
    for (int i = 0; i < n; ++i) dets.push_back(testing::random_detection(rng, 24, 6));
    const double tau = s % 2 ? 0.5 : rng.uniform(0.1, 1.0);
    exact += testing::same_detections(detection::mask_nms(dets, tau, 24, 24), testing::nms_oracle(dets, tau, 24, 24));
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const InstanceMask a = detection::paste_mask(dets[i], 24, 24), b = detection::paste_mask(dets[j], 24, 24);
        ++pairs;
        bad_pairs += detection::modified_iou(a, b) < core::mask_iou(a, b);
      }
    }
  }
  o.detail << exact << "/" << kNmsSets << " sets equal the oracle; modified_iou < mask_iou on " << bad_pairs << "/" << pairs << " pairs";
  o.require(exact == kNmsSets, "oracle");
  o.require(bad_pairs == 0, "modified_iou");
  return o;
}

double angle_gap(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 180.0);
  return std::min(d, 180.0 - d);
}

Outcome synthesis_invariants(const fs::path& scratch) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
  synthesis::SynthesisConfig cfg;
  cfg.seed = 404;
  int count_ok = 0, masks_ok = 0, crossings = 0, crossing_ok = 0;
  double worst_cross = 0.0;
  for (int i = 0; i < kSynthImages; ++i) {
    const auto s = synthesis::synthesize_indexed(pool, cfg, static_cast<std::uint64_t>(i));
    const auto& p = s.provenance;
    count_ok += static_cast<int>(s.truth.size()) == p.isolated + 2 * p.touching + 2 * p.crossing - p.skipped();
    bool all = true;
    for (const auto& m : s.truth.masks) all = all && m.rows() == cfg.rows && m.cols() == cfg.cols && !core::is_empty(m);
    masks_ok += all;
    const auto& pl = p.placements;
    for (std::size_t k = 0; k + 1 < pl.size(); ++k) {
      if (pl[k].kind != synthesis::PlacementKind::kCrossingFirst || pl[k].skipped || pl[k + 1].skipped) continue;
      ++crossings;
      const double gap = angle_gap(core::major_axis_angle(s.truth.masks[pl[k].mask_index]),
                                   core::major_axis_angle(s.truth.masks[pl[k + 1].mask_index]));
      worst_cross = std::max(worst_cross, std::abs(gap - 90.0));
      crossing_ok += std::abs(gap - 90.0) <= cfg.max_orientation_change + kAngleSlackDegrees;
    }
  }

  synthesis::SynthesisConfig quiet = cfg;
  quiet.isolated = {0, 0};
  quiet.crossing = {0, 0};
  quiet.shear_base = quiet.shear_scale = 0.0;
  quiet.max_vertical_shift = quiet.max_horizontal_shift = quiet.max_orientation_change = 0.0;
  int touching = 0, touching_ok = 0;
  for (int i = 0; i < kSynthImages / 5; ++i) {
    const auto s = synthesis::synthesize_indexed(pool, quiet, static_cast<std::uint64_t>(i));
    const auto& pl = s.provenance.placements;
    for (std::size_t k = 0; k + 1 < pl.size(); k += 2) {
      const auto& second = pl[k + 1];
      if (pl[k].skipped || second.skipped) continue;
      if (std::hypot(second.placed.x - second.requested.x, second.placed.y - second.requested.y) > 1e-9) continue;
      ++touching;
      const double omega = second.partner_extent;
      const Point c1 = core::centroid(s.truth.masks[pl[k].mask_index]);
      const Point c2 = core::centroid(s.truth.masks[second.mask_index]);
      const double dx = std::abs(c2.x - c1.x);
      touching_ok += second.partner_offset.y == 0.0 && std::abs(second.partner_offset.x) >= 0.5 * omega &&
                     std::abs(second.partner_offset.x) <= omega && dx >= 0.5 * omega - kCentroidSlackPx &&
                     dx <= omega + kCentroidSlackPx && std::abs(c2.y - c1.y) <= kCentroidSlackPx;
    }
  }

  synthesis::SynthesisConfig small = cfg;
  const fs::path a = scratch / "regen_a", b = scratch / "regen_b";
  dataset::synthesize_dataset(pool, small, 10, a, 1);
  dataset::synthesize_dataset(pool, small, 10, b, 2);
  const bool identical = testing::tree_hash(a) == testing::tree_hash(b) && testing::tree_contents(a) == testing::tree_contents(b);

  const double secs = seconds_since(t0);
  o.detail << "counts " << count_ok << "/" << kSynthImages << ", masks " << masks_ok << "/" << kSynthImages << ", crossing "
           << crossing_ok << "/" << crossings << " (worst |gap-90| " << worst_cross << "), touching " << touching_ok << "/"
           << touching << ", regeneration " << (identical ? "identical" : "differs") << " (" << secs << " s)";
  o.require(count_ok == kSynthImages, "mask count");
  o.require(masks_ok == kSynthImages, "in-bounds");
  o.require(crossings > 0 && crossing_ok == crossings, "crossing angle");
  o.require(touching > 0 && touching_ok == touching, "touching offset");
  o.require(identical, "regeneration");
  o.require(secs < kSynthBudgetSeconds, "runtime");
  return o;
}

Outcome quilting() {
  Outcome o;
  bool constant = true, sizes = true;
  Rng rng(505);
  for (const auto& [r, c] : std::vector<std::pair<int, int>>{{53, 71}, {64, 64}, {100, 37}, {411, 711}}) {
    const GrayImage out = synthesis::quilt_texture(GrayImage(40, 40, 0.42), r, c, 16, 4, rng);
    sizes = sizes && out.rows() == r && out.cols() == c;
    for (double v : out.storage()) constant = constant && v == 0.42;
  }
  GrayImage stripes(48, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) stripes(y, x) = (x / 5) % 2 ? 0.8 : 0.2;
  int better = 0;
  const int trials = 10;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    Rng qa(seed), qb(seed);
    const auto q = synthesis::quilt_texture_with_stats(stripes, 100, 100, 24, 8, qa);
    better += q.seam_error <= testing::straight_seam_baseline(stripes, 100, 100, 24, 8, qb);
  }
  o.detail << "constant " << (constant ? "yes" : "no") << ", exact size " << (sizes ? "yes" : "no") << ", seam <= baseline "
           << better << "/" << trials;
  o.require(constant, "constant");
  o.require(sizes, "size");
  o.require(better == trials, "seam");
  return o;
}

Outcome toy_end_to_end(const fs::path& scratch) {
  Outcome o;
  const fs::path cfg = scratch / "toy.json";
  std::ofstream(cfg) << R"({"preset": "toy"})";
  const std::string c = cfg.string();
  const fs::path train = scratch / "train", test = scratch / "test", weights = scratch / "weights", pred = scratch / "pred";
  o.require(quiet_cli({"synth", "--config", c, "--count", std::to_string(kToyTrain), "--seed", "1", "--out", train.string()}) == 0, "synth train");
  o.require(quiet_cli({"synth", "--config", c, "--count", std::to_string(kToyTest), "--seed", "2", "--out", test.string()}) == 0, "synth test");
  const auto t0 = Clock::now();
  o.require(quiet_cli({"train-arpn", "--config", c, "--data", train.string(), "--out", weights.string(), "--seed", "1"}) == 0, "train-arpn");
  o.require(quiet_cli({"train-head", "--config", c, "--data", train.string(), "--arpn", (weights / "arpn.json").string(), "--out",
                       weights.string(), "--seed", "1"}) == 0,
            "train-head");
  const double train_secs = seconds_since(t0);
  o.require(quiet_cli({"detect", "--config", c, "--weights", weights.string(), "--dir", test.string(), "--out", pred.string()}) == 0, "detect");
  if (!o.pass) return o;
  const auto report = evaluation::evaluate(pred, test, 0.5);
  const double map = report.map.value_or(0.0), dice = report.dice.value_or(0.0);
  o.detail << "mAP " << map << " Dice " << dice << " on " << report.images << " test images, training " << train_secs << " s";

  // detect() examples on the trained toy models
  const auto arpn_state = arpn::arpn_state_from_json(Json::parse(testing::slurp(weights / "arpn.json")));
  const auto head_state = detection::head_state_from_json(Json::parse(testing::slurp(weights / "head.json")));
  const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
  auto scene = synthesis::toy_synthesis_config();
  scene.seed = 77;
  scene.touching = scene.crossing = {0, 0};
  int blank_empty = 0, single_ok = 0;
  const int scenes = 10;
  for (int i = 0; i < scenes; ++i) {
    scene.isolated = {0, 0};
    const auto blank = synthesis::synthesize_indexed(pool, scene, static_cast<std::uint64_t>(i));
    blank_empty += detection::detect(blank.image, arpn_state.segmenter, head_state.model).empty();
    scene.isolated = {1, 1};
    const auto one = synthesis::synthesize_indexed(pool, scene, static_cast<std::uint64_t>(i));
    const auto dets = detection::detect(one.image, arpn_state.segmenter, head_state.model);
    if (dets.size() == 1 && one.truth.size() == 1) {
      single_ok += evaluation::dice(detection::paste_mask(dets[0], 64, 64), one.truth.masks[0]) >= kToyMinDice;
    }
  }
  o.detail << "; detect examples: blank -> empty " << blank_empty << "/" << scenes << ", single cell -> one detection with Dice >= "
           << kToyMinDice << " " << single_ok << "/" << scenes;
  o.require(map >= kToyMinMap, "mAP");
  o.require(dice >= kToyMinDice, "Dice");
  o.require(train_secs <= kToyBudgetSeconds, "training time");
  return o;
}

Outcome metric_fixtures(const fs::path& scratch) {
  Outcome o;
  const double ap = *evaluation::average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
  const double ap_err = std::abs(ap - 5.0 / 6.0);
  o.require(ap_err <= kApHandTol, "AP hand case");

  const InstanceMask a = testing::rect_mask(4, 8, 0, 0, 2, 4);
  const InstanceMask b = testing::rect_mask(4, 8, 1, 0, 2, 4);
  const bool dice_ok = evaluation::dice(a, a) == 1.0 && evaluation::dice(a, testing::rect_mask(4, 8, 2, 4, 2, 4)) == 0.0 &&
                       evaluation::dice(a, b) == 0.5;
  o.require(dice_ok, "Dice hand cases");

  const std::vector<double> s{1.0, 2.5, 3.0, 7.25, 4.0};
  std::vector<double> s2 = s;
  for (double& v : s2) v += 2.0;
  const auto fwd = evaluation::bland_altman(s, s2);
  const auto rev = evaluation::bland_altman(s2, s);
  const bool ba_ok = rev.bias == 2.0 && rev.loa_low == 2.0 && rev.loa_high == 2.0 && rev.r2 && *rev.r2 == 1.0 && fwd.bias == -2.0 &&
                     fwd.r2 && *fwd.r2 == 1.0;
  o.require(ba_ok, "bland_altman offset");

  const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
  auto cfg = synthesis::toy_synthesis_config();
  cfg.seed = 707;
  const fs::path gt = scratch / "metric_gt";
  dataset::synthesize_dataset(pool, cfg, 8, gt);
  const auto self = evaluation::evaluate(gt, gt);
  const bool self_ok = self.map && *self.map == 1.0 && self.dice && *self.dice == 1.0;
  o.require(self_ok, "evaluate(pred = gt)");
  o.detail << "AP " << ap << " (|err| " << ap_err << "), Dice cases " << (dice_ok ? "exact" : "wrong") << ", bland_altman(a+2, a) bias "
           << rev.bias << " r2 " << rev.r2.value_or(-1) << " [bland_altman(a, a+2) bias " << fwd.bias << "], evaluate(pred = gt) mAP "
           << self.map.value_or(-1) << " Dice " << self.dice.value_or(-1);
  return o;
}

Outcome determinism(const fs::path& scratch) {
  Outcome o;
  const fs::path cfg = scratch / "det.json";
  std::ofstream(cfg) << R"({"preset": "toy", "count": 6,
    "arpn": {"base_width": 8, "disc_width": 4, "patch_size": 32, "batch_size": 2, "steps": 20},
    "detection": {"backbone_width": 8, "feature_width": 8, "score_threshold": 0.1},
    "head": {"steps": 20}})";
  const std::string c = cfg.string();
  std::vector<std::uint64_t> hashes[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path root = scratch / ("run" + std::to_string(run));
    const std::string data = (root / "data").string(), w = (root / "weights").string(), pred = (root / "pred").string();
    o.require(quiet_cli({"synth", "--config", c, "--seed", "9", "--out", data}) == 0, "synth");
    o.require(quiet_cli({"train-arpn", "--config", c, "--seed", "9", "--data", data, "--out", w}) == 0, "train-arpn");
    o.require(quiet_cli({"train-head", "--config", c, "--seed", "9", "--data", data, "--arpn", w + "/arpn.json", "--out", w}) == 0, "train-head");
    o.require(quiet_cli({"detect", "--config", c, "--weights", w, "--dir", data, "--out", pred}) == 0, "detect");
    o.require(quiet_cli({"eval", "--config", c, "--pred", pred, "--gt", data, "--report", (root / "report" / "eval.json").string()}) == 0, "eval");
    for (const char* part : {"data", "weights", "pred", "report"}) hashes[run].push_back(testing::tree_hash(root / part));
  }
  const char* names[] = {"synth", "train", "detect", "eval"};
  for (int i = 0; i < 4; ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s %016llx%s", names[i], static_cast<unsigned long long>(hashes[0][i]),
                  hashes[0][i] == hashes[1][i] ? "" : " (differs)");
    o.detail << (i ? ", " : "") << buf;
    o.require(hashes[0][i] == hashes[1][i], names[i]);
  }
  return o;
}

}  // namespace

int main() {
  testing::TempDir scratch("acceptance");
  struct Entry {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> entries{
      {1, "gradient checks", gradient_checks},
      {2, "closed-form losses", closed_forms},
      {3, "NMS oracle", nms_oracle},
      {4, "synthesis invariants", [&] { return synthesis_invariants(scratch.path()); }},
      {5, "quilting", quilting},
      {6, "toy end-to-end", [&] { return toy_end_to_end(scratch.path()); }},
      {7, "metric fixtures", [&] { return metric_fixtures(scratch.path()); }},
      {8, "determinism", [&] { return determinism(scratch.path()); }},
  };
  int failed = 0;
  for (const auto& e : entries) {
    Outcome o;
    try {
      o = e.run();
    } catch (const std::exception& ex) {
      o.pass = false;
      o.detail << "exception: " << ex.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << e.id << " " << e.name << ": " << o.detail.str() << std::endl;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << (8 - failed) << "/8" << std::endl;
  return failed ? 1 : 0;
}
