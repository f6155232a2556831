#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "detcid/dataset.hpp"
#include "detcid/evaluation.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace detcid;
using namespace detcid::evaluation;
using detcid::testing::ap_oracle;
using detcid::testing::rect_mask;
using detcid::testing::TempDir;

namespace {

double min_area_overlap(const InstanceMask& a, const InstanceMask& b) {
  long long inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a.storage()[i] != 0;
    nb += b.storage()[i] != 0;
    inter += a.storage()[i] && b.storage()[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(std::min(na, nb));
}

InstanceMask random_box_mask(Rng& rng, int n) {
  const int h = static_cast<int>(rng.uniform_int(2, 8)), w = static_cast<int>(rng.uniform_int(2, 8));
  return rect_mask(n, n, static_cast<int>(rng.uniform_int(0, n - h)), static_cast<int>(rng.uniform_int(0, n - w)), h, w);
}

void write_predictions(const std::filesystem::path& file, const std::vector<detection::ScoredMask>& preds) {
  Json j = Json::array();
  for (const auto& p : preds) {
    const auto r = detection::rle_encode(p.mask);
    j.push_back({{"score", p.score}, {"class", to_string(p.cell_class)}, {"mask", {{"size", {r.rows, r.cols}}, {"counts", r.counts}}}});
  }
  std::ofstream(file) << j.dump();
}

std::filesystem::path make_dataset(const TempDir& dir, int count) {
  const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
  auto cfg = synthesis::toy_synthesis_config();
  cfg.seed = 5;
  dataset::synthesize_dataset(pool, cfg, count, dir.path());
  return dir.path();
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("average precision hand cases") {
    const auto ap = average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
    REQUIRE(ap.has_value());
    CHECK(*ap == doctest::Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)));
    CHECK(*ap == doctest::Approx(0.8333).epsilon(1e-4));
    CHECK(*average_precision({{0.9, true}, {0.5, true}}, 2) == 1.0);
    CHECK(*average_precision({}, 3) == 0.0);
    CHECK(!average_precision({{0.9, false}}, 0).has_value());
    // order of the input list does not matter, only scores
    CHECK(*average_precision({{0.7, true}, {0.8, false}, {0.9, true}}, 2) == doctest::Approx(*ap));
  }

  TEST_CASE("average precision matches the curve oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = static_cast<int>(rng.uniform_int(1, 15));
      std::vector<Hit> hits;
      std::vector<bool> ranked;
      long long tps = 0;
      for (int i = 0; i < n; ++i) {
        const bool tp = rng.uniform() < 0.5;
        hits.push_back({1.0 - 0.01 * i, tp});
        ranked.push_back(tp);
        tps += tp;
      }
      const long long n_truth = tps + rng.uniform_int(0, 4);
      if (n_truth == 0) continue;
      const double got = *average_precision(hits, n_truth);
      CHECK(got == doctest::Approx(ap_oracle(ranked, n_truth)).epsilon(1e-12));
      CHECK(got >= 0.0);
      CHECK(got <= 1.0);
    }
  }

  TEST_CASE("dice examples") {
    const InstanceMask a = rect_mask(4, 8, 0, 0, 2, 4);
    const InstanceMask b = rect_mask(4, 8, 1, 0, 2, 4);
    CHECK(dice(a, b) == doctest::Approx(0.5));
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, rect_mask(4, 8, 0, 4, 2, 4)) == 0.0);
    CHECK(dice(InstanceMask(4, 8, 0), InstanceMask(4, 8, 0)) == 1.0);
    CHECK(dice(a, b) == dice(b, a));
  }

  TEST_CASE("bland-altman") {
    const auto same = bland_altman({1, 2, 3, 4}, {1, 2, 3, 4});
    CHECK(same.bias == 0.0);
    CHECK(same.loa_low == 0.0);
    CHECK(same.loa_high == 0.0);
    CHECK(*same.r2 == doctest::Approx(1.0));

    const auto shifted = bland_altman({3, 4, 7, 6}, {1, 2, 5, 4});
    CHECK(shifted.bias == doctest::Approx(2.0));
    CHECK(shifted.loa_high - shifted.loa_low == doctest::Approx(0.0));
    const auto below = bland_altman({1, 2, 5, 4}, {3, 4, 7, 6});
    CHECK(below.bias == -2.0);
    CHECK(*below.r2 == 1.0);

    const auto ex = bland_altman({1, 2, 3, 4}, {1, 3, 2, 5});
    const double sd = std::sqrt(2.75 / 3.0);
    CHECK(ex.bias == doctest::Approx(-0.25));
    CHECK(ex.loa_low == doctest::Approx(-0.25 - 1.96 * sd));
    CHECK(ex.loa_high == doctest::Approx(-0.25 + 1.96 * sd));
    CHECK(*ex.r2 == doctest::Approx(30.25 / 43.75));

    CHECK(!bland_altman({2, 2, 2}, {1, 2, 3}).r2.has_value());
    try {
      bland_altman({1}, {1});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kShape);
    }
    CHECK_THROWS_AS(bland_altman({1, 2}, {1, 2, 3}), Error);
  }

  TEST_CASE("greedy matching agrees with an oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<InstanceMask> dets, truths;
      const int nd = static_cast<int>(rng.uniform_int(0, 6)), nt = static_cast<int>(rng.uniform_int(0, 6));
      for (int i = 0; i < nd; ++i) dets.push_back(random_box_mask(rng, 16));
      for (int i = 0; i < nt; ++i) truths.push_back(random_box_mask(rng, 16));
      const double thr = rng.uniform(0.3, 0.9);
      const MatchResult m = match_instances(dets, truths, thr);

      std::vector<bool> taken(nt, false);
      std::vector<MatchPair> expect;
      std::vector<int> free_dets;
      for (int d = 0; d < nd; ++d) {
        int best = -1;
        double best_iou = -1.0;
        for (int t = 0; t < nt; ++t) {
          if (taken[t]) continue;
          const double v = min_area_overlap(dets[d], truths[t]);
          if (v > best_iou) best = t, best_iou = v;
        }
        if (best >= 0 && best_iou >= thr) {
          taken[best] = true;
          expect.push_back({d, best, best_iou});
        } else {
          free_dets.push_back(d);
        }
      }
      REQUIRE(m.pairs.size() == expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(m.pairs[i].det == expect[i].det);
        CHECK(m.pairs[i].truth == expect[i].truth);
        CHECK(m.pairs[i].iou == doctest::Approx(expect[i].iou));
      }
      CHECK(m.unmatched_dets == free_dets);
      CHECK(m.pairs.size() + m.unmatched_truths.size() == static_cast<std::size_t>(nt));
    }
  }

  TEST_CASE("perfect predictions score one and relabelling truths changes nothing") {
    MaskStack truth;
    truth.push_back(rect_mask(32, 32, 2, 2, 6, 10), CellClass::kVegetative);
    truth.push_back(rect_mask(32, 32, 20, 4, 8, 5), CellClass::kSpore);
    truth.push_back(rect_mask(32, 32, 12, 18, 7, 7), CellClass::kVegetative);
    std::vector<detection::ScoredMask> preds;
    for (std::size_t k = 0; k < truth.size(); ++k) preds.push_back({0.9 - 0.1 * k, truth.class_labels[k], truth.masks[k]});
    const EvalReport r = aggregate({match_image("a", preds, truth)});
    CHECK(*r.map == 1.0);
    CHECK(*r.dice == 1.0);

    MaskStack reordered;
    for (int k : {2, 0, 1}) reordered.push_back(truth.masks[k], truth.class_labels[k]);
    const EvalReport s = aggregate({match_image("a", preds, reordered)});
    CHECK(to_json(s) == to_json(r));

    const EvalReport none = aggregate({match_image("a", {}, truth)});
    CHECK(*none.map == 0.0);
    CHECK(!none.dice.has_value());
  }

  TEST_CASE("aggregation does not depend on image order") {
    Rng rng(3);
    std::vector<ImageMatches> images;
    for (int i = 0; i < 6; ++i) {
      MaskStack truth;
      std::vector<detection::ScoredMask> preds;
      for (int k = 0; k < 3; ++k) {
        const auto c = rng.uniform() < 0.5 ? CellClass::kVegetative : CellClass::kSpore;
        truth.push_back(random_box_mask(rng, 20), c);
        preds.push_back({rng.uniform(), c, random_box_mask(rng, 20)});
      }
      preds.push_back({rng.uniform(), truth.class_labels[0], truth.masks[0]});
      images.push_back(match_image(std::to_string(i), preds, truth));
    }
    const EvalReport a = aggregate(images);
    std::reverse(images.begin(), images.end());
    const EvalReport b = aggregate(images);
    REQUIRE(a.map.has_value());
    CHECK(*b.map == doctest::Approx(*a.map).epsilon(1e-12));
    CHECK(*b.dice == doctest::Approx(*a.dice).epsilon(1e-12));
    CHECK(b.counts.stats->bias == doctest::Approx(a.counts.stats->bias));
  }

  TEST_CASE("evaluate on datasets and detection files") {
    TempDir gt_dir("eval_gt");
    const auto gt = make_dataset(gt_dir, 3);
    const auto ids = dataset::list_ids(gt);
    REQUIRE(ids.size() == 3);

    const EvalReport self = evaluate(gt, gt);
    CHECK(*self.map == 1.0);
    CHECK(*self.dice == 1.0);
    CHECK(self.images == 3);
    const Json j = to_json(self);
    for (const char* key : {"per_class", "overall", "agreement", "iou_threshold", "images", "missing_predictions", "unknown_predictions"})
      CHECK(j.contains(key));
    CHECK(j["per_class"].contains("vegetative"));
    CHECK(j["agreement"]["counts"]["bias"] == 0.0);
    const std::string csv = to_csv(self);
    CHECK(csv.rfind("class,ap,dice,n_truth,n_pred\n", 0) == 0);
    CHECK(csv.find("\noverall,1.000000,1.000000,") != std::string::npos);

    TempDir empty("eval_empty");
    const EvalReport nothing = evaluate(empty.path(), gt);
    CHECK(*nothing.map == 0.0);
    CHECK(nothing.missing_predictions == ids);

    TempDir files("eval_files");
    const auto first = dataset::load_sample(gt, ids[0]);
    std::vector<detection::ScoredMask> preds;
    for (std::size_t k = 0; k < first.masks.size(); ++k) preds.push_back({0.9, first.masks.class_labels[k], first.masks.masks[k]});
    write_predictions(files / (ids[0] + ".json"), preds);
    write_predictions(files / "stranger.json", preds);
    const EvalReport partial = evaluate(files.path(), gt);
    CHECK(partial.missing_predictions == std::vector<std::string>{ids[1], ids[2]});
    CHECK(partial.unknown_predictions == std::vector<std::string>{"stranger"});
    CHECK(*partial.dice == 1.0);
    CHECK(*partial.map < 1.0);

    std::vector<ImageMatches> singles;
    for (const auto& id : ids) {
      const auto truth = dataset::load_sample(gt, id);
      singles.push_back(match_image(id, id == ids[0] ? preds : std::vector<detection::ScoredMask>{}, truth.masks));
    }
    EvalReport regrouped = aggregate(singles);
    regrouped.missing_predictions = partial.missing_predictions;
    regrouped.unknown_predictions = partial.unknown_predictions;
    CHECK(to_json(regrouped) == to_json(partial));

    TempDir strangers("eval_strangers");
    write_predictions(strangers / "nobody.json", preds);
    try {
      evaluate(strangers.path(), gt);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kEmptyEvaluation);
    }
    CHECK_THROWS_AS(evaluate(gt / "absent", gt), Error);
  }
}
