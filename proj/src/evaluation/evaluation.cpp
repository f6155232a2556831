#include "detcid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "detcid/fsutil.hpp"

namespace detcid::evaluation {

namespace fs = std::filesystem;

MatchResult match_instances(const std::vector<InstanceMask>& dets,
                            const std::vector<InstanceMask>& truths, double iou_threshold) {
  MatchResult r;
  std::vector<bool> taken(truths.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (taken[t]) continue;
      const double iou = detection::modified_iou(dets[d], truths[t]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      taken[best] = true;
      r.pairs.push_back({static_cast<int>(d), best, best_iou});
    } else {
      r.unmatched_dets.push_back(static_cast<int>(d));
    }
  }
  for (std::size_t t = 0; t < truths.size(); ++t) {
    if (!taken[t]) r.unmatched_truths.push_back(static_cast<int>(t));
  }
  return r;
}

std::optional<double> average_precision(std::vector<Hit> hits, long long n_truth) {
  if (n_truth <= 0) return std::nullopt;
  std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  long long tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i].true_positive ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_truth));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

namespace {

std::vector<std::size_t> score_order(const std::vector<detection::ScoredMask>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

std::optional<double> average_precision(const std::vector<std::vector<detection::ScoredMask>>& dets,
                                         const std::vector<std::vector<InstanceMask>>& truths,
                                         double iou_threshold) {
  if (dets.size() != truths.size()) throw Error(ErrorCode::kShape, "average_precision: image count mismatch");
  std::vector<Hit> hits;
  long long n_truth = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto order = score_order(dets[i]);
    std::vector<InstanceMask> masks;
    for (std::size_t k : order) masks.push_back(dets[i][k].mask);
    const MatchResult m = match_instances(masks, truths[i], iou_threshold);
    std::vector<bool> tp(masks.size(), false);
    for (const auto& p : m.pairs) tp[p.det] = true;
    for (std::size_t k = 0; k < order.size(); ++k) hits.push_back({dets[i][order[k]].score, tp[k]});
    n_truth += static_cast<long long>(truths[i].size());
  }
  return average_precision(std::move(hits), n_truth);
}

double dice(const InstanceMask& pred, const InstanceMask& gt) {
  if (!pred.same_shape(gt)) throw Error(ErrorCode::kShape, "dice: frame mismatch");
  const long long a = core::area(pred);
  const long long b = core::area(gt);
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(core::intersection_area(pred, gt)) / static_cast<double>(a + b);
}

BlandAltman bland_altman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShape, "bland_altman: series lengths differ");
  if (a.size() < 2) throw Error(ErrorCode::kShape, "bland_altman: need at least two pairs");
  const double n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  BlandAltman r;
  r.bias = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : d) ss += (v - r.bias) * (v - r.bias);
  const double sd = std::sqrt(ss / (n - 1.0));
  r.loa_low = r.bias - 1.96 * sd;
  r.loa_high = r.bias + 1.96 * sd;

  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - ma;
    const double y = b[i] - mb;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa > 0.0 && sbb > 0.0) r.r2 = std::min(1.0, (sab * sab) / (saa * sbb));
  return r;
}

ImageMatches match_image(const std::string& id, const std::vector<detection::ScoredMask>& preds,
                         const MaskStack& truth, double iou_threshold) {
  ImageMatches im;
  im.id = id;
  im.pred_count = static_cast<long long>(preds.size());
  im.truth_count = static_cast<long long>(truth.size());
  for (std::size_t c = 0; c < kClasses.size(); ++c) {
    std::vector<detection::ScoredMask> cp;
    for (const auto& p : preds) {
      if (p.cell_class == kClasses[c]) cp.push_back(p);
    }
    std::vector<InstanceMask> ct;
    for (std::size_t t = 0; t < truth.size(); ++t) {
      if (truth.class_labels[t] == kClasses[c]) ct.push_back(truth.masks[t]);
    }
    const auto order = score_order(cp);
    std::vector<InstanceMask> masks;
    for (std::size_t k : order) {
      if (!ct.empty() && !cp[k].mask.same_shape(ct.front())) {
        throw Error(ErrorCode::kShape, "image " + id + ": prediction frame differs from ground truth");
      }
      masks.push_back(cp[k].mask);
    }
    const MatchResult m = match_instances(masks, ct, iou_threshold);
    std::vector<bool> tp(masks.size(), false);
    for (const auto& p : m.pairs) {
      tp[p.det] = true;
      im.dice[c].push_back(dice(masks[p.det], ct[p.truth]));
      im.pred_areas.push_back(static_cast<double>(core::area(masks[p.det])));
      im.truth_areas.push_back(static_cast<double>(core::area(ct[p.truth])));
    }
    for (std::size_t k = 0; k < order.size(); ++k) im.hits[c].push_back({cp[order[k]].score, tp[k]});
    im.n_truth[c] = static_cast<long long>(ct.size());
    im.n_pred[c] = static_cast<long long>(cp.size());
  }
  return im;
}

namespace {

Agreement agreement(const std::vector<double>& a, const std::vector<double>& b) {
  Agreement g;
  g.n = static_cast<long long>(a.size());
  if (a.size() >= 2) g.stats = bland_altman(a, b);
  return g;
}

std::optional<double> mean(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalReport aggregate(const std::vector<ImageMatches>& images, double iou_threshold) {
  EvalReport r;
  r.iou_threshold = iou_threshold;
  r.images = static_cast<int>(images.size());
  std::vector<double> all_dice, aps, pc, tc, pa, ta;
  for (std::size_t c = 0; c < kClasses.size(); ++c) {
    ClassReport cr;
    cr.name = to_string(kClasses[c]);
    std::vector<Hit> hits;
    std::vector<double> d;
    for (const auto& im : images) {
      hits.insert(hits.end(), im.hits[c].begin(), im.hits[c].end());
      d.insert(d.end(), im.dice[c].begin(), im.dice[c].end());
      cr.n_truth += im.n_truth[c];
      cr.n_pred += im.n_pred[c];
    }
    cr.ap = average_precision(std::move(hits), cr.n_truth);
    cr.dice = mean(d);
    if (cr.ap) aps.push_back(*cr.ap);
    all_dice.insert(all_dice.end(), d.begin(), d.end());
    r.per_class.push_back(cr);
  }
  r.map = mean(aps);
  r.dice = mean(all_dice);
  for (const auto& im : images) {
    pc.push_back(static_cast<double>(im.pred_count));
    tc.push_back(static_cast<double>(im.truth_count));
    pa.insert(pa.end(), im.pred_areas.begin(), im.pred_areas.end());
    ta.insert(ta.end(), im.truth_areas.begin(), im.truth_areas.end());
  }
  r.counts = agreement(pc, tc);
  r.areas = agreement(pa, ta);
  return r;
}

namespace {

std::vector<detection::ScoredMask> truth_as_predictions(const synthesis::AnnotatedImage& a) {
  std::vector<detection::ScoredMask> out;
  for (std::size_t k = 0; k < a.masks.size(); ++k) {
    out.push_back({1.0, a.masks.class_labels[k], a.masks.masks[k]});
  }
  return out;
}

}  // namespace

EvalReport evaluate(const fs::path& pred_dir, const fs::path& gt_dir, double iou_threshold, int workers) {
  if (!fs::is_directory(gt_dir)) throw Error(ErrorCode::kIo, "ground-truth directory not found: " + gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw Error(ErrorCode::kIo, "prediction directory not found: " + pred_dir.string());
  const std::vector<std::string> gt_ids = dataset::list_ids(gt_dir);
  const bool pred_is_dataset = fs::is_directory(pred_dir / "annotations");

  std::set<std::string> pred_ids;
  if (pred_is_dataset) {
    for (const auto& id : dataset::list_ids(pred_dir)) pred_ids.insert(id);
  } else {
    for (const auto& e : fs::directory_iterator(pred_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".json") pred_ids.insert(e.path().stem().string());
    }
  }
  const std::set<std::string> gt_set(gt_ids.begin(), gt_ids.end());

  EvalReport report;
  bool overlap = false;
  for (const auto& id : gt_ids) {
    if (pred_ids.count(id)) {
      overlap = true;
    } else {
      report.missing_predictions.push_back(id);
    }
  }
  for (const auto& id : pred_ids) {
    if (!gt_set.count(id)) report.unknown_predictions.push_back(id);
  }
  if (!pred_ids.empty() && !overlap) {
    throw Error(ErrorCode::kEmptyEvaluation, "no prediction shares an image id with the ground truth");
  }

  std::vector<ImageMatches> matches(gt_ids.size());
  dataset::parallel_for(static_cast<int>(gt_ids.size()), workers, [&](int i) {
    const std::string& id = gt_ids[i];
    const synthesis::AnnotatedImage truth = dataset::load_sample(gt_dir, id);
    std::vector<detection::ScoredMask> preds;
    if (pred_ids.count(id)) {
      if (pred_is_dataset) {
        preds = truth_as_predictions(dataset::load_sample(pred_dir, id));
      } else {
        const fs::path p = pred_dir / (id + ".json");
        preds = detection::scored_masks_from_json(parse_json_text(read_file(p), p.string()));
      }
    }
    matches[i] = match_image(id, preds, truth.masks, iou_threshold);
  });

  EvalReport agg = aggregate(matches, iou_threshold);
  agg.missing_predictions = std::move(report.missing_predictions);
  agg.unknown_predictions = std::move(report.unknown_predictions);
  return agg;
}

namespace {

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json agreement_json(const Agreement& a) {
  if (!a.stats) return {{"n", a.n}, {"bias", nullptr}, {"loa", nullptr}, {"r2", nullptr}};
  return {{"n", a.n},
          {"bias", a.stats->bias},
          {"loa", {a.stats->loa_low, a.stats->loa_high}},
          {"r2", opt(a.stats->r2)}};
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

Json to_json(const EvalReport& r) {
  Json per_class = Json::object();
  for (const auto& c : r.per_class) {
    per_class[c.name] = {{"ap", opt(c.ap)}, {"dice", opt(c.dice)}, {"n_truth", c.n_truth}, {"n_pred", c.n_pred}};
  }
  return {{"per_class", per_class},
          {"overall", {{"map", opt(r.map)}, {"dice", opt(r.dice)}}},
          {"agreement", {{"counts", agreement_json(r.counts)}, {"areas", agreement_json(r.areas)}}},
          {"iou_threshold", r.iou_threshold},
          {"images", r.images},
          {"missing_predictions", r.missing_predictions},
          {"unknown_predictions", r.unknown_predictions}};
}

std::string to_csv(const EvalReport& r) {
  std::string out = "class,ap,dice,n_truth,n_pred\n";
  long long nt = 0, np = 0;
  for (const auto& c : r.per_class) {
    out += c.name + "," + fmt(c.ap) + "," + fmt(c.dice) + "," + std::to_string(c.n_truth) + "," +
           std::to_string(c.n_pred) + "\n";
    nt += c.n_truth;
    np += c.n_pred;
  }
  out += "overall," + fmt(r.map) + "," + fmt(r.dice) + "," + std::to_string(nt) + "," + std::to_string(np) + "\n";
  return out;
}

}  // namespace detcid::evaluation
