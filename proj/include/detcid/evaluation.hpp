#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "detcid/detection.hpp"
#include "detcid/json_util.hpp"
#include "detcid/raster.hpp"

namespace detcid::evaluation {

struct MatchPair {
  int det = -1;
  int truth = -1;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_dets;
  std::vector<int> unmatched_truths;
};

/// Detections must be sorted by score, best first. Each detection in turn
/// takes the unmatched truth with the highest modified IoU (lowest index on
/// ties) if that IoU reaches the threshold.
MatchResult match_instances(const std::vector<InstanceMask>& dets,
                            const std::vector<InstanceMask>& truths, double iou_threshold = 0.5);

struct Hit {
  double score = 0.0;
  bool true_positive = false;
};

/// Area under the precision envelope (all-point interpolation). Hits are
/// ranked by score (stable for ties). Absent when there are no truths.
std::optional<double> average_precision(std::vector<Hit> hits, long long n_truth);

/// AP of scored detections against truths over a set of images, matching at
/// modified IoU >= threshold.
std::optional<double> average_precision(const std::vector<std::vector<detection::ScoredMask>>& dets,
                                         const std::vector<std::vector<InstanceMask>>& truths,
                                         double iou_threshold = 0.5);

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const InstanceMask& pred, const InstanceMask& gt);

struct BlandAltman {
  double bias = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
  /// Squared Pearson correlation; absent when either series is constant.
  std::optional<double> r2;
};

/// Differences are a - b; limits are bias -/+ 1.96 sample standard deviations.
BlandAltman bland_altman(const std::vector<double>& a, const std::vector<double>& b);

inline constexpr std::array<CellClass, 2> kClasses{CellClass::kVegetative, CellClass::kSpore};

/// Raw match lists of one image; reports are built only from these.
struct ImageMatches {
  std::string id;
  std::array<std::vector<Hit>, 2> hits;
  std::array<long long, 2> n_truth{};
  std::array<long long, 2> n_pred{};
  std::array<std::vector<double>, 2> dice;
  std::vector<double> pred_areas;   // matched pairs
  std::vector<double> truth_areas;  // matched pairs
  long long pred_count = 0;
  long long truth_count = 0;
};

ImageMatches match_image(const std::string& id, const std::vector<detection::ScoredMask>& preds,
                         const MaskStack& truth, double iou_threshold = 0.5);

struct ClassReport {
  std::string name;
  std::optional<double> ap;
  std::optional<double> dice;
  long long n_truth = 0;
  long long n_pred = 0;
};

struct Agreement {
  long long n = 0;
  std::optional<BlandAltman> stats;
};

struct EvalReport {
  double iou_threshold = 0.5;
  int images = 0;
  std::vector<ClassReport> per_class;
  /// Mean AP over classes that have truths.
  std::optional<double> map;
  /// Mean Dice over all matched pairs.
  std::optional<double> dice;
  Agreement counts;
  Agreement areas;
  std::vector<std::string> missing_predictions;
  std::vector<std::string> unknown_predictions;
};

EvalReport aggregate(const std::vector<ImageMatches>& images, double iou_threshold = 0.5);

/// `gt_dir` is a dataset directory. `pred_dir` is either a dataset directory
/// or a directory of <id>.json detection lists. Ground-truth images without a
/// prediction file count as having no detections. Throws kEmptyEvaluation
/// when prediction files exist but none shares an id with the ground truth.
EvalReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                    double iou_threshold = 0.5, int workers = 1);

Json to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);

}  // namespace detcid::evaluation
