#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "detcid/arpn.hpp"
#include "detcid/geometry.hpp"
#include "detcid/json_util.hpp"
#include "detcid/nn.hpp"
#include "detcid/raster.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::detection {

enum class AnchorType { kHorizontal, kVertical, kSquare };
const char* to_string(AnchorType t);
AnchorType anchor_type_from_string(const std::string& name);

/// Box template of a given area. Horizontal is 2:1 (width:height), vertical 1:2.
struct AnchorSpec {
  AnchorType type = AnchorType::kSquare;
  double area = 32.0 * 32.0;

  double width() const;
  double height() const;
  friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

/// Every type at every area, ordered by area then type.
std::vector<AnchorSpec> make_anchors(const std::vector<double>& areas);

struct Proposal {
  BoundingBox box;
  AnchorSpec anchor;
  double score = 0.0;
  /// Average foreground over a 1.5x window; orders proposals of equal score.
  double context = 0.0;
};

/// Window average of body + wall probability for each anchor at stride-aligned
/// centres ((i + 0.5) * stride - 0.5). Windows are clipped to the frame; a
/// proposal is emitted when the average exceeds tau. Sorted best first.
std::vector<Proposal> propose_anchors(const arpn::LabelMap& map,
                                      const std::vector<AnchorSpec>& anchors, double tau,
                                      int stride = 8);

/// Each proposal with width and height scaled independently by
/// {0.95, 1, 1.05}; variants whose foreground mass is under `min_fraction` of
/// their area are dropped.
std::vector<Proposal> jitter_proposals(const std::vector<Proposal>& props,
                                       const arpn::LabelMap& map, double min_fraction = 0.05);

/// 0.5 * smallest cell area / smallest anchor area, clamped to [0.05, 0.5].
double derive_tau_anchor(double smallest_cell_area, double smallest_anchor_area);

struct FeaturePyramid {
  std::array<nn::Tensor, 3> levels;  // strides 4, 8, 16
  static constexpr std::array<int, 3> kStrides{4, 8, 16};
};

/// Small residual pyramid: stride-2 stem, three stride-2 stages each followed
/// by a residual block, 1x1 laterals and a nearest-neighbour top-down path.
class Backbone {
 public:
  struct ResTrace {
    nn::Conv2d::Cache c1, c2;
    nn::Tensor h, out;
  };
  struct Trace {
    nn::Conv2d::Cache stem, down1, down2, down3, lat4, lat8, lat16;
    nn::Tensor s0, d1, d2, d3;
    ResTrace r1, r2, r3;
  };

  Backbone(int base_width = 16, int feature_width = 16);
  void init(Rng& rng);

  FeaturePyramid forward(const GrayImage& img, Trace* trace = nullptr) const;
  /// Accumulates parameter gradients from per-level feature gradients
  /// (empty tensors are treated as zero).
  void backward(const Trace& trace, const std::array<nn::Tensor, 3>& grads);

  nn::ParamList params();
  int feature_width() const { return feature_width_; }
  int base_width() const { return base_; }

 private:
  struct Res {
    nn::Conv2d a, b;
  };
  static nn::Tensor res_forward(const Res& r, const nn::Tensor& x, ResTrace* t);
  static nn::Tensor res_backward(Res& r, const ResTrace& t, const nn::Tensor& g);

  int base_;
  int feature_width_;
  nn::Conv2d stem_, down1_, down2_, down3_, lat4_, lat8_, lat16_;
  Res r1_, r2_, r3_;
};

FeaturePyramid backbone_forward(const Backbone& b, const GrayImage& img);

/// Bilinear samples at the centres of a grid x grid partition of `box` (image
/// pixel coordinates). Image point x maps to feature coordinate
/// (x + 0.5) / stride - 0.5; samples are clamped to the feature border.
nn::Tensor roi_align(const nn::Tensor& features, double stride, const BoundingBox& box, int grid);
nn::Tensor roi_align_backward(const nn::Tensor& grad_patch, int feat_h, int feat_w, double stride,
                              const BoundingBox& box);

struct HeadOutput {
  double p_logit = 0.0;
  std::array<double, 4> r{};
  std::vector<double> class_logits;
  nn::Tensor mask_logits;  // 1 x grid x grid

  double p() const;
  std::vector<double> class_probs() const;
  nn::Tensor mask_probs() const;
};

/// Mask branch: 3x3 conv, ReLU, 1x1 conv. Box branch: 2x2 average pool,
/// FC(64), ReLU, FC(1 + 4 + classes).
class Head {
 public:
  struct Trace {
    nn::Tensor input;
    nn::Conv2d::Cache m1, m2;
    nn::Tensor mh;
    std::vector<double> flat, hidden;
  };

  Head(int in_channels = 20, int grid = 14, int num_classes = 2);
  void init(Rng& rng);

  HeadOutput forward(const nn::Tensor& patch, Trace* trace = nullptr) const;
  /// Gradients are with respect to p_logit, r, class_logits and mask_logits.
  nn::Tensor backward(const Trace& trace, const HeadOutput& grad);

  nn::ParamList params();
  int in_channels() const { return in_; }
  int grid() const { return grid_; }
  int num_classes() const { return classes_; }

 private:
  int in_, grid_, classes_;
  nn::Conv2d m1_, m2_;
  nn::Linear fc1_, fc2_;
};

/// Supervision for one proposal; `mask` is on the head's grid.
struct LossTarget {
  bool matched = false;
  std::array<double, 4> r{};
  InstanceMask mask;
  int cls = 0;
};

/// Probability-space loss: BCE(p, p*) + p* * smoothL1(r - r*) + p* * mean
/// mask BCE. Probabilities are clamped to [1e-7, 1 - 1e-7].
double detection_loss(double p, const std::array<double, 4>& r, const nn::Tensor& mask_probs,
                      const LossTarget& t);

struct DetectionLossGrad {
  double value = 0.0;
  double class_term = 0.0;
  HeadOutput grad;  // d total() / d head outputs
  double total() const { return value + class_term; }
};

/// Same objective evaluated from logits, plus p* * class cross-entropy when
/// `class_weight` > 0. Gradients are exact.
DetectionLossGrad detection_loss_grad(const HeadOutput& out, const LossTarget& t,
                                      double class_weight = 1.0);

double smooth_l1(double x);

/// (dx, dy, log dw, log dh) of `target` relative to `ref`.
std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& target);
BoundingBox decode_box(const BoundingBox& ref, const std::array<double, 4>& r);

struct Detection {
  double score = 0.0;
  CellClass cell_class = CellClass::kVegetative;
  BoundingBox box;       // regressed box
  BoundingBox mask_box;  // region the mask grid covers
  std::array<double, 4> offsets{};
  InstanceMask mask;  // grid x grid, binary
  AnchorSpec anchor;
};

/// Full-frame mask: each pixel centre inside mask_box takes the value of the
/// grid cell it falls in.
InstanceMask paste_mask(const Detection& d, int rows, int cols);

/// Intersection over the smaller area; 0 when either mask is empty.
double modified_iou(const InstanceMask& a, const InstanceMask& b);
double modified_iou(const Detection& a, const Detection& b, int rows, int cols);

/// Greedy suppression within each class, highest score first. Ties are broken
/// by pasted area (larger first), then the top-left corner of the mask box,
/// then the remaining fields, so the result does not depend on input order.
std::vector<Detection> mask_nms(const std::vector<Detection>& dets, double tau_nms, int rows,
                                int cols);
/// Position of `a` relative to `b` in the suppression order.
bool nms_before(const Detection& a, long long area_a, const Detection& b, long long area_b);

struct DetectionConfig {
  std::vector<double> anchor_areas{32.0 * 32.0, 64.0 * 64.0, 128.0 * 128.0};
  int stride = 8;
  /// Negative: derived from the training set when the head is trained.
  double tau_anchor = -1.0;
  double jitter_min_fraction = 0.05;
  int max_proposals = 300;
  double tau_nms = 0.5;
  double score_threshold = 0.5;
  int grid = 14;
  int num_classes = 2;
  int backbone_width = 16;
  int feature_width = 16;

  void validate() const;
  std::vector<AnchorSpec> anchors() const { return make_anchors(anchor_areas); }
};

Json to_json(const DetectionConfig& c);
DetectionConfig detection_config_from_json(const Json& j);
/// Same frame and anchor settings scaled for 64x64 images.
DetectionConfig toy_detection_config();

struct HeadTrainConfig {
  int steps = 300;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int rois_per_step = 32;
  double positive_fraction = 0.5;
  double match_threshold = 0.5;
  double class_weight = 1.0;

  void validate() const;
};

Json to_json(const HeadTrainConfig& c);
HeadTrainConfig head_train_config_from_json(const Json& j);

struct DetectorModel {
  DetectionConfig cfg;
  Backbone backbone;
  Head head;

  explicit DetectorModel(const DetectionConfig& c);
};

struct DetectTrace {
  int backbone_passes = 0;
  int proposals = 0;
  int candidates = 0;
  int before_nms = 0;
};

/// Channels fed to the head: stride-4 features, label map and image.
nn::Tensor roi_patch(const FeaturePyramid& fp, const arpn::LabelMap& map, const GrayImage& img,
                     const BoundingBox& box, int grid);

/// Candidate proposals for an image: anchors, cap, jitter.
std::vector<Proposal> candidate_proposals(const arpn::LabelMap& map, const DetectionConfig& cfg);

std::vector<Detection> detect(const GrayImage& img, const arpn::Segmenter& segmenter,
                              const DetectorModel& model, DetectTrace* trace = nullptr);

struct HeadSample {
  GrayImage image;
  arpn::LabelMap map;
  MaskStack truth;
  std::vector<Proposal> proposals;
  std::vector<LossTarget> targets;
};

/// Assign each proposal to the ground-truth cell with the highest modified
/// IoU between the filled proposal box and the cell mask, when it reaches
/// `match_threshold`.
std::vector<LossTarget> proposal_targets(const std::vector<Proposal>& props,
                                         const MaskStack& truth, int rows, int cols, int grid,
                                         double match_threshold);
/// Sample the cell mask on the grid over `box` (nearest pixel, 0 outside).
InstanceMask mask_target(const InstanceMask& mask, const BoundingBox& box, int grid);

struct HeadLossRecord {
  int step = 0;
  double loss = 0.0;
  int positives = 0;
  int rois = 0;
};

struct HeadState {
  HeadTrainConfig train;
  DetectorModel model;
  nn::Adam adam;
  Rng rng;
  int step = 0;
  std::vector<HeadLossRecord> losses;
};

/// Segments every image with the frozen segmenter and builds proposals and
/// targets. Fills cfg.tau_anchor from the smallest training cell when negative.
std::vector<HeadSample> prepare_head_samples(const std::vector<synthesis::AnnotatedImage>& data,
                                             const arpn::Segmenter& segmenter,
                                             DetectionConfig& cfg, double match_threshold,
                                             int workers = 1);

HeadState init_head(const DetectionConfig& cfg, const HeadTrainConfig& train);
/// One image per step; a non-finite loss throws kDivergence and leaves the
/// state at the last completed step.
void train_head_steps(HeadState& state, const std::vector<HeadSample>& samples, int steps);
HeadState train_head(const std::vector<HeadSample>& samples, const DetectionConfig& cfg,
                     const HeadTrainConfig& train);

Json to_json(const HeadState& st);
HeadState head_state_from_json(const Json& j);
std::string head_losses_csv(const std::vector<HeadLossRecord>& losses);

/// Row-major run lengths alternating background / foreground, starting with
/// background.
struct Rle {
  int rows = 0;
  int cols = 0;
  std::vector<long long> counts;
};
Rle rle_encode(const InstanceMask& m);
InstanceMask rle_decode(const Rle& r);

/// [{score, class, box, mask: {size, counts}, provenance}]
Json detections_to_json(const std::vector<Detection>& dets, int rows, int cols);

/// A detection reduced to what scoring needs.
struct ScoredMask {
  double score = 0.0;
  CellClass cell_class = CellClass::kVegetative;
  InstanceMask mask;
};
std::vector<ScoredMask> scored_masks_from_json(const Json& j);

}  // namespace detcid::detection
