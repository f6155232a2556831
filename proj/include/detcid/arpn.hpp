#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "detcid/json_util.hpp"
#include "detcid/nn.hpp"
#include "detcid/raster.hpp"
#include "detcid/rng.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::arpn {

enum LabelClass : int { kBackground = 0, kBody = 1, kWall = 2 };

/// Per-pixel distribution over {background, body, wall}; a 3-channel tensor.
using LabelMap = nn::Tensor;
using ClassWeights = std::array<double, 3>;

/// Throws kShape unless the map has 3 channels with each pixel summing to 1.
void validate_label_map(const LabelMap& map, double tol = 1e-5);
/// Throws kInvalidGroundTruth unless every pixel is one-hot.
void validate_one_hot(const LabelMap& gt);

/// One-hot map: wall = band between a dilation and an erosion of each mask,
/// `wall_width` px wide in total (1 px each way by default), body = remaining
/// mask pixels, background elsewhere. Walls win where cells meet.
LabelMap ground_truth_map(const MaskStack& masks, int rows, int cols, int wall_width = 2);
/// Body plus wall probability per pixel.
GrayImage foreground_probability(const LabelMap& map);
/// Inverse class frequency over the given maps, normalized to mean 1.
ClassWeights inverse_frequency_weights(const std::vector<LabelMap>& maps);

nn::Tensor image_tensor(const GrayImage& img);

struct TrainConfig {
  int patch_size = 64;
  int batch_size = 4;
  double learning_rate = 1e-3;
  int steps = 200;
  std::uint64_t seed = 0;
  int base_width = 16;
  int disc_width = 8;
  int wall_width = 2;
  /// Multiplier on the adversarial term of the segmenter objective.
  double adversarial_weight = 1.0;
  /// Empty means inverse class frequency of the training set.
  std::vector<double> class_weights;

  void validate() const;
};

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j);

/// Encoder-decoder producing a LabelMap at input resolution. Three
/// conv/pool units, three upsample + 2x2 conv units with additive skips,
/// then a 1x1 classifier.
class Segmenter {
 public:
  struct Trace {
    int h = 0, w = 0;
    nn::Conv2d::Cache c1, c2, c3, u1, u2, u3, out;
    nn::PoolCache p1, p2, p3;
    nn::Tensor e1, e2, e3, a1, a2, a3, probs;
  };

  explicit Segmenter(int base_width = 16);
  void init(Rng& rng);

  LabelMap forward(const GrayImage& img) const;
  LabelMap forward(const nn::Tensor& x, Trace* trace) const;
  /// Accumulates parameter gradients from dL/dprobs.
  void backward(const Trace& trace, const LabelMap& grad_probs);

  nn::ParamList params();
  int base_width() const { return base_; }

 private:
  int base_;
  nn::Conv2d c1_, c2_, c3_, u1_, u2_, u3_, out_;
};

/// Five valid 3x3 convs with ReLU and interleaved 2x2 average pooling, then
/// two fully connected layers. The output is an unscaled logit.
class Discriminator {
 public:
  struct Trace {
    std::array<nn::Conv2d::Cache, 5> conv;
    std::array<nn::Tensor, 5> act;
    std::array<bool, 5> pooled{};
    nn::Tensor last;
    std::vector<double> flat, hidden;
  };

  Discriminator(int patch_size = 64, int base_width = 8);
  void init(Rng& rng);

  double forward(const LabelMap& map, Trace* trace = nullptr) const;
  /// Accumulates parameter gradients and returns dL/dmap.
  LabelMap backward(const Trace& trace, double grad_score);

  nn::ParamList params();
  int patch_size() const { return patch_; }
  const std::array<bool, 5>& pool_after() const { return pool_after_; }

 private:
  int patch_;
  int base_;
  std::array<nn::Conv2d, 5> conv_;
  std::array<bool, 5> pool_after_{};
  nn::Linear fc1_, fc2_;
};

LabelMap segmenter_forward(const Segmenter& s, const GrayImage& img);
double discriminator_forward(const Discriminator& d, const LabelMap& map);

struct SegmenterLoss {
  double ce = 0.0;
  double adv = 0.0;
  double total() const { return ce + adv; }
  LabelMap grad_map;
  double grad_logit = 0.0;
};

/// Weighted cross-entropy against a one-hot map (probabilities clamped at
/// 1e-7, averaged over pixels) plus sigmoid cross-entropy of d_logit vs 1.
double segmenter_loss(const LabelMap& map, const LabelMap& gt, double d_logit,
                      const ClassWeights& w);
SegmenterLoss segmenter_loss_grad(const LabelMap& map, const LabelMap& gt, double d_logit,
                                  const ClassWeights& w);

struct DiscriminatorLoss {
  double value = 0.0;
  double grad_gt = 0.0;
  double grad_gen = 0.0;
};

double discriminator_loss(double d_gt_logit, double d_gen_logit);
DiscriminatorLoss discriminator_loss_grad(double d_gt_logit, double d_gen_logit);

struct ArpnSample {
  GrayImage image;
  LabelMap truth;
};

std::vector<ArpnSample> prepare_samples(const std::vector<synthesis::AnnotatedImage>& data,
                                       int wall_width = 2);

struct LossRecord {
  int step = 0;
  double seg_ce = 0.0;
  double seg_adv = 0.0;
  double disc = 0.0;
};

/// Everything needed to continue training bit-for-bit.
struct ArpnState {
  TrainConfig cfg;
  Segmenter segmenter;
  Discriminator discriminator;
  ClassWeights class_weights{1.0, 1.0, 1.0};
  nn::Adam adam_s;
  nn::Adam adam_d;
  Rng rng;
  int step = 0;
  std::vector<LossRecord> losses;
};

ArpnState init_arpn(const std::vector<ArpnSample>& samples, const TrainConfig& cfg);
/// Runs `steps` alternating updates: one discriminator step, then one
/// segmenter step, per batch. A non-finite loss throws kDivergence and leaves
/// the state at the last completed step.
void train_arpn_steps(ArpnState& state, const std::vector<ArpnSample>& samples, int steps);
ArpnState train_arpn(const std::vector<ArpnSample>& samples, const TrainConfig& cfg);

Json to_json(const ArpnState& state);
ArpnState arpn_state_from_json(const Json& j);
std::string losses_csv(const std::vector<LossRecord>& losses);

/// Segmenter run on an arbitrary image: edge-padded to a multiple of 8,
/// then cropped back.
LabelMap segment_image(const Segmenter& s, const GrayImage& img);

}  // namespace detcid::arpn
