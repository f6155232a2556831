#include <algorithm>
#include <cmath>

#include "detcid/detection.hpp"

namespace detcid::detection {

using nn::Tensor;

double HeadOutput::p() const { return nn::sigmoid(p_logit); }

std::vector<double> HeadOutput::class_probs() const {
  std::vector<double> out(class_logits.size());
  if (out.empty()) return out;
  const double mx = *std::max_element(class_logits.begin(), class_logits.end());
  double s = 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) s += out[k] = std::exp(class_logits[k] - mx);
  for (double& v : out) v /= s;
  return out;
}

Tensor HeadOutput::mask_probs() const {
  Tensor out = mask_logits;
  for (double& v : out.data) v = nn::sigmoid(v);
  return out;
}

Head::Head(int in_channels, int grid, int num_classes)
    : in_(in_channels), grid_(grid), classes_(num_classes),
      m1_("head.mask1", in_channels, 16, 3, 1, 1),
      m2_("head.mask2", 16, 1, 1),
      fc1_("head.fc1", in_channels * (grid / 2) * (grid / 2), 64),
      fc2_("head.fc2", 64, 5 + num_classes) {
  if (grid < 2 || grid % 2 != 0) throw Error(ErrorCode::kInvalidConfig, "head grid must be even and >= 2");
  if (num_classes < 1) throw Error(ErrorCode::kInvalidConfig, "head needs at least one class");
}

void Head::init(Rng& rng) {
  m1_.init(rng);
  m2_.init(rng);
  fc1_.init(rng);
  fc2_.init(rng);
}

nn::ParamList Head::params() {
  nn::ParamList out;
  for (nn::Param* p : m1_.params()) out.push_back(p);
  for (nn::Param* p : m2_.params()) out.push_back(p);
  for (nn::Param* p : fc1_.params()) out.push_back(p);
  for (nn::Param* p : fc2_.params()) out.push_back(p);
  return out;
}

HeadOutput Head::forward(const Tensor& patch, Trace* trace) const {
  if (patch.c != in_ || patch.h != grid_ || patch.w != grid_) {
    throw Error(ErrorCode::kShape, "head input shape mismatch");
  }
  Trace local;
  Trace& t = trace ? *trace : local;
  t.input = patch;
  t.mh = nn::relu(m1_.forward(patch, &t.m1));
  HeadOutput out;
  out.mask_logits = m2_.forward(t.mh, &t.m2);
  t.flat = nn::avg_pool2(patch).data;
  t.hidden = nn::relu(fc1_.forward(t.flat));
  const std::vector<double> v = fc2_.forward(t.hidden);
  out.p_logit = v[0];
  for (int k = 0; k < 4; ++k) out.r[k] = v[1 + k];
  out.class_logits.assign(v.begin() + 5, v.end());
  return out;
}

Tensor Head::backward(const Trace& t, const HeadOutput& g) {
  std::vector<double> gv(5 + classes_, 0.0);
  gv[0] = g.p_logit;
  for (int k = 0; k < 4; ++k) gv[1 + k] = g.r[k];
  for (int k = 0; k < classes_ && k < static_cast<int>(g.class_logits.size()); ++k) gv[5 + k] = g.class_logits[k];
  const std::vector<double> gh = fc2_.backward(t.hidden, gv);
  Tensor gpool(in_, grid_ / 2, grid_ / 2);
  gpool.data = fc1_.backward(t.flat, nn::relu_backward(t.hidden, gh));
  Tensor gin = nn::avg_pool2_backward(gpool, grid_, grid_);
  if (g.mask_logits.size()) {
    nn::add_inplace(gin, m1_.backward(t.m1, nn::relu_backward(t.mh, m2_.backward(t.m2, g.mask_logits))));
  }
  return gin;
}

namespace {

constexpr double kEps = 1e-7;

double bce_prob(double p, double target) {
  p = std::clamp(p, kEps, 1.0 - kEps);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

void check_target(const LossTarget& t, int h, int w) {
  if (t.matched && (t.mask.rows() != h || t.mask.cols() != w)) {
    throw Error(ErrorCode::kShape, "mask target does not match the mask grid");
  }
}

}  // namespace

double detection_loss(double p, const std::array<double, 4>& r, const Tensor& mask_probs,
                      const LossTarget& t) {
  double loss = bce_prob(p, t.matched ? 1.0 : 0.0);
  if (!t.matched) return loss;
  check_target(t, mask_probs.h, mask_probs.w);
  for (int k = 0; k < 4; ++k) loss += smooth_l1(r[k] - t.r[k]);
  double m = 0.0;
  const auto& g = t.mask.storage();
  for (std::size_t i = 0; i < g.size(); ++i) m += bce_prob(mask_probs.data[i], g[i] ? 1.0 : 0.0);
  return loss + m / static_cast<double>(g.size());
}

DetectionLossGrad detection_loss_grad(const HeadOutput& out, const LossTarget& t, double class_weight) {
  DetectionLossGrad res;
  const double target = t.matched ? 1.0 : 0.0;
  res.value = nn::bce_with_logit(out.p_logit, target);
  res.grad.p_logit = nn::sigmoid(out.p_logit) - target;
  res.grad.class_logits.assign(out.class_logits.size(), 0.0);
  res.grad.mask_logits = Tensor(out.mask_logits.c, out.mask_logits.h, out.mask_logits.w);
  if (!t.matched) return res;

  check_target(t, out.mask_logits.h, out.mask_logits.w);
  for (int k = 0; k < 4; ++k) {
    const double d = out.r[k] - t.r[k];
    res.value += smooth_l1(d);
    res.grad.r[k] = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
  }
  const auto& g = t.mask.storage();
  const double inv = 1.0 / static_cast<double>(g.size());
  double m = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double z = out.mask_logits.data[i];
    const double y = g[i] ? 1.0 : 0.0;
    m += nn::bce_with_logit(z, y);
    res.grad.mask_logits.data[i] = (nn::sigmoid(z) - y) * inv;
  }
  res.value += m * inv;

  if (class_weight > 0.0 && !out.class_logits.empty()) {
    if (t.cls < 0 || t.cls >= static_cast<int>(out.class_logits.size())) {
      throw Error(ErrorCode::kInvalidGroundTruth, "class index out of range");
    }
    const std::vector<double> p = out.class_probs();
    const double mx = *std::max_element(out.class_logits.begin(), out.class_logits.end());
    double s = 0.0;
    for (double z : out.class_logits) s += std::exp(z - mx);
    res.class_term = class_weight * (mx + std::log(s) - out.class_logits[t.cls]);
    for (std::size_t k = 0; k < p.size(); ++k) {
      res.grad.class_logits[k] = class_weight * (p[k] - (static_cast<int>(k) == t.cls ? 1.0 : 0.0));
    }
  }
  return res;
}

}  // namespace detcid::detection
