#include <algorithm>
#include <string>

#include "detcid/arpn.hpp"

namespace detcid::arpn {

using nn::Conv2d;
using nn::Tensor;

Segmenter::Segmenter(int base_width)
    : base_(base_width),
      c1_("seg.c1", 1, base_width, 3, 1, 1),
      c2_("seg.c2", base_width, 2 * base_width, 3, 1, 1),
      c3_("seg.c3", 2 * base_width, 4 * base_width, 3, 1, 1),
      u1_("seg.u1", 4 * base_width, 4 * base_width, 2, 1, 0, 1),
      u2_("seg.u2", 4 * base_width, 2 * base_width, 2, 1, 0, 1),
      u3_("seg.u3", 2 * base_width, base_width, 2, 1, 0, 1),
      out_("seg.out", base_width, 3, 1) {
  if (base_width < 1) throw Error(ErrorCode::kInvalidConfig, "segmenter width must be positive");
}

void Segmenter::init(Rng& rng) {
  for (Conv2d* c : {&c1_, &c2_, &c3_, &u1_, &u2_, &u3_, &out_}) c->init(rng);
}

nn::ParamList Segmenter::params() {
  nn::ParamList out;
  for (Conv2d* c : {&c1_, &c2_, &c3_, &u1_, &u2_, &u3_, &out_}) {
    for (nn::Param* p : c->params()) out.push_back(p);
  }
  return out;
}

LabelMap Segmenter::forward(const GrayImage& img) const {
  return forward(image_tensor(img), nullptr);
}

LabelMap Segmenter::forward(const Tensor& x, Trace* trace) const {
  if (x.c != 1) throw Error(ErrorCode::kShape, "segmenter expects one channel");
  if (x.h < 8 || x.w < 8 || x.h % 8 != 0 || x.w % 8 != 0) {
    throw Error(ErrorCode::kShape, "segmenter input dims must be positive multiples of 8, got " +
                                       std::to_string(x.h) + "x" + std::to_string(x.w));
  }
  Trace local;
  Trace& t = trace ? *trace : local;
  t.h = x.h;
  t.w = x.w;
  t.e1 = nn::relu(c1_.forward(x, &t.c1));
  Tensor q1 = nn::max_pool2(t.e1, &t.p1);
  t.e2 = nn::relu(c2_.forward(q1, &t.c2));
  Tensor q2 = nn::max_pool2(t.e2, &t.p2);
  t.e3 = nn::relu(c3_.forward(q2, &t.c3));
  Tensor q3 = nn::max_pool2(t.e3, &t.p3);

  t.a1 = nn::relu(u1_.forward(nn::upsample_nearest(q3, x.h / 4, x.w / 4), &t.u1));
  Tensor s1 = t.a1;
  nn::add_inplace(s1, t.e3);
  t.a2 = nn::relu(u2_.forward(nn::upsample_nearest(s1, x.h / 2, x.w / 2), &t.u2));
  Tensor s2 = t.a2;
  nn::add_inplace(s2, t.e2);
  t.a3 = nn::relu(u3_.forward(nn::upsample_nearest(s2, x.h, x.w), &t.u3));
  Tensor s3 = t.a3;
  nn::add_inplace(s3, t.e1);
  t.probs = nn::softmax_channels(out_.forward(s3, &t.out));
  return t.probs;
}

void Segmenter::backward(const Trace& t, const LabelMap& grad_probs) {
  Tensor gs3 = out_.backward(t.out, nn::softmax_channels_backward(t.probs, grad_probs));
  Tensor gs2 = nn::upsample_nearest_backward(u3_.backward(t.u3, nn::relu_backward(t.a3, gs3)),
                                             t.h / 2, t.w / 2);
  Tensor gs1 = nn::upsample_nearest_backward(u2_.backward(t.u2, nn::relu_backward(t.a2, gs2)),
                                             t.h / 4, t.w / 4);
  Tensor gq3 = nn::upsample_nearest_backward(u1_.backward(t.u1, nn::relu_backward(t.a1, gs1)),
                                             t.h / 8, t.w / 8);

  Tensor ge3 = nn::max_pool2_backward(t.p3, gq3);
  nn::add_inplace(ge3, gs1);
  Tensor gq2 = c3_.backward(t.c3, nn::relu_backward(t.e3, ge3));
  Tensor ge2 = nn::max_pool2_backward(t.p2, gq2);
  nn::add_inplace(ge2, gs2);
  Tensor gq1 = c2_.backward(t.c2, nn::relu_backward(t.e2, ge2));
  Tensor ge1 = nn::max_pool2_backward(t.p1, gq1);
  nn::add_inplace(ge1, gs3);
  c1_.backward(t.c1, nn::relu_backward(t.e1, ge1));
}

Discriminator::Discriminator(int patch_size, int base_width) : patch_(patch_size), base_(base_width) {
  if (base_width < 1) throw Error(ErrorCode::kInvalidConfig, "discriminator width must be positive");
  const int widths[5] = {base_width, 2 * base_width, 2 * base_width, 4 * base_width, 4 * base_width};
  int in = 3;
  int s = patch_size;
  for (int i = 0; i < 5; ++i) {
    conv_[i] = Conv2d("disc.conv" + std::to_string(i), in, widths[i], 3);
    in = widths[i];
    s -= 2;
    if (s < 1) {
      throw Error(ErrorCode::kShape,
                  "discriminator patch " + std::to_string(patch_size) + " is too small");
    }
    const int remaining = 4 - i;
    pool_after_[i] = remaining > 0 && s / 2 >= 2 * remaining + 1;
    if (pool_after_[i]) s /= 2;
  }
  fc1_ = nn::Linear("disc.fc1", in * s * s, 32);
  fc2_ = nn::Linear("disc.fc2", 32, 1);
}

void Discriminator::init(Rng& rng) {
  for (auto& c : conv_) c.init(rng);
  fc1_.init(rng);
  fc2_.init(rng);
}

nn::ParamList Discriminator::params() {
  nn::ParamList out;
  for (auto& c : conv_) {
    for (nn::Param* p : c.params()) out.push_back(p);
  }
  for (nn::Param* p : fc1_.params()) out.push_back(p);
  for (nn::Param* p : fc2_.params()) out.push_back(p);
  return out;
}

double Discriminator::forward(const LabelMap& map, Trace* trace) const {
  if (map.c != 3 || map.h != patch_ || map.w != patch_) {
    throw Error(ErrorCode::kShape, "discriminator expects a 3x" + std::to_string(patch_) + "x" +
                                       std::to_string(patch_) + " label map");
  }
  Trace local;
  Trace& t = trace ? *trace : local;
  Tensor x = map;
  for (int i = 0; i < 5; ++i) {
    t.act[i] = nn::relu(conv_[i].forward(x, &t.conv[i]));
    t.pooled[i] = pool_after_[i];
    x = pool_after_[i] ? nn::avg_pool2(t.act[i]) : t.act[i];
  }
  t.last = x;
  t.flat = x.data;
  t.hidden = nn::relu(fc1_.forward(t.flat));
  return fc2_.forward(t.hidden)[0];
}

LabelMap Discriminator::backward(const Trace& t, double grad_score) {
  std::vector<double> gh = fc2_.backward(t.hidden, {grad_score});
  std::vector<double> gflat = fc1_.backward(t.flat, nn::relu_backward(t.hidden, gh));
  Tensor g(t.last.c, t.last.h, t.last.w);
  g.data = std::move(gflat);
  for (int i = 4; i >= 0; --i) {
    if (t.pooled[i]) g = nn::avg_pool2_backward(g, t.act[i].h, t.act[i].w);
    g = conv_[i].backward(t.conv[i], nn::relu_backward(t.act[i], g));
  }
  return g;
}

LabelMap segmenter_forward(const Segmenter& s, const GrayImage& img) { return s.forward(img); }

double discriminator_forward(const Discriminator& d, const LabelMap& map) { return d.forward(map); }

LabelMap segment_image(const Segmenter& s, const GrayImage& img) {
  const int rows = img.rows();
  const int cols = img.cols();
  if (rows < 1 || cols < 1) throw Error(ErrorCode::kShape, "empty image");
  const int pr = std::max(8, (rows + 7) / 8 * 8);
  const int pc = std::max(8, (cols + 7) / 8 * 8);
  if (pr == rows && pc == cols) return s.forward(img);
  Tensor x(1, pr, pc);
  for (int y = 0; y < pr; ++y) {
    for (int xx = 0; xx < pc; ++xx) x.at(0, y, xx) = img(std::min(y, rows - 1), std::min(xx, cols - 1));
  }
  const LabelMap full = s.forward(x, nullptr);
  LabelMap out(3, rows, cols);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < rows; ++y) {
      for (int xx = 0; xx < cols; ++xx) out.at(c, y, xx) = full.at(c, y, xx);
    }
  }
  return out;
}

}  // namespace detcid::arpn
