#include <algorithm>
#include <cmath>
#include <string>

#include "detcid/detection.hpp"

namespace detcid::detection {

using nn::Conv2d;
using nn::Tensor;

Backbone::Backbone(int base_width, int feature_width)
    : base_(base_width),
      feature_width_(feature_width),
      stem_("bb.stem", 1, base_width, 3, 2, 1),
      down1_("bb.down1", base_width, base_width, 3, 2, 1),
      down2_("bb.down2", base_width, 2 * base_width, 3, 2, 1),
      down3_("bb.down3", 2 * base_width, 2 * base_width, 3, 2, 1),
      lat4_("bb.lat4", base_width, feature_width, 1),
      lat8_("bb.lat8", 2 * base_width, feature_width, 1),
      lat16_("bb.lat16", 2 * base_width, feature_width, 1),
      r1_{Conv2d("bb.res1a", base_width, base_width, 3, 1, 1),
          Conv2d("bb.res1b", base_width, base_width, 3, 1, 1)},
      r2_{Conv2d("bb.res2a", 2 * base_width, 2 * base_width, 3, 1, 1),
          Conv2d("bb.res2b", 2 * base_width, 2 * base_width, 3, 1, 1)},
      r3_{Conv2d("bb.res3a", 2 * base_width, 2 * base_width, 3, 1, 1),
          Conv2d("bb.res3b", 2 * base_width, 2 * base_width, 3, 1, 1)} {
  if (base_width < 1 || feature_width < 1) {
    throw Error(ErrorCode::kInvalidConfig, "backbone widths must be positive");
  }
}

void Backbone::init(Rng& rng) {
  for (Conv2d* c : {&stem_, &down1_, &r1_.a, &r1_.b, &down2_, &r2_.a, &r2_.b, &down3_, &r3_.a,
                    &r3_.b, &lat4_, &lat8_, &lat16_}) {
    c->init(rng);
  }
}

nn::ParamList Backbone::params() {
  nn::ParamList out;
  for (Conv2d* c : {&stem_, &down1_, &r1_.a, &r1_.b, &down2_, &r2_.a, &r2_.b, &down3_, &r3_.a,
                    &r3_.b, &lat4_, &lat8_, &lat16_}) {
    for (nn::Param* p : c->params()) out.push_back(p);
  }
  return out;
}

Tensor Backbone::res_forward(const Res& r, const Tensor& x, ResTrace* t) {
  t->h = nn::relu(r.a.forward(x, &t->c1));
  Tensor y = r.b.forward(t->h, &t->c2);
  nn::add_inplace(y, x);
  t->out = nn::relu(y);
  return t->out;
}

Tensor Backbone::res_backward(Res& r, const ResTrace& t, const Tensor& g) {
  Tensor gy = nn::relu_backward(t.out, g);
  Tensor gx = gy;
  nn::add_inplace(gx, r.a.backward(t.c1, nn::relu_backward(t.h, r.b.backward(t.c2, gy))));
  return gx;
}

FeaturePyramid Backbone::forward(const GrayImage& img, Trace* trace) const {
  if (img.rows() < 32 || img.cols() < 32) {
    throw Error(ErrorCode::kShape, "backbone needs images of at least 32x32, got " +
                                       std::to_string(img.rows()) + "x" + std::to_string(img.cols()));
  }
  Trace local;
  Trace& t = trace ? *trace : local;
  t.s0 = nn::relu(stem_.forward(arpn::image_tensor(img), &t.stem));
  t.d1 = nn::relu(down1_.forward(t.s0, &t.down1));
  const Tensor c4 = res_forward(r1_, t.d1, &t.r1);
  t.d2 = nn::relu(down2_.forward(c4, &t.down2));
  const Tensor c8 = res_forward(r2_, t.d2, &t.r2);
  t.d3 = nn::relu(down3_.forward(c8, &t.down3));
  const Tensor c16 = res_forward(r3_, t.d3, &t.r3);

  FeaturePyramid fp;
  fp.levels[2] = lat16_.forward(c16, &t.lat16);
  fp.levels[1] = lat8_.forward(c8, &t.lat8);
  nn::add_inplace(fp.levels[1], nn::upsample_nearest(fp.levels[2], c8.h, c8.w));
  fp.levels[0] = lat4_.forward(c4, &t.lat4);
  nn::add_inplace(fp.levels[0], nn::upsample_nearest(fp.levels[1], c4.h, c4.w));
  return fp;
}

void Backbone::backward(const Trace& t, const std::array<Tensor, 3>& grads) {
  const Tensor& c4 = t.r1.out;
  const Tensor& c8 = t.r2.out;
  const Tensor& c16 = t.r3.out;
  auto or_zero = [&](const Tensor& g, const Tensor& like) {
    return g.size() ? g : Tensor(feature_width_, like.h, like.w);
  };
  const Tensor g4 = or_zero(grads[0], c4);
  Tensor g8 = or_zero(grads[1], c8);
  nn::add_inplace(g8, nn::upsample_nearest_backward(g4, c8.h, c8.w));
  Tensor g16 = or_zero(grads[2], c16);
  nn::add_inplace(g16, nn::upsample_nearest_backward(g8, c16.h, c16.w));

  Tensor gc16 = lat16_.backward(t.lat16, g16);
  Tensor gc8 = lat8_.backward(t.lat8, g8);
  Tensor gc4 = lat4_.backward(t.lat4, g4);

  nn::add_inplace(gc8, down3_.backward(t.down3, nn::relu_backward(t.d3, res_backward(r3_, t.r3, gc16))));
  nn::add_inplace(gc4, down2_.backward(t.down2, nn::relu_backward(t.d2, res_backward(r2_, t.r2, gc8))));
  const Tensor gs0 = down1_.backward(t.down1, nn::relu_backward(t.d1, res_backward(r1_, t.r1, gc4)));
  stem_.backward(t.stem, nn::relu_backward(t.s0, gs0));
}

FeaturePyramid backbone_forward(const Backbone& b, const GrayImage& img) { return b.forward(img); }

namespace {

struct Tap {
  int x0, x1, y0, y1;
  double ax, ay;
};

Tap bilinear_tap(double xf, double yf, int h, int w) {
  xf = std::clamp(xf, 0.0, static_cast<double>(w - 1));
  yf = std::clamp(yf, 0.0, static_cast<double>(h - 1));
  Tap t;
  t.x0 = static_cast<int>(std::floor(xf));
  t.y0 = static_cast<int>(std::floor(yf));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.ax = xf - t.x0;
  t.ay = yf - t.y0;
  return t;
}

void check_box(const BoundingBox& box, int grid) {
  if (!(box.width > 0.0 && box.height > 0.0) || !std::isfinite(box.cx) || !std::isfinite(box.cy) ||
      !std::isfinite(box.width) || !std::isfinite(box.height)) {
    throw Error(ErrorCode::kInvalidBox, "roi box must have positive finite size");
  }
  if (grid < 1) throw Error(ErrorCode::kInvalidConfig, "roi grid must be >= 1");
}

}  // namespace

Tensor roi_align(const Tensor& f, double stride, const BoundingBox& box, int grid) {
  check_box(box, grid);
  if (f.h < 1 || f.w < 1) throw Error(ErrorCode::kShape, "empty feature map");
  Tensor out(f.c, grid, grid);
  const double bw = box.width / grid;
  const double bh = box.height / grid;
  for (int i = 0; i < grid; ++i) {
    const double yf = (box.top() + (i + 0.5) * bh + 0.5) / stride - 0.5;
    for (int j = 0; j < grid; ++j) {
      const double xf = (box.left() + (j + 0.5) * bw + 0.5) / stride - 0.5;
      const Tap t = bilinear_tap(xf, yf, f.h, f.w);
      for (int c = 0; c < f.c; ++c) {
        const double top = (1 - t.ax) * f.at(c, t.y0, t.x0) + t.ax * f.at(c, t.y0, t.x1);
        const double bot = (1 - t.ax) * f.at(c, t.y1, t.x0) + t.ax * f.at(c, t.y1, t.x1);
        out.at(c, i, j) = (1 - t.ay) * top + t.ay * bot;
      }
    }
  }
  return out;
}

Tensor roi_align_backward(const Tensor& g, int feat_h, int feat_w, double stride,
                          const BoundingBox& box) {
  const int grid = g.h;
  check_box(box, grid);
  Tensor out(g.c, feat_h, feat_w);
  const double bw = box.width / grid;
  const double bh = box.height / grid;
  for (int i = 0; i < grid; ++i) {
    const double yf = (box.top() + (i + 0.5) * bh + 0.5) / stride - 0.5;
    for (int j = 0; j < grid; ++j) {
      const double xf = (box.left() + (j + 0.5) * bw + 0.5) / stride - 0.5;
      const Tap t = bilinear_tap(xf, yf, feat_h, feat_w);
      for (int c = 0; c < g.c; ++c) {
        const double v = g.at(c, i, j);
        out.at(c, t.y0, t.x0) += (1 - t.ay) * (1 - t.ax) * v;
        out.at(c, t.y0, t.x1) += (1 - t.ay) * t.ax * v;
        out.at(c, t.y1, t.x0) += t.ay * (1 - t.ax) * v;
        out.at(c, t.y1, t.x1) += t.ay * t.ax * v;
      }
    }
  }
  return out;
}

}  // namespace detcid::detection
