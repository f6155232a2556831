#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "detcid/detection.hpp"

namespace detcid::detection {

void DetectionConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, "detection: " + m); };
  if (anchor_areas.empty()) fail("anchor_areas must not be empty");
  for (double a : anchor_areas) {
    if (!(a > 0.0) || !std::isfinite(a)) fail("anchor areas must be positive");
  }
  if (stride < 1) fail("stride must be >= 1");
  if (!(tau_anchor <= 1.0)) fail("tau_anchor must be <= 1 (negative means derived)");
  if (!(jitter_min_fraction >= 0.0 && jitter_min_fraction <= 1.0)) fail("jitter_min_fraction must be in [0, 1]");
  if (max_proposals < 1) fail("max_proposals must be >= 1");
  if (!(tau_nms > 0.0 && tau_nms <= 1.0)) fail("tau_nms must be in (0, 1]");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) fail("score_threshold must be in [0, 1]");
  if (grid < 2 || grid % 2 != 0) fail("grid must be even and >= 2");
  if (num_classes < 1 || num_classes > 2) fail("num_classes must be 1 or 2");
  if (backbone_width < 1 || feature_width < 1) fail("widths must be >= 1");
}

Json to_json(const DetectionConfig& c) {
  return {{"anchor_areas", c.anchor_areas}, {"stride", c.stride},
          {"tau_anchor", c.tau_anchor}, {"jitter_min_fraction", c.jitter_min_fraction},
          {"max_proposals", c.max_proposals}, {"tau_nms", c.tau_nms},
          {"score_threshold", c.score_threshold}, {"grid", c.grid},
          {"num_classes", c.num_classes}, {"backbone_width", c.backbone_width},
          {"feature_width", c.feature_width}};
}

DetectionConfig detection_config_from_json(const Json& j) {
  DetectionConfig c;
  StrictObject o(j, "detection");
  o.get("anchor_areas", c.anchor_areas);
  o.get("stride", c.stride);
  o.get("tau_anchor", c.tau_anchor);
  o.get("jitter_min_fraction", c.jitter_min_fraction);
  o.get("max_proposals", c.max_proposals);
  o.get("tau_nms", c.tau_nms);
  o.get("score_threshold", c.score_threshold);
  o.get("grid", c.grid);
  o.get("num_classes", c.num_classes);
  o.get("backbone_width", c.backbone_width);
  o.get("feature_width", c.feature_width);
  o.finish();
  c.validate();
  return c;
}

DetectionConfig toy_detection_config() {
  DetectionConfig c;
  c.anchor_areas = {16.0 * 16.0, 24.0 * 24.0};
  c.stride = 4;
  return c;
}

void HeadTrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, "head: " + m); };
  if (steps < 0) fail("steps must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
  if (rois_per_step < 1) fail("rois_per_step must be >= 1");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) fail("positive_fraction must be in [0, 1]");
  if (!(match_threshold > 0.0 && match_threshold <= 1.0)) fail("match_threshold must be in (0, 1]");
  if (!(class_weight >= 0.0) || !std::isfinite(class_weight)) fail("class_weight must be finite and >= 0");
}

Json to_json(const HeadTrainConfig& c) {
  return {{"steps", c.steps}, {"learning_rate", c.learning_rate}, {"seed", c.seed},
          {"rois_per_step", c.rois_per_step}, {"positive_fraction", c.positive_fraction},
          {"match_threshold", c.match_threshold}, {"class_weight", c.class_weight}};
}

HeadTrainConfig head_train_config_from_json(const Json& j) {
  HeadTrainConfig c;
  StrictObject o(j, "head");
  o.get("steps", c.steps);
  o.get("learning_rate", c.learning_rate);
  o.get("seed", c.seed);
  o.get("rois_per_step", c.rois_per_step);
  o.get("positive_fraction", c.positive_fraction);
  o.get("match_threshold", c.match_threshold);
  o.get("class_weight", c.class_weight);
  o.finish();
  c.validate();
  return c;
}

DetectorModel::DetectorModel(const DetectionConfig& c)
    : cfg(c),
      backbone(c.backbone_width, c.feature_width),
      head(c.feature_width + 4, c.grid, c.num_classes) {
  cfg.validate();
}

nn::Tensor roi_patch(const FeaturePyramid& fp, const arpn::LabelMap& map, const GrayImage& img,
                     const BoundingBox& box, int grid) {
  const nn::Tensor a = roi_align(fp.levels[0], FeaturePyramid::kStrides[0], box, grid);
  const nn::Tensor b = roi_align(map, 1.0, box, grid);
  const nn::Tensor c = roi_align(arpn::image_tensor(img), 1.0, box, grid);
  return nn::concat_channels({&a, &b, &c});
}

std::vector<Proposal> candidate_proposals(const arpn::LabelMap& map, const DetectionConfig& cfg) {
  const double tau = cfg.tau_anchor < 0.0 ? 0.5 : cfg.tau_anchor;
  std::vector<Proposal> props = propose_anchors(map, cfg.anchors(), tau, cfg.stride);
  if (static_cast<int>(props.size()) > cfg.max_proposals) props.resize(cfg.max_proposals);
  return jitter_proposals(props, map, cfg.jitter_min_fraction);
}

namespace {

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<Detection> detect(const GrayImage& img, const arpn::Segmenter& segmenter,
                              const DetectorModel& model, DetectTrace* trace) {
  const DetectionConfig& cfg = model.cfg;
  const arpn::LabelMap map = arpn::segment_image(segmenter, img);
  const std::vector<Proposal> props = candidate_proposals(map, cfg);
  const FeaturePyramid fp = model.backbone.forward(img);
  DetectTrace local;
  DetectTrace& t = trace ? *trace : local;
  t.backbone_passes = 1;
  t.candidates = static_cast<int>(props.size());

  std::vector<Detection> dets;
  for (const Proposal& p : props) {
    const HeadOutput out = model.head.forward(roi_patch(fp, map, img, p.box, cfg.grid));
    const double score = out.p();
    if (score < cfg.score_threshold) continue;
    Detection d;
    d.score = score;
    d.cell_class = static_cast<CellClass>(argmax(out.class_logits));
    d.offsets = out.r;
    d.box = decode_box(p.box, out.r);
    d.mask_box = p.box;
    d.anchor = p.anchor;
    d.mask = InstanceMask(cfg.grid, cfg.grid, 0);
    bool any = false;
    for (std::size_t i = 0; i < d.mask.size(); ++i) {
      if (out.mask_logits.data[i] >= 0.0) {
        d.mask.storage()[i] = 1;
        any = true;
      }
    }
    if (any) dets.push_back(std::move(d));
  }
  t.before_nms = static_cast<int>(dets.size());
  std::vector<Detection> kept = mask_nms(dets, cfg.tau_nms, img.rows(), img.cols());
  // Masks can vanish when a tiny grid cell falls between pixel centres.
  std::erase_if(kept, [&](const Detection& d) { return core::is_empty(paste_mask(d, img.rows(), img.cols())); });
  t.proposals = static_cast<int>(props.size());
  return kept;
}

InstanceMask mask_target(const InstanceMask& mask, const BoundingBox& box, int grid) {
  InstanceMask out(grid, grid, 0);
  const double bw = box.width / grid;
  const double bh = box.height / grid;
  for (int i = 0; i < grid; ++i) {
    const int py = static_cast<int>(std::floor(box.top() + (i + 0.5) * bh + 0.5));
    for (int j = 0; j < grid; ++j) {
      const int px = static_cast<int>(std::floor(box.left() + (j + 0.5) * bw + 0.5));
      if (mask.contains(py, px) && mask(py, px)) out(i, j) = 1;
    }
  }
  return out;
}

std::vector<LossTarget> proposal_targets(const std::vector<Proposal>& props,
                                         const MaskStack& truth, int rows, int cols, int grid,
                                         double match_threshold) {
  struct Cell {
    std::vector<long long> integral;
    long long area = 0;
    BoundingBox box;
  };
  std::vector<Cell> cells;
  for (const auto& m : truth.masks) {
    Cell c;
    c.integral.assign(static_cast<std::size_t>(rows + 1) * (cols + 1), 0);
    for (int y = 0; y < rows; ++y) {
      long long row = 0;
      for (int x = 0; x < cols; ++x) {
        row += m(y, x) ? 1 : 0;
        c.integral[(y + 1) * (cols + 1) + x + 1] = c.integral[y * (cols + 1) + x + 1] + row;
      }
    }
    c.area = c.integral.back();
    if (c.area > 0) c.box = core::tight_bbox(m);
    cells.push_back(std::move(c));
  }

  std::vector<LossTarget> out;
  out.reserve(props.size());
  for (const Proposal& p : props) {
    LossTarget t;
    const PixelRange r = pixel_range(p.box, rows, cols);
    const long long box_area = r.count();
    int best = -1;
    double best_m = -1.0, best_iou = -1.0;
    for (std::size_t k = 0; k < cells.size() && box_area > 0; ++k) {
      const Cell& c = cells[k];
      if (c.area == 0) continue;
      const auto at = [&](int y, int x) { return c.integral[static_cast<std::size_t>(y) * (cols + 1) + x]; };
      const long long inter = at(r.y1, r.x1) - at(r.y0, r.x1) - at(r.y1, r.x0) + at(r.y0, r.x0);
      const double m = static_cast<double>(inter) / static_cast<double>(std::min(box_area, c.area));
      const double iou = static_cast<double>(inter) / static_cast<double>(box_area + c.area - inter);
      if (m > best_m || (m == best_m && iou > best_iou)) {
        best = static_cast<int>(k);
        best_m = m;
        best_iou = iou;
      }
    }
    if (best >= 0 && best_m >= match_threshold) {
      t.matched = true;
      t.r = encode_box(p.box, cells[best].box);
      t.mask = mask_target(truth.masks[best], p.box, grid);
      t.cls = static_cast<int>(truth.class_labels[best]);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<HeadSample> prepare_head_samples(const std::vector<synthesis::AnnotatedImage>& data,
                                             const arpn::Segmenter& segmenter,
                                             DetectionConfig& cfg, double match_threshold,
                                             int workers) {
  cfg.validate();
  if (cfg.tau_anchor < 0.0) {
    long long smallest = std::numeric_limits<long long>::max();
    for (const auto& a : data) {
      for (const auto& m : a.masks.masks) {
        const long long n = core::area(m);
        if (n > 0) smallest = std::min(smallest, n);
      }
    }
    if (smallest == std::numeric_limits<long long>::max()) {
      throw Error(ErrorCode::kInvalidConfig, "detection: no cells in the training set to derive tau_anchor");
    }
    const double min_anchor = *std::min_element(cfg.anchor_areas.begin(), cfg.anchor_areas.end());
    cfg.tau_anchor = derive_tau_anchor(static_cast<double>(smallest), min_anchor);
  }
  std::vector<HeadSample> out(data.size());
  const DetectionConfig& c = cfg;
  dataset::parallel_for(static_cast<int>(data.size()), workers, [&](int i) {
    const auto& a = data[i];
    HeadSample s;
    s.image = a.image;
    s.truth = a.masks;
    s.map = arpn::segment_image(segmenter, a.image);
    s.proposals = candidate_proposals(s.map, c);
    s.targets = proposal_targets(s.proposals, a.masks, a.image.rows(), a.image.cols(), c.grid,
                                 match_threshold);
    if (c.num_classes == 1) {
      for (auto& t : s.targets) t.cls = 0;
    }
    out[i] = std::move(s);
  });
  return out;
}

HeadState init_head(const DetectionConfig& cfg, const HeadTrainConfig& train) {
  train.validate();
  HeadState st{train, DetectorModel(cfg), nn::Adam(train.learning_rate), Rng(train.seed), 0, {}};
  st.model.backbone.init(st.rng);
  st.model.head.init(st.rng);
  return st;
}

namespace {

nn::ParamList all_params(DetectorModel& m) {
  nn::ParamList p = m.backbone.params();
  for (nn::Param* q : m.head.params()) p.push_back(q);
  return p;
}

/// Draw up to k distinct entries of v.
std::vector<int> draw(std::vector<int> v, int k, Rng& rng) {
  k = std::min<int>(k, static_cast<int>(v.size()));
  for (int i = 0; i < k; ++i) {
    const auto j = rng.uniform_int(i, static_cast<std::int64_t>(v.size()) - 1);
    std::swap(v[i], v[j]);
  }
  v.resize(k);
  return v;
}

void head_step(HeadState& st, const std::vector<HeadSample>& samples,
               const std::vector<int>& usable) {
  const auto& cfg = st.model.cfg;
  const HeadSample& s = samples[usable[st.rng.uniform_int(0, static_cast<std::int64_t>(usable.size()) - 1)]];
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < s.targets.size(); ++i) {
    (s.targets[i].matched ? pos : neg).push_back(static_cast<int>(i));
  }
  const int want_pos = static_cast<int>(std::lround(st.train.rois_per_step * st.train.positive_fraction));
  std::vector<int> picked = draw(pos, want_pos, st.rng);
  const std::vector<int> negs = draw(neg, st.train.rois_per_step - static_cast<int>(picked.size()), st.rng);
  picked.insert(picked.end(), negs.begin(), negs.end());

  const nn::ParamList params = all_params(st.model);
  nn::zero_grads(params);
  Backbone::Trace bt;
  const FeaturePyramid fp = st.model.backbone.forward(s.image, &bt);
  nn::Tensor g4(fp.levels[0].c, fp.levels[0].h, fp.levels[0].w);
  const double inv = 1.0 / static_cast<double>(picked.size());
  const int f = cfg.feature_width;
  double loss = 0.0;
  int npos = 0;
  for (int idx : picked) {
    const Proposal& p = s.proposals[idx];
    Head::Trace ht;
    const HeadOutput out = st.model.head.forward(roi_patch(fp, s.map, s.image, p.box, cfg.grid), &ht);
    DetectionLossGrad l = detection_loss_grad(out, s.targets[idx], st.train.class_weight);
    loss += l.total() * inv;
    npos += s.targets[idx].matched ? 1 : 0;
    HeadOutput& g = l.grad;
    g.p_logit *= inv;
    for (double& v : g.r) v *= inv;
    for (double& v : g.class_logits) v *= inv;
    for (double& v : g.mask_logits.data) v *= inv;
    const nn::Tensor gp = st.model.head.backward(ht, g);
    nn::Tensor gf(f, cfg.grid, cfg.grid);
    std::copy(gp.data.begin(), gp.data.begin() + static_cast<std::ptrdiff_t>(gf.size()), gf.data.begin());
    nn::add_inplace(g4, roi_align_backward(gf, g4.h, g4.w, FeaturePyramid::kStrides[0], p.box));
  }
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kDivergence, "head step " + std::to_string(st.step) + ": loss is not finite");
  }
  st.model.backbone.backward(bt, {g4, nn::Tensor(), nn::Tensor()});
  st.adam.step(params);
  st.losses.push_back({st.step, loss, npos, static_cast<int>(picked.size())});
  ++st.step;
}

}  // namespace

void train_head_steps(HeadState& state, const std::vector<HeadSample>& samples, int steps) {
  std::vector<int> usable;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].proposals.empty()) usable.push_back(static_cast<int>(i));
  }
  if (steps > 0 && usable.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "head: no training image produced any proposal");
  }
  for (int k = 0; k < steps; ++k) {
    HeadState backup = state;
    try {
      head_step(state, samples, usable);
    } catch (...) {
      state = std::move(backup);
      throw;
    }
  }
}

HeadState train_head(const std::vector<HeadSample>& samples, const DetectionConfig& cfg,
                     const HeadTrainConfig& train) {
  HeadState st = init_head(cfg, train);
  train_head_steps(st, samples, train.steps);
  return st;
}

Json to_json(const HeadState& st) {
  auto& m = const_cast<DetectorModel&>(st.model);
  Json losses = Json::array();
  for (const auto& l : st.losses) losses.push_back({l.step, l.loss, l.positives, l.rois});
  return {{"format", "detcid-head"},
          {"version", 1},
          {"detection", to_json(st.model.cfg)},
          {"train", to_json(st.train)},
          {"step", st.step},
          {"backbone", nn::params_to_json(m.backbone.params())},
          {"head", nn::params_to_json(m.head.params())},
          {"adam", st.adam.state_json()},
          {"rng", st.rng.state()},
          {"losses", losses}};
}

HeadState head_state_from_json(const Json& j) {
  try {
    if (j.at("format") != "detcid-head") throw Error(ErrorCode::kParse, "not a head checkpoint");
    const DetectionConfig cfg = detection_config_from_json(j.at("detection"));
    const HeadTrainConfig train = head_train_config_from_json(j.at("train"));
    HeadState st{train, DetectorModel(cfg), nn::Adam(train.learning_rate), Rng(train.seed),
                 j.at("step").get<int>(), {}};
    nn::params_from_json(st.model.backbone.params(), j.at("backbone"));
    nn::params_from_json(st.model.head.params(), j.at("head"));
    st.adam.load_state_json(j.at("adam"));
    st.rng.set_state(j.at("rng").get<std::string>());
    for (const auto& l : j.at("losses")) {
      st.losses.push_back({l.at(0).get<int>(), l.at(1).get<double>(), l.at(2).get<int>(), l.at(3).get<int>()});
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("head checkpoint: ") + e.what());
  }
}

std::string head_losses_csv(const std::vector<HeadLossRecord>& losses) {
  std::string out = "step,L_F,positives,rois\n";
  char buf[128];
  for (const auto& l : losses) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%d,%d\n", l.step, l.loss, l.positives, l.rois);
    out += buf;
  }
  return out;
}

}  // namespace detcid::detection
