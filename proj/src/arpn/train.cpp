#include <cmath>
#include <cstdio>
#include <string>

#include "detcid/arpn.hpp"

namespace detcid::arpn {

namespace {

constexpr double kProbFloor = 1e-7;

bool finite(double v) { return std::isfinite(v); }

}  // namespace

double segmenter_loss(const LabelMap& map, const LabelMap& gt, double d_logit, const ClassWeights& w) {
  const SegmenterLoss l = segmenter_loss_grad(map, gt, d_logit, w);
  return l.total();
}

SegmenterLoss segmenter_loss_grad(const LabelMap& map, const LabelMap& gt, double d_logit,
                                  const ClassWeights& w) {
  if (map.c != 3 || !map.same_shape(gt)) throw Error(ErrorCode::kShape, "segmenter loss shape mismatch");
  validate_one_hot(gt);
  SegmenterLoss out;
  out.grad_map = LabelMap(3, map.h, map.w);
  const std::size_t plane = static_cast<std::size_t>(map.h) * map.w;
  const double inv_n = 1.0 / static_cast<double>(plane);
  double ce = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    int cls = 0;
    while (gt.data[cls * plane + i] != 1.0) ++cls;
    const std::size_t k = cls * plane + i;
    const double p = map.data[k];
    ce += w[cls] * -std::log(std::max(p, kProbFloor));
    if (p > kProbFloor) out.grad_map.data[k] = -w[cls] * inv_n / p;
  }
  out.ce = ce * inv_n;
  out.adv = nn::bce_with_logit(d_logit, 1.0);
  out.grad_logit = nn::sigmoid(d_logit) - 1.0;
  return out;
}

double discriminator_loss(double d_gt_logit, double d_gen_logit) {
  return discriminator_loss_grad(d_gt_logit, d_gen_logit).value;
}

DiscriminatorLoss discriminator_loss_grad(double d_gt_logit, double d_gen_logit) {
  DiscriminatorLoss out;
  out.value = nn::bce_with_logit(d_gt_logit, 1.0) + nn::bce_with_logit(d_gen_logit, 0.0);
  out.grad_gt = nn::sigmoid(d_gt_logit) - 1.0;
  out.grad_gen = nn::sigmoid(d_gen_logit);
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, "arpn: " + m); };
  if (patch_size < 16 || patch_size % 8 != 0) fail("patch_size must be a multiple of 8 and >= 16");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !finite(learning_rate)) fail("learning_rate must be finite and >= 0");
  if (steps < 0) fail("steps must be >= 0");
  if (base_width < 1 || disc_width < 1) fail("widths must be >= 1");
  if (wall_width < 1) fail("wall_width must be >= 1");
  if (!(adversarial_weight >= 0.0) || !finite(adversarial_weight)) {
    fail("adversarial_weight must be finite and >= 0");
  }
  if (!class_weights.empty()) {
    if (class_weights.size() != 3) fail("class_weights needs 3 entries");
    for (double v : class_weights) {
      if (!(v > 0.0) || !finite(v)) fail("class_weights must be positive");
    }
  }
}

Json to_json(const TrainConfig& c) {
  return {{"patch_size", c.patch_size}, {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}, {"steps", c.steps},
          {"seed", c.seed}, {"base_width", c.base_width},
          {"disc_width", c.disc_width}, {"wall_width", c.wall_width},
          {"adversarial_weight", c.adversarial_weight},
          {"class_weights", c.class_weights}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  StrictObject o(j, "arpn");
  o.get("patch_size", c.patch_size);
  o.get("batch_size", c.batch_size);
  o.get("learning_rate", c.learning_rate);
  o.get("steps", c.steps);
  o.get("seed", c.seed);
  o.get("base_width", c.base_width);
  o.get("disc_width", c.disc_width);
  o.get("wall_width", c.wall_width);
  o.get("adversarial_weight", c.adversarial_weight);
  o.get("class_weights", c.class_weights);
  o.finish();
  c.validate();
  return c;
}

std::vector<ArpnSample> prepare_samples(const std::vector<synthesis::AnnotatedImage>& data,
                                        int wall_width) {
  std::vector<ArpnSample> out;
  out.reserve(data.size());
  for (const auto& a : data) {
    out.push_back({a.image, ground_truth_map(a.masks, a.image.rows(), a.image.cols(), wall_width)});
  }
  return out;
}

ArpnState init_arpn(const std::vector<ArpnSample>& samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw Error(ErrorCode::kInvalidConfig, "arpn: empty training set");
  std::vector<LabelMap> truths;
  for (const auto& s : samples) {
    if (s.image.rows() < cfg.patch_size || s.image.cols() < cfg.patch_size) {
      throw Error(ErrorCode::kShape, "arpn: training image smaller than patch_size");
    }
    truths.push_back(s.truth);
  }
  ArpnState st{cfg,
               Segmenter(cfg.base_width),
               Discriminator(cfg.patch_size, cfg.disc_width),
               {1.0, 1.0, 1.0},
               nn::Adam(cfg.learning_rate),
               nn::Adam(cfg.learning_rate),
               Rng(cfg.seed),
               0,
               {}};
  st.segmenter.init(st.rng);
  st.discriminator.init(st.rng);
  if (cfg.class_weights.empty()) {
    st.class_weights = inverse_frequency_weights(truths);
  } else {
    for (int c = 0; c < 3; ++c) st.class_weights[c] = cfg.class_weights[c];
  }
  return st;
}

namespace {

void one_step(ArpnState& st, const std::vector<ArpnSample>& samples) {
  const int p = st.cfg.patch_size;
  const int nb = st.cfg.batch_size;
  const double inv_b = 1.0 / nb;
  std::vector<nn::Tensor> xs;
  std::vector<LabelMap> gts;
  for (int b = 0; b < nb; ++b) {
    const auto& s = samples[st.rng.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1)];
    const int y0 = static_cast<int>(st.rng.uniform_int(0, s.image.rows() - p));
    const int x0 = static_cast<int>(st.rng.uniform_int(0, s.image.cols() - p));
    nn::Tensor x(1, p, p);
    LabelMap g(3, p, p);
    for (int y = 0; y < p; ++y) {
      for (int xx = 0; xx < p; ++xx) {
        x.at(0, y, xx) = s.image(y0 + y, x0 + xx);
        for (int c = 0; c < 3; ++c) g.at(c, y, xx) = s.truth.at(c, y0 + y, x0 + xx);
      }
    }
    xs.push_back(std::move(x));
    gts.push_back(std::move(g));
  }

  const nn::ParamList dparams = st.discriminator.params();
  const nn::ParamList sparams = st.segmenter.params();

  nn::zero_grads(dparams);
  double ld = 0.0;
  for (int b = 0; b < nb; ++b) {
    const LabelMap gen = st.segmenter.forward(xs[b], nullptr);
    Discriminator::Trace tg, tf;
    const double dg = st.discriminator.forward(gts[b], &tg);
    const double df = st.discriminator.forward(gen, &tf);
    const DiscriminatorLoss l = discriminator_loss_grad(dg, df);
    ld += l.value * inv_b;
    st.discriminator.backward(tg, l.grad_gt * inv_b);
    st.discriminator.backward(tf, l.grad_gen * inv_b);
  }
  if (!finite(ld)) {
    throw Error(ErrorCode::kDivergence, "arpn step " + std::to_string(st.step) + ": L_D is not finite");
  }
  st.adam_d.step(dparams);

  nn::zero_grads(sparams);
  nn::zero_grads(dparams);
  double ce = 0.0;
  double adv = 0.0;
  for (int b = 0; b < nb; ++b) {
    Segmenter::Trace ts;
    const LabelMap probs = st.segmenter.forward(xs[b], &ts);
    Discriminator::Trace td;
    const double d = st.discriminator.forward(probs, &td);
    SegmenterLoss l = segmenter_loss_grad(probs, gts[b], d, st.class_weights);
    ce += l.ce * inv_b;
    adv += l.adv * inv_b;
    LabelMap g = st.discriminator.backward(td, st.cfg.adversarial_weight * l.grad_logit * inv_b);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += l.grad_map.data[i] * inv_b;
    st.segmenter.backward(ts, g);
  }
  nn::zero_grads(dparams);
  if (!finite(ce) || !finite(adv)) {
    throw Error(ErrorCode::kDivergence, "arpn step " + std::to_string(st.step) +
                                            ": segmenter loss is not finite (ce=" +
                                            std::to_string(ce) + ", adv=" + std::to_string(adv) + ")");
  }
  st.adam_s.step(sparams);
  st.losses.push_back({st.step, ce, adv, ld});
  ++st.step;
}

}  // namespace

void train_arpn_steps(ArpnState& state, const std::vector<ArpnSample>& samples, int steps) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidConfig, "arpn: empty training set");
  for (int k = 0; k < steps; ++k) {
    ArpnState backup = state;
    try {
      one_step(state, samples);
    } catch (...) {
      state = std::move(backup);
      throw;
    }
  }
}

ArpnState train_arpn(const std::vector<ArpnSample>& samples, const TrainConfig& cfg) {
  ArpnState st = init_arpn(samples, cfg);
  train_arpn_steps(st, samples, cfg.steps);
  return st;
}

Json to_json(const ArpnState& st) {
  auto& s = const_cast<ArpnState&>(st);
  Json losses = Json::array();
  for (const auto& l : st.losses) losses.push_back({l.step, l.seg_ce, l.seg_adv, l.disc});
  return {{"format", "detcid-arpn"},
          {"version", 1},
          {"config", to_json(st.cfg)},
          {"step", st.step},
          {"class_weights", st.class_weights},
          {"segmenter", nn::params_to_json(s.segmenter.params())},
          {"discriminator", nn::params_to_json(s.discriminator.params())},
          {"adam_segmenter", st.adam_s.state_json()},
          {"adam_discriminator", st.adam_d.state_json()},
          {"rng", st.rng.state()},
          {"losses", losses}};
}

ArpnState arpn_state_from_json(const Json& j) {
  try {
    if (j.at("format") != "detcid-arpn") throw Error(ErrorCode::kParse, "not an arpn checkpoint");
    const TrainConfig cfg = train_config_from_json(j.at("config"));
    ArpnState st{cfg,
                 Segmenter(cfg.base_width),
                 Discriminator(cfg.patch_size, cfg.disc_width),
                 j.at("class_weights").get<ClassWeights>(),
                 nn::Adam(cfg.learning_rate),
                 nn::Adam(cfg.learning_rate),
                 Rng(cfg.seed),
                 j.at("step").get<int>(),
                 {}};
    nn::params_from_json(st.segmenter.params(), j.at("segmenter"));
    nn::params_from_json(st.discriminator.params(), j.at("discriminator"));
    st.adam_s.load_state_json(j.at("adam_segmenter"));
    st.adam_d.load_state_json(j.at("adam_discriminator"));
    st.rng.set_state(j.at("rng").get<std::string>());
    for (const auto& l : j.at("losses")) {
      st.losses.push_back({l.at(0).get<int>(), l.at(1).get<double>(), l.at(2).get<double>(),
                           l.at(3).get<double>()});
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("arpn checkpoint: ") + e.what());
  }
}

std::string losses_csv(const std::vector<LossRecord>& losses) {
  std::string out = "step,L_S_ce,L_S_adv,L_D\n";
  char buf[128];
  for (const auto& l : losses) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g\n", l.step, l.seg_ce, l.seg_adv, l.disc);
    out += buf;
  }
  return out;
}

}  // namespace detcid::arpn
