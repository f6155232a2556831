#include "detcid/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "detcid/error.hpp"

namespace detcid::nn {

Param::Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t total = 1;
  for (int d : shape) total *= static_cast<std::size_t>(d);
  value.assign(total, 0.0);
  grad.assign(total, 0.0);
}

void zero_grads(const ParamList& params) {
  for (Param* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

void fill_params(const ParamList& params, double v) {
  for (Param* p : params) std::fill(p->value.begin(), p->value.end(), v);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride,
               int pad_begin, int pad_end)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), pad_begin_(pad_begin),
      pad_end_(pad_end < 0 ? pad_begin : pad_end),
      weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}),
      bias_(name + ".bias", {out_ch}) {}

void Conv2d::init(Rng& rng) {
  const double std = std::sqrt(2.0 / (in_ch_ * kernel_ * kernel_));
  for (double& v : weight_.value) v = std * rng.normal();
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x, Cache* cache) const {
  if (x.c != in_ch_) throw Error(ErrorCode::kShape, weight_.name + ": channel mismatch");
  const int ho = out_size(x.h);
  const int wo = out_size(x.w);
  if (ho < 1 || wo < 1) throw Error(ErrorCode::kShape, weight_.name + ": input too small");
  const int k = kernel_;
  Eigen::MatrixXd cols(in_ch_ * k * k, ho * wo);
  for (int ci = 0; ci < in_ch_; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - pad_begin_ + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ - pad_begin_ + kx;
            cols(row, oy * wo + ox) =
                (iy >= 0 && iy < x.h && ix >= 0 && ix < x.w) ? x.at(ci, iy, ix) : 0.0;
          }
        }
      }
    }
  }
  Tensor out(out_ch_, ho, wo);
  Eigen::Map<const RowMatrix> wmat(weight_.value.data(), out_ch_, in_ch_ * k * k);
  Eigen::Map<const Eigen::VectorXd> b(bias_.value.data(), out_ch_);
  auto omat = out.matrix();
  omat.noalias() = wmat * cols;
  omat.colwise() += b;
  if (cache) {
    cache->cols = std::move(cols);
    cache->in_h = x.h;
    cache->in_w = x.w;
  }
  return out;
}

Tensor Conv2d::backward(const Cache& cache, const Tensor& grad_out) {
  const int k = kernel_;
  const int ho = grad_out.h;
  const int wo = grad_out.w;
  auto g = grad_out.matrix();
  Eigen::Map<RowMatrix> dw(weight_.grad.data(), out_ch_, in_ch_ * k * k);
  Eigen::Map<Eigen::VectorXd> db(bias_.grad.data(), out_ch_);
  dw.noalias() += g * cache.cols.transpose();
  db += g.rowwise().sum();
  Eigen::Map<const RowMatrix> wmat(weight_.value.data(), out_ch_, in_ch_ * k * k);
  const Eigen::MatrixXd dcols = wmat.transpose() * g;

  Tensor grad_in(in_ch_, cache.in_h, cache.in_w);
  for (int ci = 0; ci < in_ch_; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - pad_begin_ + ky;
          if (iy < 0 || iy >= cache.in_h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ - pad_begin_ + kx;
            if (ix < 0 || ix >= cache.in_w) continue;
            grad_in.at(ci, iy, ix) += dcols(row, oy * wo + ox);
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, int in, int out)
    : in_(in), out_(out), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {}

void Linear::init(Rng& rng) {
  const double std = std::sqrt(2.0 / in_);
  for (double& v : weight_.value) v = std * rng.normal();
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

std::vector<double> Linear::forward(const std::vector<double>& x) const {
  if (static_cast<int>(x.size()) != in_) throw Error(ErrorCode::kShape, weight_.name + ": size");
  std::vector<double> y(static_cast<std::size_t>(out_));
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_);
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), in_);
  Eigen::Map<const Eigen::VectorXd> b(bias_.value.data(), out_);
  Eigen::Map<Eigen::VectorXd>(y.data(), out_).noalias() = w * xv + b;
  return y;
}

std::vector<double> Linear::backward(const std::vector<double>& x,
                                     const std::vector<double>& grad_out) {
  Eigen::Map<const Eigen::VectorXd> g(grad_out.data(), out_);
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), in_);
  Eigen::Map<RowMatrix>(weight_.grad.data(), out_, in_).noalias() += g * xv.transpose();
  Eigen::Map<Eigen::VectorXd>(bias_.grad.data(), out_) += g;
  std::vector<double> gx(static_cast<std::size_t>(in_));
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_);
  Eigen::Map<Eigen::VectorXd>(gx.data(), in_).noalias() = w.transpose() * g;
  return gx;
}

// ---------------------------------------------------------------- elementwise

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& out, const Tensor& grad) {
  Tensor g = grad;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (out.data[i] <= 0.0) g.data[i] = 0.0;
  }
  return g;
}

std::vector<double> relu(const std::vector<double>& x) {
  std::vector<double> y = x;
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return y;
}

std::vector<double> relu_backward(const std::vector<double>& out, const std::vector<double>& grad) {
  std::vector<double> g = grad;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (out[i] <= 0.0) g[i] = 0.0;
  }
  return g;
}

Tensor max_pool2(const Tensor& x, PoolCache* cache) {
  const int ho = x.h / 2;
  const int wo = x.w / 2;
  Tensor y(x.c, ho, wo);
  std::vector<int> arg(y.size());
  for (int c = 0; c < x.c; ++c) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        int best = -1;
        double bv = -std::numeric_limits<double>::infinity();
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * oy + dy;
            const int ix = 2 * ox + dx;
            const double v = x.at(c, iy, ix);
            if (v > bv) {
              bv = v;
              best = (c * x.h + iy) * x.w + ix;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(c) * ho + oy) * wo + ox;
        y.data[o] = bv;
        arg[o] = best;
      }
    }
  }
  if (cache) {
    cache->argmax = std::move(arg);
    cache->in_h = x.h;
    cache->in_w = x.w;
  }
  return y;
}

Tensor max_pool2_backward(const PoolCache& cache, const Tensor& grad) {
  Tensor g(grad.c, cache.in_h, cache.in_w);
  for (std::size_t i = 0; i < grad.size(); ++i) g.data[cache.argmax[i]] += grad.data[i];
  return g;
}

Tensor avg_pool2(const Tensor& x) {
  const int ho = x.h / 2;
  const int wo = x.w / 2;
  Tensor y(x.c, ho, wo);
  for (int c = 0; c < x.c; ++c) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        y.at(c, oy, ox) = 0.25 * (x.at(c, 2 * oy, 2 * ox) + x.at(c, 2 * oy, 2 * ox + 1) +
                                  x.at(c, 2 * oy + 1, 2 * ox) + x.at(c, 2 * oy + 1, 2 * ox + 1));
      }
    }
  }
  return y;
}

Tensor avg_pool2_backward(const Tensor& grad, int in_h, int in_w) {
  Tensor g(grad.c, in_h, in_w);
  for (int c = 0; c < grad.c; ++c) {
    for (int oy = 0; oy < grad.h; ++oy) {
      for (int ox = 0; ox < grad.w; ++ox) {
        const double v = 0.25 * grad.at(c, oy, ox);
        g.at(c, 2 * oy, 2 * ox) += v;
        g.at(c, 2 * oy, 2 * ox + 1) += v;
        g.at(c, 2 * oy + 1, 2 * ox) += v;
        g.at(c, 2 * oy + 1, 2 * ox + 1) += v;
      }
    }
  }
  return g;
}

namespace {
inline int nearest_src(int dst, int src_n, int dst_n) {
  return std::min(src_n - 1, static_cast<int>((static_cast<long long>(dst) * src_n) / dst_n));
}
}  // namespace

Tensor upsample_nearest(const Tensor& x, int h, int w) {
  Tensor y(x.c, h, w);
  for (int c = 0; c < x.c; ++c) {
    for (int oy = 0; oy < h; ++oy) {
      const int iy = nearest_src(oy, x.h, h);
      for (int ox = 0; ox < w; ++ox) y.at(c, oy, ox) = x.at(c, iy, nearest_src(ox, x.w, w));
    }
  }
  return y;
}

Tensor upsample_nearest_backward(const Tensor& grad, int in_h, int in_w) {
  Tensor g(grad.c, in_h, in_w);
  for (int c = 0; c < grad.c; ++c) {
    for (int oy = 0; oy < grad.h; ++oy) {
      const int iy = nearest_src(oy, in_h, grad.h);
      for (int ox = 0; ox < grad.w; ++ox) {
        g.at(c, iy, nearest_src(ox, in_w, grad.w)) += grad.at(c, oy, ox);
      }
    }
  }
  return g;
}

Tensor softmax_channels(const Tensor& logits) {
  Tensor p(logits.c, logits.h, logits.w);
  const int plane = logits.h * logits.w;
  for (int i = 0; i < plane; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < logits.c; ++c) mx = std::max(mx, logits.data[c * plane + i]);
    double s = 0.0;
    for (int c = 0; c < logits.c; ++c) {
      const double e = std::exp(logits.data[c * plane + i] - mx);
      p.data[c * plane + i] = e;
      s += e;
    }
    for (int c = 0; c < logits.c; ++c) p.data[c * plane + i] /= s;
  }
  return p;
}

Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs) {
  Tensor g(probs.c, probs.h, probs.w);
  const int plane = probs.h * probs.w;
  for (int i = 0; i < plane; ++i) {
    double dot = 0.0;
    for (int c = 0; c < probs.c; ++c) dot += probs.data[c * plane + i] * grad_probs.data[c * plane + i];
    for (int c = 0; c < probs.c; ++c) {
      const std::size_t k = static_cast<std::size_t>(c) * plane + i;
      g.data[k] = probs.data[k] * (grad_probs.data[k] - dot);
    }
  }
  return g;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::kShape, "add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  int c = 0;
  for (const Tensor* t : parts) {
    if (t->h != parts.front()->h || t->w != parts.front()->w) {
      throw Error(ErrorCode::kShape, "concat_channels: spatial mismatch");
    }
    c += t->c;
  }
  Tensor out(c, parts.front()->h, parts.front()->w);
  auto it = out.data.begin();
  for (const Tensor* t : parts) it = std::copy(t->data.begin(), t->data.end(), it);
  return out;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_with_logit(double z, double target) {
  return std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
}

// ---------------------------------------------------------------- Adam

void Adam::step(const ParamList& params) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      p.value[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
    }
  }
}

Json Adam::state_json() const {
  Json m = Json::array();
  Json v = Json::array();
  for (const auto& x : m_) m.push_back(base64_encode(x));
  for (const auto& x : v_) v.push_back(base64_encode(x));
  return {{"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_},
          {"t", t_},   {"m", m},          {"v", v}};
}

void Adam::load_state_json(const Json& j) {
  lr_ = j.value("lr", lr_);
  beta1_ = j.value("beta1", beta1_);
  beta2_ = j.value("beta2", beta2_);
  eps_ = j.value("eps", eps_);
  t_ = j.at("t").get<long>();
  m_.clear();
  v_.clear();
  for (const auto& x : j.at("m")) m_.push_back(base64_decode(x.get<std::string>()));
  for (const auto& x : j.at("v")) v_.push_back(base64_decode(x.get<std::string>()));
}

// ---------------------------------------------------------------- serialization

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes little-endian");
}  // namespace

std::string base64_encode(const std::vector<double>& values) {
  std::string bytes(values.size() * sizeof(double), '\0');
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned n = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    unsigned n = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) n |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += rest == 2 ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<double> base64_decode(const std::string& text) {
  auto value = [](char ch) -> int {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
    if (ch >= '0' && ch <= '9') return ch - '0' + 52;
    if (ch == '+') return 62;
    if (ch == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw Error(ErrorCode::kParse, "base64: length not a multiple of 4");
  std::string bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      if (text[i + k] == '=') {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(text[i + k]);
        if (v[k] < 0) throw Error(ErrorCode::kParse, "base64: invalid character");
      }
    }
    const unsigned n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    bytes += static_cast<char>((n >> 16) & 0xff);
    if (pad < 2) bytes += static_cast<char>((n >> 8) & 0xff);
    if (pad < 1) bytes += static_cast<char>(n & 0xff);
  }
  if (bytes.size() % sizeof(double) != 0) throw Error(ErrorCode::kParse, "base64: not float64 data");
  std::vector<double> out(bytes.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

Json params_to_json(const ParamList& params) {
  Json j = Json::object();
  for (const Param* p : params) {
    j[p->name] = {{"shape", p->shape}, {"data", base64_encode(p->value)}};
  }
  return j;
}

void params_from_json(const ParamList& params, const Json& j) {
  for (Param* p : params) {
    if (!j.contains(p->name)) throw Error(ErrorCode::kParse, "checkpoint lacks " + p->name);
    const auto& e = j.at(p->name);
    if (e.at("shape").get<std::vector<int>>() != p->shape) {
      throw Error(ErrorCode::kShape, "checkpoint shape mismatch for " + p->name);
    }
    auto values = base64_decode(e.at("data").get<std::string>());
    if (values.size() != p->size()) throw Error(ErrorCode::kShape, "checkpoint size mismatch for " + p->name);
    p->value = std::move(values);
  }
}

}  // namespace detcid::nn
