#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "detcid/json_util.hpp"
#include "detcid/rng.hpp"

// Minimal float64 layers with explicit caches and hand-written backward passes.
namespace detcid::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Channel-major (c, h, w) activation.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0)
      : c(channels), h(height), w(width),
        data(static_cast<std::size_t>(channels) * height * width, fill) {}

  std::size_t size() const { return data.size(); }
  double& at(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

  Eigen::Map<RowMatrix> matrix() { return {data.data(), c, h * w}; }
  Eigen::Map<const RowMatrix> matrix() const { return {data.data(), c, h * w}; }
};

struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s);
  std::size_t size() const { return value.size(); }
};

using ParamList = std::vector<Param*>;

void zero_grads(const ParamList& params);
void fill_params(const ParamList& params, double v);

class Conv2d {
 public:
  struct Cache {
    Eigen::MatrixXd cols;
    int in_h = 0;
    int in_w = 0;
  };

  Conv2d() = default;
  /// pad_end < 0 means symmetric padding.
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride = 1,
         int pad_begin = 0, int pad_end = -1);

  void init(Rng& rng);
  int out_size(int n) const { return (n + pad_begin_ + pad_end_ - kernel_) / stride_ + 1; }
  Tensor forward(const Tensor& x, Cache* cache) const;
  /// Accumulates parameter gradients and returns the input gradient.
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  ParamList params() { return {&weight_, &bias_}; }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1, pad_begin_ = 0, pad_end_ = 0;
  Param weight_;
  Param bias_;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out);
  void init(Rng& rng);
  std::vector<double> forward(const std::vector<double>& x) const;
  std::vector<double> backward(const std::vector<double>& x, const std::vector<double>& grad_out);
  ParamList params() { return {&weight_, &bias_}; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0, out_ = 0;
  Param weight_;
  Param bias_;
};

Tensor relu(const Tensor& x);
/// Gradient through ReLU given its output.
Tensor relu_backward(const Tensor& out, const Tensor& grad);
std::vector<double> relu(const std::vector<double>& x);
std::vector<double> relu_backward(const std::vector<double>& out, const std::vector<double>& grad);

struct PoolCache {
  std::vector<int> argmax;
  int in_h = 0;
  int in_w = 0;
};
/// 2x2 max pool, stride 2 (floor).
Tensor max_pool2(const Tensor& x, PoolCache* cache);
Tensor max_pool2_backward(const PoolCache& cache, const Tensor& grad);
/// 2x2 average pool, stride 2 (floor).
Tensor avg_pool2(const Tensor& x);
Tensor avg_pool2_backward(const Tensor& grad, int in_h, int in_w);
/// Nearest-neighbour resize to (h, w).
Tensor upsample_nearest(const Tensor& x, int h, int w);
Tensor upsample_nearest_backward(const Tensor& grad, int in_h, int in_w);

/// Per-pixel softmax over channels.
Tensor softmax_channels(const Tensor& logits);
Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs);

void add_inplace(Tensor& a, const Tensor& b);
Tensor concat_channels(const std::vector<const Tensor*>& parts);

double sigmoid(double z);
/// Binary cross-entropy of a logit against a target in [0, 1]; stable for large |z|.
double bce_with_logit(double z, double target);

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const ParamList& params);
  long steps() const { return t_; }
  double learning_rate() const { return lr_; }

  Json state_json() const;
  void load_state_json(const Json& j);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

std::string base64_encode(const std::vector<double>& values);
std::vector<double> base64_decode(const std::string& text);

/// {name: {"shape": [...], "data": base64 little-endian float64}}
Json params_to_json(const ParamList& params);
void params_from_json(const ParamList& params, const Json& j);

}  // namespace detcid::nn
