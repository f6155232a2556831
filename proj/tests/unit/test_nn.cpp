#include <doctest.h>

#include <cmath>

#include "detcid/nn.hpp"
#include "test_support.hpp"

using namespace detcid;
using namespace detcid::nn;
using detcid::testing::max_fd_error;

namespace {

Tensor random_tensor(int c, int h, int w, Rng& rng) {
  Tensor t(c, h, w);
  for (double& v : t.data) v = rng.normal();
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(1);
    struct Shape {
      int in, out, k, stride, pb, pe, h, w;
    };
    for (const Shape s : {Shape{2, 3, 3, 1, 1, -1, 6, 5}, Shape{3, 2, 3, 2, 1, -1, 7, 8},
                          Shape{2, 2, 2, 1, 0, 1, 5, 5}, Shape{1, 4, 1, 1, 0, -1, 3, 4}}) {
      Conv2d conv("c", s.in, s.out, s.k, s.stride, s.pb, s.pe);
      conv.init(rng);
      Tensor x = random_tensor(s.in, s.h, s.w, rng);
      Conv2d::Cache cache;
      const Tensor y = conv.forward(x, &cache);
      CHECK(y.h == conv.out_size(s.h));
      const Tensor g = random_tensor(y.c, y.h, y.w, rng);
      zero_grads(conv.params());
      const Tensor gx = conv.backward(cache, g);
      auto loss = [&] { return dot(conv.forward(x, nullptr), g); };
      CHECK(max_fd_error(x.data, gx.data, loss) < 1e-6);
      for (Param* p : conv.params()) CHECK(max_fd_error(p->value, p->grad, loss) < 1e-6);
    }
  }

  TEST_CASE("linear gradients match finite differences") {
    Rng rng(2);
    Linear fc("fc", 5, 3);
    fc.init(rng);
    std::vector<double> x(5), g(3);
    for (double& v : x) v = rng.normal();
    for (double& v : g) v = rng.normal();
    zero_grads(fc.params());
    const auto gx = fc.backward(x, g);
    auto loss = [&] {
      const auto y = fc.forward(x);
      double s = 0;
      for (int i = 0; i < 3; ++i) s += y[i] * g[i];
      return s;
    };
    CHECK(max_fd_error(x, gx, loss) < 1e-7);
    for (Param* p : fc.params()) CHECK(max_fd_error(p->value, p->grad, loss) < 1e-7);
  }

  TEST_CASE("pooling, upsampling and softmax gradients") {
    Rng rng(3);
    Tensor x = random_tensor(2, 7, 6, rng);

    PoolCache pc;
    const Tensor mp = max_pool2(x, &pc);
    CHECK(mp.h == 3);
    CHECK(mp.w == 3);
    const Tensor gm = random_tensor(mp.c, mp.h, mp.w, rng);
    CHECK(max_fd_error(x.data, max_pool2_backward(pc, gm).data, [&] { return dot(max_pool2(x, nullptr), gm); }) < 1e-6);

    const Tensor ap = avg_pool2(x);
    const Tensor ga = random_tensor(ap.c, ap.h, ap.w, rng);
    CHECK(max_fd_error(x.data, avg_pool2_backward(ga, 7, 6).data, [&] { return dot(avg_pool2(x), ga); }) < 1e-7);

    const Tensor up = upsample_nearest(x, 14, 11);
    const Tensor gu = random_tensor(up.c, up.h, up.w, rng);
    CHECK(max_fd_error(x.data, upsample_nearest_backward(gu, 7, 6).data, [&] { return dot(upsample_nearest(x, 14, 11), gu); }) < 1e-7);

    Tensor logits = random_tensor(3, 4, 4, rng);
    const Tensor probs = softmax_channels(logits);
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) CHECK(probs.at(0, y, xx) + probs.at(1, y, xx) + probs.at(2, y, xx) == doctest::Approx(1.0));
    const Tensor gp = random_tensor(3, 4, 4, rng);
    CHECK(max_fd_error(logits.data, softmax_channels_backward(probs, gp).data, [&] { return dot(softmax_channels(logits), gp); }) < 1e-6);
  }

  TEST_CASE("stable binary cross-entropy") {
    CHECK(bce_with_logit(0.0, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(std::isfinite(bce_with_logit(-800.0, 1.0)));
    CHECK(bce_with_logit(-800.0, 1.0) == doctest::Approx(800.0));
    CHECK(bce_with_logit(40.0, 1.0) < 1e-16);
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-1000.0) == 0.0);
  }

  TEST_CASE("adam first step moves each weight by lr against the gradient sign") {
    Param p("w", {3});
    p.value = {1.0, -2.0, 0.5};
    p.grad = {0.3, -4.0, 0.0};
    Adam adam(0.1);
    adam.step({&p});
    CHECK(p.value[0] == doctest::Approx(0.9));
    CHECK(p.value[1] == doctest::Approx(-1.9));
    CHECK(p.value[2] == 0.5);

    Adam still(0.0);
    p.grad = {1.0, 1.0, 1.0};
    const auto before = p.value;
    still.step({&p});
    CHECK(p.value == before);
  }

  TEST_CASE("adam state and parameters survive json") {
    Rng rng(4);
    Conv2d conv("c", 2, 2, 3, 1, 1);
    conv.init(rng);
    Adam a(0.01);
    for (int i = 0; i < 3; ++i) {
      for (Param* p : conv.params())
        for (double& g : p->grad) g = rng.normal();
      a.step(conv.params());
    }
    Conv2d copy("c", 2, 2, 3, 1, 1);
    params_from_json(copy.params(), params_to_json(conv.params()));
    for (std::size_t i = 0; i < conv.params().size(); ++i) CHECK(copy.params()[i]->value == conv.params()[i]->value);
    Adam b;
    b.load_state_json(a.state_json());
    CHECK(b.state_json() == a.state_json());

    Conv2d wrong("c", 2, 3, 3, 1, 1);
    CHECK_THROWS_AS(params_from_json(wrong.params(), params_to_json(conv.params())), Error);
  }

  TEST_CASE("base64 round trip is exact") {
    const std::vector<double> v{0.0, -0.0, 1e-300, -3.5, 1.0 / 3.0, 6.02e23};
    const auto back = base64_decode(base64_encode(v));
    REQUIRE(back.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::signbit(back[i]) == std::signbit(v[i]));
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(back[i] == v[i]);
  }
}
