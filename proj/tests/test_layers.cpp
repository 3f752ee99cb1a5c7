#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "vteam/error.hpp"
#include "vteam/layers.hpp"

using namespace vteam;
using testing::random_tensor;

namespace {

std::vector<double> bias_of(Conv2d& c) {
  if (!c.has_bias()) return {};
  return {c.bias().value.data(), c.bias().value.data() + c.bias().value.size()};
}

}  // namespace

TEST_CASE("conv2d matches the nested-loop oracle") {
  std::mt19937_64 rng(1);
  struct Geo {
    int in, out, k, stride, pad;
    bool bias;
  };
  for (Geo g : {Geo{3, 4, 3, 1, 1, true}, Geo{2, 5, 7, 2, 3, false}, Geo{4, 2, 1, 1, 0, true}, Geo{3, 3, 3, 2, 0, true}}) {
    Conv2d conv("c", g.in, g.out, g.k, g.stride, g.pad, g.bias);
    testing::randomize(conv.weight(), rng);
    if (g.bias) testing::randomize(conv.bias(), rng);
    const Tensor x = random_tensor(2, g.in, 9, 8, rng);
    const Tensor ref = oracle::conv(x, conv.weight().value, bias_of(conv), g.stride, g.pad);
    const Tensor y = conv.apply(x);
    REQUIRE(y.same_shape(ref));
    CHECK(testing::max_abs_diff(y, ref) < 1e-12);
    CHECK(testing::max_abs_diff(conv.forward(x), ref) < 1e-12);
  }
}

TEST_CASE("conv2d rejects a channel mismatch") {
  Conv2d conv("c", 3, 4, 3, 1, 1, false);
  CHECK_THROWS_AS(conv.apply(Tensor(1, 2, 5, 5)), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(2);
  Conv2d conv("c", 3, 4, 3, 2, 1, true);
  testing::randomize(conv.weight(), rng);
  testing::randomize(conv.bias(), rng);
  Tensor x = random_tensor(2, 3, 7, 6, rng);
  const Tensor y = conv.forward(x);
  const Tensor r = random_tensor(y.n(), y.c(), y.h(), y.w(), rng);
  conv.weight().zero_grad();
  conv.bias().zero_grad();
  const Tensor dx = conv.backward(r);
  auto loss = [&] { return testing::dot(conv.apply(x), r); };
  CHECK(testing::fd_relative_error(x, dx, loss) < 1e-6);
  CHECK(testing::fd_relative_error(conv.weight().value, conv.weight().grad, loss) < 1e-6);
  CHECK(testing::fd_relative_error(conv.bias().value, conv.bias().grad, loss) < 1e-6);
}

TEST_CASE("batchnorm normalises per channel in training mode") {
  std::mt19937_64 rng(3);
  BatchNorm2d bn("bn", 3);
  Tensor x = random_tensor(4, 3, 5, 5, rng, 3.0);
  for (double& v : x.values()) v += 2.0;
  const Tensor y = bn.forward(x);
  for (int c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    int n = 0;
    for (int s = 0; s < 4; ++s)
      for (int i = 0; i < 25; ++i) {
        const double v = y.plane(s, c)[i];
        mean += v;
        sq += v * v;
        ++n;
      }
    mean /= n;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 1e-3);
  }
}

TEST_CASE("batchnorm input gradient matches finite differences") {
  std::mt19937_64 rng(4);
  BatchNorm2d bn("bn", 2);
  ParameterList ps;
  bn.collect(ps);
  for (Parameter* p : ps)
    if (p->trainable) testing::randomize(*p, rng);
  Tensor x = random_tensor(3, 2, 3, 3, rng);
  const Tensor y = bn.forward(x);
  const Tensor r = random_tensor(3, 2, 3, 3, rng);
  for (Parameter* p : ps) p->zero_grad();
  const Tensor dx = bn.backward(r);
  BatchNorm2d probe = bn;
  auto loss = [&] { return testing::dot(probe.forward(x), r); };
  CHECK(testing::fd_relative_error(x, dx, loss) < 1e-5);
  for (Parameter* p : ps) {
    if (!p->trainable) continue;
    ParameterList qs;
    probe.collect(qs);
    for (Parameter* q : qs)
      if (q->name == p->name) CHECK(testing::fd_relative_error(q->value, p->grad, loss) < 1e-6);
  }
}

TEST_CASE("max pool forward and backward") {
  std::mt19937_64 rng(5);
  MaxPool2d pool(3, 2, 1);
  Tensor x = random_tensor(2, 2, 7, 6, rng);
  const Tensor y = pool.forward(x);
  REQUIRE(y.h() == 4);
  REQUIRE(y.w() == 3);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          double best = -1e300;
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              const int yy = 2 * i + u - 1, xx = 2 * j + v - 1;
              if (yy >= 0 && xx >= 0 && yy < 7 && xx < 6) best = std::max(best, x.at(n, c, yy, xx));
            }
          CHECK(y.at(n, c, i, j) == best);
        }
  const Tensor r = random_tensor(2, 2, 4, 3, rng);
  const Tensor dx = pool.backward(r);
  CHECK(testing::fd_relative_error(x, dx, [&] { return testing::dot(pool.apply(x), r); }) < 1e-6);
}

TEST_CASE("global average pool and leaky relu") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor(2, 3, 4, 5, rng);
  const Tensor y = GlobalAvgPool::apply(x);
  double s = 0;
  for (int i = 0; i < 20; ++i) s += x.plane(1, 2)[i];
  CHECK(y.at(1, 2, 0, 0) == doctest::Approx(s / 20).epsilon(1e-14));

  LeakyRelu act(0.01);
  const Tensor a = act.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    CHECK(a.data()[i] == (v > 0 ? v : 0.01 * v));
  }
  const Tensor r = random_tensor(2, 3, 4, 5, rng);
  CHECK(testing::fd_relative_error(x, act.backward(r), [&] { return testing::dot(act.apply(x), r); }) < 1e-6);
}

TEST_CASE("he_normal uses fan-out variance") {
  std::mt19937_64 rng(7);
  Parameter p("w", 64, 16, 3, 3);
  he_normal(p, rng);
  double sq = 0;
  for (double v : p.value.values()) sq += v * v;
  const double var = sq / static_cast<double>(p.value.size());
  CHECK(var == doctest::Approx(2.0 / (64 * 9)).epsilon(0.05));
}
