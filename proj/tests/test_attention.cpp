#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "vteam/attention.hpp"
#include "vteam/error.hpp"

using namespace vteam;
using testing::random_tensor;

namespace {

oracle::ConvWeights weights_of(Conv2d& c) {
  oracle::ConvWeights w{c.weight().value, {}};
  if (c.has_bias()) w.bias.assign(c.bias().value.data(), c.bias().value.data() + c.bias().value.size());
  return w;
}

void randomize_all(ParameterList ps, std::mt19937_64& rng) {
  for (Parameter* p : ps) testing::randomize(*p, rng);
}

}  // namespace

TEST_CASE("global attention matches the dense oracle") {
  std::mt19937_64 rng(11);
  GlobalAttention ga("ga", 8, 8);
  ParameterList ps;
  ga.collect(ps);
  randomize_all(ps, rng);
  const Tensor x = random_tensor(1, 8, 4, 4, rng);
  Tensor mask;
  const Tensor ref = oracle::global_attention(x, weights_of(ga.first()), weights_of(ga.second()), 0.01, &mask);
  CHECK(testing::max_abs_diff(ga.apply(x), ref) < 1e-12);
  CHECK(testing::max_abs_diff(ga.mask(x), mask) < 1e-12);
}

TEST_CASE("global attention with zero weights halves the input") {
  std::mt19937_64 rng(12);
  GlobalAttention ga("ga", 4, 4);
  const Tensor x = random_tensor(2, 4, 5, 5, rng);
  const Tensor y = ga.apply(x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i] / 2);
}

TEST_CASE("global attention mask lies strictly inside (0,1)") {
  std::mt19937_64 rng(13);
  GlobalAttention ga("ga", 4, 6);
  ParameterList ps;
  ga.collect(ps);
  for (Parameter* p : ps) testing::randomize(*p, rng, 0.3);
  const Tensor x = random_tensor(2, 4, 6, 6, rng);
  const Tensor m = ga.mask(x);
  const Tensor y = ga.apply(x);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(m.data()[i] > 0.0);
    CHECK(m.data()[i] < 1.0);
    CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));
  }
}

TEST_CASE("global attention rejects a channel mismatch") {
  GlobalAttention ga("ga", 4, 4);
  CHECK_THROWS_AS(ga.apply(Tensor(1, 3, 4, 4)), ShapeError);
}

TEST_CASE("global attention gradients match finite differences") {
  std::mt19937_64 rng(14);
  GlobalAttention ga("ga", 3, 5);
  ParameterList ps;
  ga.collect(ps);
  randomize_all(ps, rng);
  Tensor x = random_tensor(2, 3, 5, 4, rng);
  const Tensor y = ga.forward(x);
  const Tensor r = random_tensor(y.n(), y.c(), y.h(), y.w(), rng);
  for (Parameter* p : ps) p->zero_grad();
  const Tensor dx = ga.backward(r);
  auto loss = [&] { return testing::dot(ga.apply(x), r); };
  CHECK(testing::fd_relative_error(x, dx, loss) < 1e-5);
  for (Parameter* p : ps) CHECK(testing::fd_relative_error(p->value, p->grad, loss) < 1e-5);
}

TEST_CASE("cbam matches the dense oracle") {
  std::mt19937_64 rng(15);
  Cbam cbam("cbam", 8, 4, 3);
  ParameterList ps;
  cbam.collect(ps);
  randomize_all(ps, rng);
  const Tensor x = random_tensor(2, 8, 4, 4, rng);
  Tensor cm, sm;
  const Tensor ref = oracle::cbam(x, weights_of(cbam.mlp_in()), weights_of(cbam.mlp_out()),
                                  cbam.spatial_conv().weight().value, &cm, &sm);
  CHECK(testing::max_abs_diff(cbam.apply(x), ref) < 1e-12);
  const CbamMasks masks = cbam.masks(x);
  CHECK(testing::max_abs_diff(masks.channel, cm) < 1e-12);
  CHECK(testing::max_abs_diff(masks.spatial, sm) < 1e-12);
}

TEST_CASE("cbam masks are in (0,1) and constant input gives a constant spatial mask") {
  std::mt19937_64 rng(16);
  Cbam cbam("cbam", 8, 2, 7);
  ParameterList ps;
  cbam.collect(ps);
  randomize_all(ps, rng);
  Tensor x(1, 8, 6, 6);
  for (int c = 0; c < 8; ++c)
    for (int i = 0; i < 36; ++i) x.plane(0, c)[i] = 0.3 * c - 1.0;
  const CbamMasks m = cbam.masks(x);
  for (double v : m.channel.values()) CHECK((v > 0.0 && v < 1.0));
  for (double v : m.spatial.values()) {
    CHECK((v > 0.0 && v < 1.0));
    CHECK(v == m.spatial.data()[0]);
  }
}

TEST_CASE("cbam rejects a reduction that does not divide the width") {
  CHECK_THROWS_AS(Cbam("cbam", 12, 5, 7), ConfigError);
  CHECK_THROWS_AS(Cbam("cbam", 12, 4, 4), ConfigError);
  Cbam ok("cbam", 12, 4, 3);
  CHECK_THROWS_AS(ok.apply(Tensor(1, 8, 4, 4)), ShapeError);
}

TEST_CASE("cbam gradients match finite differences") {
  std::mt19937_64 rng(17);
  Cbam cbam("cbam", 4, 2, 3);
  ParameterList ps;
  cbam.collect(ps);
  randomize_all(ps, rng);
  Tensor x = random_tensor(2, 4, 5, 5, rng);
  const Tensor y = cbam.forward(x);
  const Tensor r = random_tensor(y.n(), y.c(), y.h(), y.w(), rng);
  for (Parameter* p : ps) p->zero_grad();
  const Tensor dx = cbam.backward(r);
  auto loss = [&] { return testing::dot(cbam.apply(x), r); };
  CHECK(testing::fd_relative_error(x, dx, loss) < 1e-5);
  for (Parameter* p : ps) CHECK(testing::fd_relative_error(p->value, p->grad, loss) < 1e-5);
}

TEST_CASE("replicate pad and its adjoint") {
  std::mt19937_64 rng(18);
  const Tensor x = random_tensor(1, 2, 3, 4, rng);
  const Tensor p = replicate_pad(x, 2);
  CHECK(p.h() == 7);
  CHECK(p.w() == 8);
  CHECK(p.at(0, 1, 0, 0) == x.at(0, 1, 0, 0));
  CHECK(p.at(0, 0, 6, 7) == x.at(0, 0, 2, 3));
  CHECK(p.at(0, 0, 3, 4) == x.at(0, 0, 1, 2));
  // <pad(x), r> == <x, pad^T(r)>
  const Tensor r = random_tensor(1, 2, 7, 8, rng);
  CHECK(testing::dot(p, r) == doctest::Approx(testing::dot(x, replicate_pad_backward(r, 2))).epsilon(1e-12));
}
