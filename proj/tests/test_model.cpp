#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "helpers.hpp"
#include "vteam/dataset.hpp"
#include "vteam/error.hpp"
#include "vteam/model.hpp"

using namespace vteam;

namespace {

ModelDescriptor tiny(std::uint64_t seed = 1) {
  ModelDescriptor d;
  d.base_width = 4;
  d.input_size = 32;
  d.embedding_dim = 8;
  d.init_seed = seed;
  d.attention.ga_enabled = true;
  d.attention.cbam_placement = CbamPlacement::first_block;
  d.attention.cbam_reduction = 2;
  return d;
}

std::vector<const Sample*> ptrs(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  for (const Sample& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("full-size backbone has about 11M parameters") {
  ModelDescriptor d;
  EmbeddingModel plain(d);
  CHECK(plain.parameter_count() == 11176512);
  CHECK(std::abs(static_cast<double>(plain.parameter_count()) - 11e6) / 11e6 < 0.05);

  d.attention.ga_enabled = true;
  EmbeddingModel with_ga(d);
  const std::size_t C = 64;
  CHECK(with_ga.parameter_count() - plain.parameter_count() == 2 * (3 * 3 * C * C) + 2 * C);
  CHECK(with_ga.parameter_count() < 12000000);
}

TEST_CASE("parameter count equals the sum over trainable tensors") {
  EmbeddingModel m(tiny());
  std::size_t total = 0;
  for (const Parameter* p : std::as_const(m).parameters())
    if (p->trainable) total += p->value.size();
  CHECK(m.parameter_count() == total);
}

TEST_CASE("cbam placement is structural") {
  ModelDescriptor d;
  d.attention.cbam_placement = CbamPlacement::first_block;
  EmbeddingModel m(d);
  int stage1 = 0;
  for (const Parameter* p : std::as_const(m).parameters()) {
    if (p->name.find("cbam") == std::string::npos) continue;
    CHECK(p->name.rfind("layer1.", 0) == 0);
    ++stage1;
  }
  CHECK(stage1 > 0);

  d.attention.cbam_placement = CbamPlacement::last_block;
  const EmbeddingModel last(d);
  for (const Parameter* p : last.parameters())
    if (p->name.find("cbam") != std::string::npos) CHECK(p->name.rfind("layer4.", 0) == 0);
}

TEST_CASE("head has no trainable layer after the last convolution") {
  for (int dim : {512, 128}) {
    ModelDescriptor d;
    d.base_width = 16;
    d.embedding_dim = dim;
    const auto audit = EmbeddingModel(d).audit();
    REQUIRE(!audit.empty());
    CHECK(audit.back().kind == "global_avg_pool");
    auto last_trainable = std::find_if(audit.rbegin(), audit.rend(), [](const LayerRecord& r) {
      return r.trainable_scalars > 0;
    });
    REQUIRE(last_trainable != audit.rend());
    CHECK((last_trainable->kind == "conv" || last_trainable->kind == "batchnorm"));
    for (const LayerRecord& r : audit) CHECK(r.kind != "linear");
  }
}

TEST_CASE("invalid descriptors are rejected at construction") {
  ModelDescriptor d;
  d.base_width = 24;
  d.attention.cbam_placement = CbamPlacement::all;
  d.attention.cbam_reduction = 16;
  CHECK_THROWS_AS(EmbeddingModel{d}, ConfigError);
  d.attention.cbam_reduction = 8;
  CHECK_NOTHROW(EmbeddingModel{d});
  d.input_size = 8;
  CHECK_THROWS_AS(EmbeddingModel{d}, ConfigError);
}

TEST_CASE("descriptor key-value round trip") {
  ModelDescriptor d = tiny(99);
  d.attention.leaky_slope = 0.123456789;
  d.attention.ga_width = 7;
  CHECK(ModelDescriptor::from_key_values(d.to_key_values()) == d);
  CHECK(parse_cbam_placement("cbam-4") == CbamPlacement::last_block);
  CHECK_THROWS_AS(parse_cbam_placement("middle"), ConfigError);
}

TEST_CASE("same seed builds identical weights, different seeds differ") {
  EmbeddingModel a(tiny(5)), b(tiny(5)), c(tiny(6));
  auto pa = std::as_const(a).parameters(), pb = std::as_const(b).parameters(), pc = std::as_const(c).parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value.values().size() == pb[i]->value.values().size());
    CHECK(std::equal(pa[i]->value.values().begin(), pa[i]->value.values().end(), pb[i]->value.values().begin()));
    any_diff |= !std::equal(pa[i]->value.values().begin(), pa[i]->value.values().end(), pc[i]->value.values().begin());
  }
  CHECK(any_diff);
}

TEST_CASE("embedding edge cases") {
  const DatasetView ds = generate_synthetic(2, 1, 2, 3, 32);
  EmbeddingModel m(tiny());
  CHECK(embed(m, std::vector<const Sample*>{}, true).empty());

  const Sample* s0 = &ds.samples()[0];
  const Sample* s1 = &ds.samples()[1];
  std::vector<const Sample*> batch{s0, s1, s0};
  const auto e = embed(m, batch, true);
  REQUIRE(e.size() == 3);
  CHECK(e[0].values == e[2].values);
  CHECK(e[0].normalized);
  for (const auto& v : e) CHECK(std::abs(v.values.norm() - 1.0) < 1e-6);

  const auto single = embed(m, std::vector<const Sample*>{s1}, true);
  CHECK(single[0].values == e[1].values);

  const DatasetView big = generate_synthetic(1, 1, 1, 3, 48);
  CHECK_THROWS_AS(embed(m, std::vector<const Sample*>{&big.samples()[0]}, true), ShapeError);
}

TEST_CASE("embedding survives the export round trip") {
  const DatasetView ds = generate_synthetic(2, 2, 2, 4, 32);
  const auto dir = testing::scratch_dir("model_roundtrip");
  export_cars196(ds, dir);
  const DatasetView back = ingest_directory(dir, Layout::cars196, 32);
  EmbeddingModel m(tiny());
  std::vector<Sample> quantized;
  for (const Sample& s : ds.samples()) {
    Sample q = s;
    q.image = quantize_8bit(s.image);
    quantized.push_back(q);
  }
  const Eigen::MatrixXd a = embed_matrix(m, ptrs(quantized), true);
  // Match by pixels: ingestion order need not equal generation order.
  int matched = 0;
  for (std::size_t i = 0; i < back.size(); ++i)
    for (std::size_t j = 0; j < quantized.size(); ++j)
      if (back.samples()[i].image == quantized[j].image) {
        const Eigen::MatrixXd b = embed_matrix(m, std::vector<const Sample*>{&back.samples()[i]}, true);
        CHECK((b.row(0) - a.row(static_cast<Eigen::Index>(j))).cwiseAbs().maxCoeff() < 1e-6);
        ++matched;
        break;
      }
  CHECK(matched == static_cast<int>(ds.size()));
}

TEST_CASE("forward pass is finite for random inputs across 1000 seeds") {
  EmbeddingModel m(tiny());
  int finite = 0;
  for (int seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x = testing::random_tensor(1, 3, 32, 32, rng, 1.0 + seed % 5);
    finite += m.infer(x).allFinite();
  }
  CHECK(finite == 1000);
}

TEST_CASE("model gradients match finite differences") {
  EmbeddingModel m(tiny(3));
  std::mt19937_64 rng(8);
  const Tensor x = testing::random_tensor(3, 3, 32, 32, rng);
  const Eigen::MatrixXd r = Eigen::MatrixXd::Random(3, 8);
  m.zero_grad();
  m.forward(x);
  m.backward(r);
  auto loss = [&] { return (m.forward(x).array() * r.array()).sum(); };
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  int checked = 0;
  for (Parameter* p : m.parameters()) {
    if (!p->trainable) continue;
    for (int t = 0; t < 3; ++t) {
      const std::size_t i = static_cast<std::size_t>(unit(rng) * p->value.size()) % p->value.size();
      const double orig = p->value.data()[i], h = 1e-5;
      p->value.data()[i] = orig + h;
      const double up = loss();
      p->value.data()[i] = orig - h;
      const double down = loss();
      p->value.data()[i] = orig;
      const double num = (up - down) / (2 * h), a = p->grad.data()[i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
      ++checked;
    }
  }
  CHECK(checked > 50);
  CHECK(worst < 1e-4);
}
