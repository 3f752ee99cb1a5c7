#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <json.hpp>

#include "helpers.hpp"
#include "vteam/checkpoint.hpp"
#include "vteam/error.hpp"
#include "vteam/training.hpp"

using namespace vteam;

namespace {

ModelDescriptor tiny(std::uint64_t seed = 1) {
  ModelDescriptor d;
  d.base_width = 4;
  d.input_size = 32;
  d.embedding_dim = 8;
  d.init_seed = seed;
  return d;
}

TrainConfig short_run(Recipe recipe) {
  TrainConfig c = TrainConfig::desk(recipe, 3);
  c.warmup_epochs = 1;
  c.total_epochs = 3;
  c.decay_milestones = {2};
  c.P = 2;
  c.K = 2;
  return c;
}

Eigen::MatrixXd embed_all(const EmbeddingModel& m, const DatasetView& ds) {
  std::vector<const Sample*> ptrs;
  for (const Sample& s : ds.samples()) ptrs.push_back(&s);
  return embed_matrix(m, ptrs, true);
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.base_lr = 3.5e-4;
  c.warmup_epochs = 10;
  c.total_epochs = 120;
  c.decay_milestones = {40, 70};
  CHECK(lr_at(c, 0) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(lr_at(c, 10) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(lr_at(c, 39) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(lr_at(c, 40) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(lr_at(c, 75) == doctest::Approx(3.5e-6).epsilon(1e-12));
  for (int e = 1; e <= 10; ++e) {
    CHECK(lr_at(c, e) > lr_at(c, e - 1));
    CHECK(lr_at(c, e) - lr_at(c, e - 1) <= 3.5e-4 * 0.9 / 10 + 1e-15);
  }
  for (int e = 11; e < 120; ++e) CHECK(lr_at(c, e) <= lr_at(c, e - 1));
}

TEST_CASE("config validation lists every violated field") {
  TrainConfig c;
  c.warmup_epochs = 50;
  c.total_epochs = 40;
  c.decay_milestones = {30, 20};
  c.decay_factor = 1.5;
  c.K = 1;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("warmup_epochs") != std::string::npos);
    CHECK(msg.find("decay_milestones") != std::string::npos);
    CHECK(msg.find("decay_factor") != std::string::npos);
    CHECK(msg.find("K >= 2") != std::string::npos);
  }
  CHECK_NOTHROW(TrainConfig{}.validate());
  CHECK_NOTHROW(TrainConfig::desk(Recipe::brand_proxynca, 1).validate());
  CHECK_THROWS_AS(parse_recipe("arcface"), ConfigError);
}

TEST_CASE("config key-value round trip and unknown keys") {
  TrainConfig c = TrainConfig::desk(Recipe::brand_proxynca, 42);
  c.weight_decay = 5e-4;
  c.steps_per_epoch = 6;
  c.random_erasing = true;
  c.label = Attribute::type;
  const TrainConfig back = TrainConfig::from_key_values(c.to_key_values());
  CHECK(back.to_key_values() == c.to_key_values());
  CHECK(back.seed == 42);
  CHECK(back.label == std::optional<Attribute>(Attribute::type));
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"learning_rate", "0.1"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"base_lr", "fast"}}), ConfigError);

  const auto path = testing::scratch_dir("train_kv") / "train.cfg";
  std::ofstream(path) << "# desk run\nrecipe = reid_triplet\nbase_lr = 0.002  \n\ntotal_epochs=7\nwarmup_epochs = 1\n";
  const auto kv = read_key_value_file(path);
  CHECK(kv.size() == 4);
  CHECK(kv.at("base_lr") == "0.002");
  const TrainConfig parsed = TrainConfig::from_key_values(kv);
  CHECK(parsed.total_epochs == 7);
  CHECK(parsed.base_lr == 0.002);
}

TEST_CASE("adam step on a single scalar") {
  Parameter p("w", 1, 1, 1, 1);
  p.value.data()[0] = 1.0;
  p.grad.data()[0] = 0.5;
  Adam adam;
  adam.step({&p}, 0.1);
  // First bias-corrected step moves by lr * g/|g|.
  CHECK(p.value.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
  const double w1 = p.value.data()[0];
  p.grad.data()[0] = -2.0;
  adam.step({&p}, 0.1);
  const double m = 0.9 * 0.05 + 0.1 * -2.0, v = 0.999 * 0.00025 + 0.001 * 4.0;
  const double expect = w1 - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(p.value.data()[0] == doctest::Approx(expect).epsilon(1e-9));

  Parameter frozen("f", 1, 1, 1, 1);
  frozen.trainable = false;
  frozen.grad.data()[0] = 1.0;
  adam.step({&frozen}, 0.1);
  CHECK(frozen.value.data()[0] == 0.0);
}

TEST_CASE("zero epochs returns the initial model") {
  const DatasetView ds = generate_synthetic(2, 4, 2, 1, 32);
  TrainConfig c = short_run(Recipe::reid_triplet);
  c.total_epochs = 0;
  c.warmup_epochs = 0;
  c.decay_milestones.clear();
  const TrainResult r = train(ds, tiny(), LossConfig{}, c);
  CHECK(r.state.loss_history.empty());
  CHECK(model_hash(r.model) == model_hash(EmbeddingModel(tiny())));
}

TEST_CASE("preflight rejects unusable labels before any step") {
  const auto dir = testing::scratch_dir("train_preflight");
  SUBCASE("reid without repeated identities") {
    DatasetView ds = generate_synthetic(2, 4, 1, 1, 32);
    try {
      train(ds, tiny(), LossConfig{}, short_run(Recipe::reid_triplet), {dir, false});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("identity") != std::string::npos);
    }
    CHECK(std::filesystem::is_empty(dir));
  }
  SUBCASE("brand recipe without brand labels") {
    const DatasetView synth = generate_synthetic(2, 4, 2, 1, 32);
    std::vector<Sample> samples = synth.samples();
    for (Sample& s : samples) s.brand_id.reset();
    const DatasetView ds(std::move(samples), synth.identity_names(), {});
    CHECK_THROWS_AS(train(ds, tiny(), LossConfig{}, short_run(Recipe::brand_proxynca)), ConfigError);
  }
  SUBCASE("P larger than the class count") {
    const DatasetView ds = generate_synthetic(2, 4, 2, 1, 32);
    TrainConfig c = short_run(Recipe::brand_proxynca);
    c.P = 3;
    CHECK_THROWS_AS(train(ds, tiny(), LossConfig{}, c), ConfigError);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const DatasetView ds = generate_synthetic(2, 4, 3, 5, 32);
  const TrainConfig c = short_run(Recipe::reid_triplet);
  const TrainResult a = train(ds, tiny(), LossConfig{}, c);
  const TrainResult b = train(ds, tiny(), LossConfig{}, c);
  REQUIRE(a.state.loss_history.size() == b.state.loss_history.size());
  CHECK(!a.state.loss_history.empty());
  for (std::size_t i = 0; i < a.state.loss_history.size(); ++i) {
    CHECK(a.state.loss_history[i].loss == b.state.loss_history[i].loss);
    CHECK(a.state.loss_history[i].lr == b.state.loss_history[i].lr);
  }
  CHECK(model_hash(a.model) == model_hash(b.model));

  TrainConfig other = c;
  other.seed = 4;
  const TrainResult d = train(ds, tiny(), LossConfig{}, other);
  CHECK(model_hash(d.model) != model_hash(a.model));
}

TEST_CASE("checkpoints restore bit-identical embeddings") {
  const DatasetView ds = generate_synthetic(2, 4, 3, 5, 32);
  const auto dir = testing::scratch_dir("train_ckpt");
  const TrainConfig c = short_run(Recipe::brand_proxynca);
  const TrainResult r = train(ds, tiny(), LossConfig{}, c, {dir, false});
  REQUIRE(!r.state.checkpoint_paths.empty());
  CHECK(r.state.checkpoint_paths.back().filename() == "final.vtc");
  bool milestone = false;
  for (const auto& p : r.state.checkpoint_paths) milestone |= p.filename() == "milestone_2.vtc";
  CHECK(milestone);
  CHECK(r.state.checkpoint_refs.size() == r.state.checkpoint_paths.size());

  const LoadedCheckpoint ck = load_checkpoint(dir / "final.vtc");
  CHECK(ck.hash == r.state.checkpoint_refs.back());
  CHECK(ck.metadata.at("recipe") == "brand_proxynca");
  CHECK(ck.metadata.at("gate.attribute") == "brand");
  const Tensor& protos = ck.extras.at("prototypes");
  REQUIRE(protos.n() == 2);
  for (int i = 0; i < 2; ++i)
    for (int d = 0; d < 8; ++d) CHECK(protos.at(i, d, 0, 0) == r.proxies.proxies(i, d));

  const Eigen::MatrixXd a = embed_all(r.model, ds), b = embed_all(ck.model, ds);
  CHECK(a == b);
}

TEST_CASE("train state serialisation") {
  TrainState s;
  s.epoch = 3;
  s.step = 12;
  s.current_lr = 1e-3;
  s.best_metric = 0.5;
  s.loss_history = {{0, 1.25, 1e-4}, {1, 0.75, 2e-4}};
  s.checkpoint_refs = {"abc"};
  s.checkpoint_paths = {"/tmp/x.vtc"};
  const auto j = nlohmann::json::parse(s.to_json());
  for (const char* key : {"epoch", "step", "current_lr", "loss_history", "best_metric", "checkpoint_refs"})
    CHECK(j.contains(key));
  CHECK(j["loss_history"][1]["loss"] == 0.75);

  const auto path = testing::scratch_dir("train_state") / "loss.csv";
  s.write_loss_csv(path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,loss,lr");
  CHECK(row == "0,1.25,0.0001");
}
