#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "vteam/checkpoint.hpp"
#include "vteam/error.hpp"
#include "vteam/hash.hpp"

using namespace vteam;
namespace fs = std::filesystem;

namespace {

ModelDescriptor tiny(std::uint64_t seed = 1) {
  ModelDescriptor d;
  d.base_width = 4;
  d.input_size = 32;
  d.embedding_dim = 8;
  d.init_seed = seed;
  d.attention.ga_enabled = true;
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const std::string& data) { std::ofstream(p, std::ios::binary) << data; }

// Re-signs an edited body so only the structural checks can reject it.
std::string resign(std::string data) {
  data.resize(data.size() - 72);
  return data + "sha256=" + sha256_hex(data) + "\n";
}

}  // namespace

TEST_CASE("save and load round trip") {
  const auto dir = testing::scratch_dir("ckpt_roundtrip");
  EmbeddingModel m(tiny(4));
  std::mt19937_64 rng(1);
  Tensor protos = testing::random_tensor(3, 8, 1, 1, rng);
  const std::string hash = save_checkpoint(m, dir / "a.vtc", {{"recipe", "brand_proxynca"}, {"note", "a b=c"}},
                                           {{"prototypes", protos}});
  CHECK(hash.size() == 64);
  CHECK(checkpoint_hash(dir / "a.vtc") == hash);
  CHECK(!fs::exists(dir / "a.vtc.tmp"));

  const LoadedCheckpoint ck = load_checkpoint(dir / "a.vtc");
  CHECK(ck.hash == hash);
  CHECK(ck.model.descriptor() == m.descriptor());
  CHECK(ck.metadata.at("note") == "a b=c");
  CHECK(testing::max_abs_diff(ck.extras.at("prototypes"), protos) == 0.0);
  CHECK(model_hash(ck.model) == model_hash(m));

  save_checkpoint(m, dir / "plain.vtc");
  CHECK(checkpoint_hash(dir / "plain.vtc") == model_hash(m));
  CHECK(model_hash(EmbeddingModel(tiny(5))) != model_hash(m));
}

TEST_CASE("tampering is detected") {
  const auto dir = testing::scratch_dir("ckpt_tamper");
  EmbeddingModel m(tiny());
  save_checkpoint(m, dir / "a.vtc");
  std::string data = slurp(dir / "a.vtc");
  for (std::size_t at : {std::size_t{3}, data.size() / 2, data.size() - 80}) {
    std::string bad = data;
    bad[at] = static_cast<char>(bad[at] ^ 0x01);
    dump(dir / "bad.vtc", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.vtc"), CheckpointError);
  }
  dump(dir / "short.vtc", data.substr(0, data.size() / 3));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.vtc"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.vtc"), CheckpointError);
}

TEST_CASE("descriptor and tensor table must agree") {
  const auto dir = testing::scratch_dir("ckpt_mismatch");
  EmbeddingModel m(tiny());
  save_checkpoint(m, dir / "a.vtc");
  const std::string data = slurp(dir / "a.vtc");

  SUBCASE("descriptor claims another width") {
    std::string bad = data;
    const auto pos = bad.find("descriptor.base_width=4\n");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, 24, "descriptor.base_width=8\n");
    dump(dir / "bad.vtc", resign(bad));
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.vtc"), CheckpointError);
  }
  SUBCASE("descriptor drops global attention") {
    std::string bad = data;
    const auto pos = bad.find("descriptor.attention.ga_enabled=true\n");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, std::string("descriptor.attention.ga_enabled=true\n").size(), "descriptor.attention.ga_enabled=false\n");
    dump(dir / "bad.vtc", resign(bad));
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.vtc"), CheckpointError);
  }
  SUBCASE("unknown tensor name") {
    std::string bad = data;
    const auto pos = bad.find("embed.weight ");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, 6, "embex.");
    dump(dir / "bad.vtc", resign(bad));
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.vtc"), CheckpointError);
  }
  SUBCASE("metadata cannot break the header") {
    CHECK_THROWS_AS(save_checkpoint(m, dir / "b.vtc", {{"k", "two\nlines"}}), CheckpointError);
  }
}
