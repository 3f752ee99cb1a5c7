#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "helpers.hpp"
#include "vteam/teaming.hpp"

using namespace vteam;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const fs::path& cwd, const std::string& args) {
  const fs::path log = cwd / "cli.log";
  const std::string cmd = "cd '" + cwd.string() + "' && '" VTEAM_CLI "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyBrand =
    "model.base_width = 4\nmodel.embedding_dim = 8\nmodel.attention.cbam_reduction = 2\n"
    "total_epochs = 3\nwarmup_epochs = 1\ndecay_milestones = 2\n";
const char* kTinyReid =
    "model.base_width = 4\nmodel.embedding_dim = 8\ntotal_epochs = 3\nwarmup_epochs = 1\n"
    "decay_milestones = 2\nbatch_pk = 2x2\n";

// Prepared data plus one gate and one re-id checkpoint, built once.
const fs::path& workspace() {
  static const fs::path dir = [] {
    const fs::path d = testing::scratch_dir("cli");
    write(d / "brand.cfg", kTinyBrand);
    write(d / "reid.cfg", kTinyReid);
    REQUIRE(cli(d, "prepare --synthetic brands=4 ids=4 views=3 seed=7 --size 32 --out data").code == 0);
    REQUIRE(cli(d, "train --data data --config brand.cfg --recipe brand_proxynca --seed 1 --out gate").code == 0);
    REQUIRE(cli(d, "train --data data --config reid.cfg --seed 2 --out reid").code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("prepare writes the synthetic dataset and its stats") {
  const fs::path d = testing::scratch_dir("cli_prepare");
  const Run r = cli(d, "prepare --synthetic brands=4 ids=5 views=8 seed=7 --size 32 --out data");
  REQUIRE(r.code == 0);
  CHECK(r.output.find("prepared 160 samples") != std::string::npos);
  const json stats = json::parse(slurp(d / "data" / "stats.json"));
  CHECK(stats["num_samples"] == 160);
  CHECK(stats["attribute_classes"]["brand"] == 4);
  const json m = json::parse(slurp(d / "data" / "manifest.json"));
  for (const char* key : {"command", "config_hash", "dataset_fingerprint", "artifact_paths", "metrics"})
    CHECK(m.contains(key));
  CHECK(m["dataset_fingerprint"] == stats["fingerprint"]);

  // Same seed, same fingerprint.
  REQUIRE(cli(d, "prepare --synthetic brands=4 ids=5 views=8 --seed 7 --size 32 --out again").code == 0);
  CHECK(json::parse(slurp(d / "again" / "stats.json"))["fingerprint"] == stats["fingerprint"]);
}

TEST_CASE("prepare rejects bad input") {
  const fs::path d = testing::scratch_dir("cli_prepare_bad");
  CHECK(cli(d, "prepare --layout cars196 --root nowhere --out x").code != 0);
  CHECK(cli(d, "prepare --synthetic wheels=3 --out x").code != 0);
  CHECK(cli(d, "prepare --out x").code != 0);
  CHECK(cli(d, "frobnicate").code != 0);
  const Run ci = cli(d, "--ci prepare --synthetic brands=2 --out x");
  CHECK(ci.code != 0);
  CHECK(ci.output.find("--seed") != std::string::npos);
  CHECK(cli(d, "--ci prepare --synthetic brands=2 ids=2 views=2 --size 32 --seed 1 --out y").code == 0);
}

TEST_CASE("train writes checkpoints, state and a resolved config") {
  const fs::path& d = workspace();
  for (const char* f : {"config.txt", "loss.csv", "train_state.json", "manifest.json"})
    CHECK(fs::exists(d / "gate" / f));
  CHECK(fs::exists(d / "gate" / "checkpoints" / "final.vtc"));
  const json state = json::parse(slurp(d / "gate" / "train_state.json"));
  CHECK(state["checkpoint_refs"].size() >= 1);
  CHECK(!state["loss_history"].empty());
  const std::string cfg = slurp(d / "gate" / "config.txt");
  CHECK(cfg.find("recipe = brand_proxynca") != std::string::npos);
  CHECK(cfg.find("model.base_width = 4") != std::string::npos);
}

TEST_CASE("same seed gives the same loss curve") {
  const fs::path& d = workspace();
  REQUIRE(cli(d, "train --data data --config reid.cfg --seed 2 --out reid_again").code == 0);
  CHECK(slurp(d / "reid" / "loss.csv") == slurp(d / "reid_again" / "loss.csv"));
  CHECK(json::parse(slurp(d / "reid" / "manifest.json"))["final_checkpoint"] ==
        json::parse(slurp(d / "reid_again" / "manifest.json"))["final_checkpoint"]);
}

TEST_CASE("train fails fast on unusable data or config") {
  const fs::path& d = workspace();
  REQUIRE(cli(d, "prepare --synthetic brands=2 ids=4 views=1 seed=1 --size 32 --out singles").code == 0);
  const Run r = cli(d, "train --data singles --config reid.cfg --seed 1 --out nope");
  CHECK(r.code != 0);
  CHECK(r.output.find("identity") != std::string::npos);
  CHECK(!fs::exists(d / "nope" / "checkpoints" / "final.vtc"));

  write(d / "bad.cfg", "base_lr = -1\nmodel.base_width = 0\nloss.margin = fast\n");
  const Run bad = cli(d, "train --data data --config bad.cfg --seed 1 --out nope2");
  CHECK(bad.code != 0);
  for (const char* field : {"base_lr", "base_width", "loss.margin"}) CHECK(bad.output.find(field) != std::string::npos);
  CHECK(cli(d, "--ci train --data data --config reid.cfg --out nope3").code != 0);
}

TEST_CASE("eval reports the expected keys") {
  const fs::path& d = workspace();
  REQUIRE(cli(d, "eval --data data --checkpoint reid/checkpoints/final.vtc --protocol cars196_zsl --out ev "
                 "--rankings --seed 1").code == 0);
  const json rep = json::parse(slurp(d / "ev" / "report.json"));
  for (const char* key : {"protocol", "nmi", "recall_at.1", "recall_at.2", "recall_at.4", "recall_at.8", "num_queries"})
    CHECK(rep.contains(key));
  CHECK(rep["num_queries"] == 24);
  const std::string csv = slurp(d / "ev" / "rankings.csv");
  CHECK(csv.rfind("query_id,rank,gallery_id,distance,relevant\n", 0) == 0);
  CHECK(json::parse(slurp(d / "ev" / "manifest.json"))["metrics"]["nmi"] == rep["nmi"]);

  CHECK(cli(d, "eval --data data --checkpoint reid/checkpoints/final.vtc --protocol market --out ev2").code != 0);
  write(d / "broken.vtc", "VTEAM-CHECKPOINT 1\n");
  CHECK(cli(d, "eval --data data --checkpoint broken.vtc --protocol cars196_zsl --out ev3").code != 0);
}

TEST_CASE("team assemble, route, add-expert and identify") {
  const fs::path& d = workspace();
  REQUIRE(cli(d, "team assemble --registry solo --expert generic,*,reid/checkpoints/final.vtc").code == 0);
  REQUIRE(cli(d, "team route --registry solo --data data --out solo_routes").code == 0);
  {
    std::istringstream in(slurp(d / "solo_routes" / "routes.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample,selected,fell_back,w:generic,evidence");
    int rows = 0;
    while (std::getline(in, line)) {
      CHECK(line.find(",generic,1,1,") != std::string::npos);
      ++rows;
    }
    CHECK(rows == 24);
  }

  REQUIRE(cli(d, "team assemble --registry reg --gate brand,gate/checkpoints/final.vtc "
                 "--expert generic,*,reid/checkpoints/final.vtc --expert b0,brand=0,reid/checkpoints/best.vtc").code == 0);
  const std::string manifest = slurp(d / "reg" / "manifest.txt");
  CHECK(manifest.find("@gate = brand | prototype |") != std::string::npos);

  const Run overlap = cli(d, "team add-expert --registry reg --expert dup,brand=0,reid/checkpoints/final.vtc");
  CHECK(overlap.code != 0);
  CHECK(overlap.output.find("'b0'") != std::string::npos);
  CHECK(slurp(d / "reg" / "manifest.txt") == manifest);
  REQUIRE(cli(d, "team add-expert --registry reg --expert b1,brand=1,reid/checkpoints/final.vtc").code == 0);
  CHECK(load_registry(d / "reg").experts().size() == 3);

  REQUIRE(cli(d, "team identify --registry reg --data data --protocol cars196_zsl --out id").code == 0);
  const json rep = json::parse(slurp(d / "id" / "report.json"));
  const TeamRegistry team = load_registry(d / "reg");
  const DatasetView view = load_index(d / "data", 32);
  const IdentifyResult manual = team_identify(team, view.split(Split::query), view.split(Split::gallery),
                                              Protocol::cars196_zsl);
  CHECK(rep["map"].get<double>() == manual.retrieval.map_score);
  CHECK(rep["cmc.1"].get<double>() == manual.retrieval.cmc[0]);
  CHECK(slurp(d / "id" / "identify.csv").rfind("query,expert,top1,top1_distance,top1_relevant\n", 0) == 0);

  CHECK(cli(d, "team assemble --registry reg2 --expert a,brand=0,reid/checkpoints/final.vtc").code != 0);
  CHECK(cli(d, "team assemble --registry reg3 --gate brand,reid/checkpoints/final.vtc "
               "--expert a,*,reid/checkpoints/final.vtc").code != 0);
}

TEST_CASE("report collects runs") {
  const fs::path& d = workspace();
  REQUIRE(cli(d, "eval --data data --checkpoint reid/checkpoints/final.vtc --protocol cars196_zsl --out ev_r --seed 1")
              .code == 0);
  REQUIRE(cli(d, "report --eval reid=ev_r --train reid=reid --out rep").code == 0);
  const json s = json::parse(slurp(d / "rep" / "summary.json"));
  CHECK(!s.empty());
}
