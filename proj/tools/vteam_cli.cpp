#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vteam/checkpoint.hpp"
#include "vteam/dataset.hpp"
#include "vteam/error.hpp"
#include "vteam/hash.hpp"
#include "vteam/metrics.hpp"
#include "vteam/model.hpp"
#include "vteam/plot.hpp"
#include "vteam/teaming.hpp"
#include "vteam/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace vteam;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string dataset_fingerprint;
  std::vector<std::string> artifacts;
  std::optional<EvaluationReport> metrics;
  json extra = json::object();

  void add(const fs::path& out_dir, const fs::path& artifact) {
    artifacts.push_back(fs::relative(artifact, out_dir).generic_string());
  }

  void write(const fs::path& out_dir) const {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["dataset_fingerprint"] = dataset_fingerprint;
    j["artifact_paths"] = artifacts;
    j["metrics"] = metrics ? json::parse(metrics->to_json()) : json(nullptr);
    for (const auto& [k, v] : extra.items()) j[k] = v;
    const fs::path tmp = out_dir / "manifest.json.tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw Error("cannot write " + tmp.string());
      out << j.dump(2) << '\n';
      if (!out) throw Error("failed writing " + tmp.string());
    }
    fs::rename(tmp, out_dir / "manifest.json");
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hash_key_values(const std::map<std::string, std::string>& kv) {
  std::string text;
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  return sha256_hex(text);
}

void require_seed(bool ci, const std::optional<std::uint64_t>& seed) {
  if (ci && !seed) throw UsageError("--seed is required in CI mode");
}

/// Image size recorded by `prepare`, if any.
std::optional<int> prepared_image_size(const fs::path& data) {
  const fs::path stats = data / "stats.json";
  if (!fs::exists(stats)) return std::nullopt;
  const json j = json::parse(read_text(stats));
  if (j.contains("image_size") && j["image_size"].get<int>() > 0) return j["image_size"].get<int>();
  return std::nullopt;
}

std::string prepared_fingerprint(const fs::path& data, const DatasetView& view) {
  const fs::path stats = data / "stats.json";
  if (fs::exists(stats)) {
    const json j = json::parse(read_text(stats));
    if (j.contains("fingerprint")) return j["fingerprint"].get<std::string>();
  }
  return fingerprint(view);
}

json split_stats(const DatasetView& view) {
  json j;
  j["num_samples"] = view.size();
  j["image_size"] = view.image_size();
  for (Split s : {Split::train, Split::query, Split::gallery}) {
    j["samples"][to_string(s)] = view.split(s).size();
    j["identities"][to_string(s)] = view.num_identities(s);
  }
  j["identities"]["total"] = view.num_identities();
  for (const auto& [name, n] : view.num_attribute_classes()) j["attribute_classes"][name] = n;
  j["fingerprint"] = fingerprint(view);
  return j;
}

// --- prepare ---------------------------------------------------------------

struct PrepareArgs {
  std::vector<std::string> synthetic;
  std::string layout;
  fs::path root;
  fs::path out;
  std::optional<int> size;
  std::optional<std::uint64_t> seed;
};

int cmd_prepare(const PrepareArgs& a, bool ci) {
  if (a.synthetic.empty() == a.layout.empty()) throw UsageError("prepare needs exactly one of --synthetic or --layout");
  DatasetView view;
  std::map<std::string, std::string> config;
  if (!a.synthetic.empty()) {
    std::map<std::string, long long> p{{"brands", 4}, {"ids", 5}, {"views", 8}};
    std::optional<std::uint64_t> seed = a.seed;
    for (const std::string& kv : a.synthetic) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--synthetic expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      long long value = 0;
      try {
        std::size_t pos = 0;
        value = std::stoll(kv.substr(eq + 1), &pos);
        if (pos != kv.size() - eq - 1) throw std::invalid_argument(kv);
      } catch (const std::logic_error&) {
        throw UsageError("--synthetic: cannot parse '" + kv + "'");
      }
      if (key == "seed") {
        if (!a.seed) seed = static_cast<std::uint64_t>(value);
      } else if (p.count(key)) {
        p[key] = value;
      } else {
        throw UsageError("--synthetic: unknown key '" + key + "' (brands, ids, views, seed)");
      }
    }
    require_seed(ci, seed);
    const int size = a.size.value_or(64);
    view = generate_synthetic(static_cast<int>(p["brands"]), static_cast<int>(p["ids"]), static_cast<int>(p["views"]),
                              seed.value_or(0), size);
    config = {{"source", "synthetic"},
              {"brands", std::to_string(p["brands"])},
              {"ids", std::to_string(p["ids"])},
              {"views", std::to_string(p["views"])},
              {"seed", std::to_string(seed.value_or(0))},
              {"size", std::to_string(size)}};
  } else {
    if (a.root.empty()) throw UsageError("--layout needs --root");
    const Layout layout = parse_layout(a.layout);
    const int size = a.size.value_or(224);
    view = ingest_directory(a.root, layout, size);
    config = {{"source", to_string(layout)}, {"root", fs::absolute(a.root).string()}, {"size", std::to_string(size)}};
  }
  fs::create_directories(a.out);
  RunManifest m;
  m.command = "prepare";
  m.config_hash = hash_key_values(config);
  save_index(view, a.out);
  for (const char* f : {"samples.csv", "identities.csv", "attributes.csv"}) m.add(a.out, a.out / f);
  if (fs::exists(a.out / "images")) m.add(a.out, a.out / "images");
  const json stats = split_stats(view);
  write_text(a.out / "stats.json", stats.dump(2) + "\n");
  m.add(a.out, a.out / "stats.json");
  m.dataset_fingerprint = stats["fingerprint"];
  m.extra["stats"] = stats;
  m.write(a.out);
  std::cout << "prepared " << view.size() << " samples (" << view.num_identities(Split::train)
            << " train identities) in " << a.out.string() << "\n";
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  std::optional<fs::path> config;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> recipe;
  std::optional<int> epochs;
  bool verbose = false;
};

LossConfig loss_from_key_values(const std::map<std::string, std::string>& kv, std::vector<std::string>& errors) {
  LossConfig c;
  for (const auto& [key, value] : kv) {
    try {
      if (key == "margin") {
        c.margin_alpha = std::stod(value);
      } else if (key == "mining") {
        if (value == "batch_hard") c.mining = Mining::batch_hard;
        else if (value == "all_valid") c.mining = Mining::all_valid;
        else throw std::invalid_argument(value);
      } else if (key == "reduction") {
        if (value == "mean_active") c.reduction = Reduction::mean_active;
        else if (value == "mean_all") c.reduction = Reduction::mean_all;
        else if (value == "sum") c.reduction = Reduction::sum;
        else throw std::invalid_argument(value);
      } else if (key == "triplet_normalize") {
        c.triplet_normalize = value == "true" || value == "1";
      } else if (key == "proxy_scale") {
        c.proxy_scale = std::stod(value);
      } else {
        errors.push_back("loss." + key + ": unknown key");
      }
    } catch (const std::logic_error&) {
      errors.push_back("loss." + key + ": cannot parse '" + value + "'");
    }
  }
  if (!(c.margin_alpha > 0.0)) errors.push_back("loss.margin: must be positive");
  if (!(c.proxy_scale > 0.0)) errors.push_back("loss.proxy_scale: must be positive");
  return c;
}

std::map<std::string, std::string> loss_key_values(const LossConfig& c) {
  std::ostringstream margin, scale;
  margin.precision(17);
  scale.precision(17);
  margin << c.margin_alpha;
  scale << c.proxy_scale;
  return {{"loss.margin", margin.str()},
          {"loss.mining", c.mining == Mining::batch_hard ? "batch_hard" : "all_valid"},
          {"loss.reduction", c.reduction == Reduction::mean_active ? "mean_active"
                             : c.reduction == Reduction::mean_all ? "mean_all"
                                                                  : "sum"},
          {"loss.triplet_normalize", c.triplet_normalize ? "true" : "false"},
          {"loss.proxy_scale", scale.str()}};
}

int cmd_train(const TrainArgs& a, bool ci) {
  require_seed(ci, a.seed);
  std::map<std::string, std::string> file_kv;
  if (a.config) file_kv = read_key_value_file(*a.config);

  std::map<std::string, std::string> train_kv, model_kv, loss_kv;
  for (const auto& [k, v] : file_kv) {
    if (k.starts_with("model.")) model_kv[k.substr(6)] = v;
    else if (k.starts_with("loss.")) loss_kv[k.substr(5)] = v;
    else train_kv[k] = v;
  }
  if (a.recipe) train_kv["recipe"] = *a.recipe;
  if (a.seed) train_kv["seed"] = std::to_string(*a.seed);
  if (a.epochs) train_kv["total_epochs"] = std::to_string(*a.epochs);

  const Recipe recipe = parse_recipe(train_kv.count("recipe") ? train_kv["recipe"] : "reid_triplet");
  std::vector<std::string> errors;
  TrainConfig config = TrainConfig::desk(recipe, 0);
  try {
    config = TrainConfig::from_key_values(train_kv, config);
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  const LossConfig loss = loss_from_key_values(loss_kv, errors);

  // Recipe defaults: the brand discriminator uses CBAM in the first block plus
  // GA, the re-id expert GA only.
  std::map<std::string, std::string> model_defaults = ModelDescriptor{}.to_key_values();
  model_defaults["embedding_dim"] = "128";
  model_defaults["base_width"] = "16";
  model_defaults["input_size"] = std::to_string(prepared_image_size(a.data).value_or(224));
  model_defaults["attention.cbam_placement"] = to_string(recipe == Recipe::brand_proxynca ? CbamPlacement::first_block
                                                                                          : CbamPlacement::none);
  model_defaults["attention.ga_enabled"] = "true";
  model_defaults["init_seed"] = std::to_string(config.seed);
  for (const auto& [k, v] : model_kv) model_defaults[k] = v;
  ModelDescriptor descriptor;
  try {
    descriptor = ModelDescriptor::from_key_values(model_defaults);
  } catch (const ConfigError& e) {
    errors.push_back(std::string("model: ") + e.what());
  }
  if (!errors.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  const DatasetView view = load_index(a.data, descriptor.input_size);
  fs::create_directories(a.out / "checkpoints");

  std::map<std::string, std::string> resolved = config.to_key_values();
  for (const auto& [k, v] : descriptor.to_key_values()) resolved["model." + k] = v;
  for (const auto& [k, v] : loss_key_values(loss)) resolved[k] = v;
  std::string resolved_text;
  for (const auto& [k, v] : resolved) resolved_text += k + " = " + v + "\n";

  TrainOptions options;
  options.checkpoint_dir = a.out / "checkpoints";
  options.verbose = a.verbose;
  const TrainResult result = train(view, descriptor, loss, config, options);

  RunManifest m;
  m.command = "train";
  m.config_hash = hash_key_values(resolved);
  m.dataset_fingerprint = prepared_fingerprint(a.data, view);
  write_text(a.out / "config.txt", resolved_text);
  m.add(a.out, a.out / "config.txt");
  if (result.state.checkpoint_paths.empty()) {
    const fs::path p = a.out / "checkpoints" / "final.vtc";
    save_checkpoint(result.model, p, {{"recipe", to_string(config.recipe)}, {"tag", "final"}});
    m.add(a.out, p);
  }
  std::set<std::string> listed;
  for (const fs::path& p : result.state.checkpoint_paths)
    if (listed.insert(p.string()).second) m.add(a.out, p);
  result.state.write_loss_csv(a.out / "loss.csv");
  m.add(a.out, a.out / "loss.csv");
  write_text(a.out / "train_state.json", result.state.to_json() + "\n");
  m.add(a.out, a.out / "train_state.json");
  if (!result.state.loss_history.empty()) {
    Series s{"loss", {}, {}};
    for (const LossRecord& r : result.state.loss_history) {
      s.x.push_back(r.step);
      s.y.push_back(r.loss);
    }
    plot_lines({s}, {"training loss", "step", "loss"}, a.out / "loss.png");
    m.add(a.out, a.out / "loss.png");
  }
  if (config.recipe == Recipe::brand_proxynca && config.total_epochs > 0) {
    m.extra["nearest_proxy_accuracy"] =
        nearest_proxy_accuracy(result.model, result.proxies, view, config.label_attribute());
  }
  m.extra["final_checkpoint"] = checkpoint_hash(a.out / "checkpoints" / "final.vtc");
  m.write(a.out);
  std::cout << "trained " << config.total_epochs << " epochs, " << result.state.step << " steps; checkpoints in "
            << (a.out / "checkpoints").string() << "\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  fs::path data;
  fs::path checkpoint;
  std::string protocol;
  fs::path out;
  std::string split = "test";
  std::string label = "identity";
  bool rankings = false;
  bool plots = false;
  std::optional<std::uint64_t> seed;
};

std::vector<const Sample*> select_split(const DatasetView& view, const std::string& split) {
  if (split == "test") return view.test_samples();
  if (split == "all") {
    std::vector<const Sample*> out;
    for (const Sample& s : view.samples()) out.push_back(&s);
    return out;
  }
  return view.split(parse_split(split));
}

EvaluationReport evaluate_zsl(const Eigen::MatrixXd& e, const std::vector<const Sample*>& samples, Attribute label,
                              std::uint64_t seed) {
  std::vector<int> labels;
  for (const Sample* s : samples) {
    const auto v = s->attribute(label);
    if (!v) throw Error("samples lack " + to_string(label) + " labels");
    labels.push_back(*v);
  }
  const int k = static_cast<int>(std::set<int>(labels.begin(), labels.end()).size());
  EvaluationReport r;
  r.protocol = Protocol::cars196_zsl;
  KMeansOptions ko;
  ko.seed = seed;
  const KMeansResult km = kmeans_cluster(e, k, ko);
  r.nmi = nmi({km.labels, labels});
  const int ks[] = {1, 2, 4, 8};
  r.recall_at = recall_at_k(e, labels, ks);
  r.num_queries = static_cast<int>(samples.size());
  return r;
}

int cmd_eval(const EvalArgs& a, bool ci) {
  require_seed(ci, a.seed);
  const Protocol protocol = parse_protocol(a.protocol);
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const DatasetView view = load_index(a.data, ck.model.descriptor().input_size);
  fs::create_directories(a.out);
  RunManifest m;
  m.command = "eval";
  m.config_hash = hash_key_values({{"checkpoint", ck.hash},
                                   {"protocol", to_string(protocol)},
                                   {"split", a.split},
                                   {"label", a.label},
                                   {"seed", std::to_string(a.seed.value_or(0))}});
  m.dataset_fingerprint = prepared_fingerprint(a.data, view);

  auto source_ids = [](const std::vector<const Sample*>& v) {
    std::vector<std::string> ids;
    for (const Sample* s : v) ids.push_back(s->source);
    return ids;
  };

  EvaluationReport report;
  if (protocol == Protocol::cars196_zsl) {
    const auto samples = select_split(view, a.split);
    if (samples.size() < 2) throw Error("cars196_zsl evaluation needs at least two samples in split '" + a.split + "'");
    const Eigen::MatrixXd e = embed_matrix(ck.model, samples, true);
    report = evaluate_zsl(e, samples, parse_attribute(a.label), a.seed.value_or(0));
    if (a.rankings) {
      std::vector<RetrievalMeta> meta;
      for (const Sample* s : samples) meta.push_back({*s->attribute(parse_attribute(a.label)), std::nullopt});
      MapCmcResult all = map_cmc(e, e, meta, meta, Protocol::cars196_zsl, 50);
      for (RankingResult& r : all.rankings) {
        // Leave-one-out: drop the query itself.
        for (std::size_t p = 0; p < r.gallery_order.size(); ++p) {
          if (r.gallery_order[p] == r.query_index) {
            r.gallery_order.erase(r.gallery_order.begin() + static_cast<long>(p));
            r.distances.erase(r.distances.begin() + static_cast<long>(p));
            r.relevance.erase(r.relevance.begin() + static_cast<long>(p));
            break;
          }
        }
      }
      const auto ids = source_ids(samples);
      write_rankings_csv(all.rankings, a.out / "rankings.csv", ids, ids);
      m.add(a.out, a.out / "rankings.csv");
    }
    if (a.plots) {
      std::vector<Bar> bars{{"NMI", *report.nmi}};
      for (const auto& [k, v] : report.recall_at) bars.push_back({"R@" + std::to_string(k), v});
      plot_bars(bars, {"cars196_zsl", "", "score"}, a.out / "metrics.png");
      m.add(a.out, a.out / "metrics.png");
    }
  } else {
    const auto queries = view.split(Split::query);
    const auto gallery = view.split(Split::gallery);
    if (queries.empty() || gallery.empty()) throw Error("veri776 protocol needs query and gallery splits");
    for (const auto* part : {&queries, &gallery})
      for (const Sample* s : *part)
        if (!s->camera_id) throw Error("veri776 protocol needs camera ids; " + s->source + " has none");
    std::vector<RetrievalMeta> qm, gm;
    for (const Sample* s : queries) qm.push_back({s->identity_id, s->camera_id});
    for (const Sample* s : gallery) gm.push_back({s->identity_id, s->camera_id});
    const MapCmcResult r = map_cmc(embed_matrix(ck.model, queries, true), embed_matrix(ck.model, gallery, true), qm,
                                   gm, Protocol::veri776, 50);
    report.protocol = Protocol::veri776;
    report.map_score = r.map_score;
    report.cmc = r.cmc;
    report.num_queries = static_cast<int>(queries.size());
    report.queries_without_relevant = r.queries_without_relevant;
    if (a.rankings) {
      write_rankings_csv(r.rankings, a.out / "rankings.csv", source_ids(queries), source_ids(gallery));
      m.add(a.out, a.out / "rankings.csv");
    }
    if (a.plots) {
      Series s{"CMC", {}, {}};
      for (std::size_t k = 0; k < r.cmc.size(); ++k) {
        s.x.push_back(static_cast<double>(k + 1));
        s.y.push_back(r.cmc[k]);
      }
      plot_lines({s}, {"CMC", "rank", "match rate"}, a.out / "cmc.png");
      m.add(a.out, a.out / "cmc.png");
    }
  }
  write_text(a.out / "report.json", report.to_json() + "\n");
  m.add(a.out, a.out / "report.json");
  m.metrics = report;
  m.write(a.out);
  std::cout << report.to_json() << "\n";
  return 0;
}

// --- team ------------------------------------------------------------------

struct ExpertSpec {
  std::string id;
  Predicate predicate;
  fs::path checkpoint;
};

ExpertSpec parse_expert_spec(const std::string& text) {
  const auto c1 = text.find(',');
  const auto c2 = c1 == std::string::npos ? c1 : text.find(',', c1 + 1);
  if (c2 == std::string::npos) throw UsageError("--expert expects id,predicate,checkpoint; got '" + text + "'");
  return {text.substr(0, c1), Predicate::parse(text.substr(c1 + 1, c2 - c1 - 1)), text.substr(c2 + 1)};
}

Expert expert_from_checkpoint(const ExpertSpec& spec) {
  LoadedCheckpoint ck = load_checkpoint(spec.checkpoint);
  ExpertDescriptor d{spec.id, spec.predicate, ck.hash, ck.model.descriptor().embedding_dim};
  auto model = std::make_shared<const EmbeddingModel>(std::move(ck.model));
  return {d, std::make_shared<ModelEmbedder>(std::move(model))};
}

struct TeamArgs {
  fs::path registry;
  std::vector<std::string> experts;
  std::vector<std::string> gates;
  std::string policy = "single_best";
  double threshold = 0.0;
  std::string priority = "brand,color,type";
  fs::path data;
  fs::path out;
  std::string split = "test";
  std::string protocol = "veri776";
};

int input_size_of(const TeamRegistry& registry) {
  std::optional<int> size;
  auto check = [&](int s, const std::string& who) {
    if (size && *size != s) throw Error("registry mixes input sizes (" + who + " expects " + std::to_string(s) + ")");
    size = s;
  };
  for (const Expert& e : registry.experts())
    if (const auto* me = dynamic_cast<const ModelEmbedder*>(e.embedder.get()))
      check(me->model().descriptor().input_size, "expert '" + e.descriptor.expert_id + "'");
  for (const auto& g : registry.gates())
    if (const auto* pg = dynamic_cast<const PrototypeGate*>(g.get()))
      check(pg->model().descriptor().input_size, to_string(pg->attribute()) + " gate");
  return size.value_or(224);
}

int cmd_team_assemble(const TeamArgs& a) {
  TeamOptions options;
  options.policy = parse_routing_policy(a.policy);
  options.confidence_threshold = a.threshold;
  options.priority.clear();
  std::stringstream ss(a.priority);
  for (std::string t; std::getline(ss, t, ',');) options.priority.push_back(parse_attribute(t));

  std::vector<std::shared_ptr<const AttributePredictor>> gates;
  std::vector<std::pair<fs::path, std::string>> to_import;
  for (const std::string& g : a.gates) {
    const auto comma = g.find(',');
    if (comma == std::string::npos) throw UsageError("--gate expects attribute,checkpoint|label|constant:N");
    const Attribute attr = parse_attribute(g.substr(0, comma));
    const std::string ref = g.substr(comma + 1);
    if (ref == "label") {
      gates.push_back(std::make_shared<LabelGate>(attr));
    } else if (ref.starts_with("constant:")) {
      gates.push_back(std::make_shared<ConstantGate>(attr, std::stoi(ref.substr(9))));
    } else {
      auto gate = load_prototype_gate(ref);
      if (gate->attribute() != attr) {
        throw Error("gate checkpoint " + ref + " predicts " + to_string(gate->attribute()) + ", not " +
                    to_string(attr));
      }
      to_import.push_back({ref, gate->descriptor().ref});
      gates.push_back(std::move(gate));
    }
  }
  std::vector<Expert> experts;
  for (const std::string& e : a.experts) {
    const ExpertSpec spec = parse_expert_spec(e);
    experts.push_back(expert_from_checkpoint(spec));
    to_import.push_back({spec.checkpoint, experts.back().descriptor.checkpoint_hash});
  }
  const TeamRegistry registry(std::move(experts), std::move(gates), options);
  for (const auto& [path, hash] : to_import) {
    if (import_checkpoint(a.registry, path) != hash) throw Error(path.string() + " changed while assembling");
  }
  write_manifest(a.registry, manifest_of(registry));

  RunManifest m;
  m.command = "team assemble";
  m.config_hash = sha256_hex(format_manifest(manifest_of(registry)));
  m.add(a.registry, a.registry / "manifest.txt");
  for (const auto& [path, hash] : to_import) m.add(a.registry, stored_checkpoint(a.registry, hash));
  m.write(a.registry);
  std::cout << format_manifest(manifest_of(registry));
  return 0;
}

int cmd_team_add_expert(const TeamArgs& a) {
  if (a.experts.size() != 1) throw UsageError("add-expert takes exactly one --expert");
  const TeamRegistry current = load_registry(a.registry);
  const ExpertSpec spec = parse_expert_spec(a.experts.front());
  Expert expert = expert_from_checkpoint(spec);
  const std::string hash = expert.descriptor.checkpoint_hash;
  const TeamRegistry next = current.add_expert(std::move(expert));
  if (import_checkpoint(a.registry, spec.checkpoint) != hash) throw Error(spec.checkpoint.string() + " changed");
  write_manifest(a.registry, manifest_of(next));

  RunManifest m;
  m.command = "team add-expert";
  m.config_hash = sha256_hex(format_manifest(manifest_of(next)));
  m.add(a.registry, a.registry / "manifest.txt");
  m.add(a.registry, stored_checkpoint(a.registry, hash));
  m.write(a.registry);
  std::cout << format_manifest(manifest_of(next));
  return 0;
}

std::string format_weight(double w) {
  std::ostringstream s;
  s.precision(17);
  s << w;
  return s.str();
}

int cmd_team_route(const TeamArgs& a) {
  const TeamRegistry registry = load_registry(a.registry);
  const DatasetView view = load_index(a.data, input_size_of(registry));
  const auto samples = select_split(view, a.split);
  fs::create_directories(a.out);
  const fs::path path = a.out / "routes.csv";
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "sample,selected,fell_back";
  for (const Expert& e : registry.experts()) out << ",w:" << e.descriptor.expert_id;
  out << ",evidence\n";
  for (const Sample* s : samples) {
    const GateDecision d = registry.route(*s);
    std::string selected;
    for (const std::string& id : d.selected) selected += (selected.empty() ? "" : ";") + id;
    out << s->source << ',' << selected << ',' << (d.fell_back ? 1 : 0);
    for (double w : d.weights) out << ',' << format_weight(w);
    out << ',';
    for (std::size_t i = 0; i < d.evidence.size(); ++i) {
      out << (i ? ";" : "") << to_string(d.evidence[i].attribute) << '=' << d.evidence[i].label << '@'
          << format_weight(d.evidence[i].confidence);
    }
    out << '\n';
  }
  out.close();
  RunManifest m;
  m.command = "team route";
  m.config_hash = sha256_hex(format_manifest(manifest_of(registry)) + "split=" + a.split);
  m.dataset_fingerprint = prepared_fingerprint(a.data, view);
  m.add(a.out, path);
  m.write(a.out);
  std::cout << "routed " << samples.size() << " samples to " << path.string() << "\n";
  return 0;
}

int cmd_team_identify(const TeamArgs& a) {
  const TeamRegistry registry = load_registry(a.registry);
  const Protocol protocol = parse_protocol(a.protocol);
  const DatasetView view = load_index(a.data, input_size_of(registry));
  const auto queries = view.split(Split::query);
  const auto gallery = view.split(Split::gallery);
  if (queries.empty() || gallery.empty()) throw Error("identify needs query and gallery splits");
  const IdentifyResult r = team_identify(registry, queries, gallery, protocol);
  fs::create_directories(a.out);
  RunManifest m;
  m.command = "team identify";
  m.config_hash = sha256_hex(format_manifest(manifest_of(registry)) + "protocol=" + a.protocol);
  m.dataset_fingerprint = prepared_fingerprint(a.data, view);

  std::vector<std::string> qids, gids;
  for (const Sample* s : queries) qids.push_back(s->source);
  for (const Sample* s : gallery) gids.push_back(s->source);
  write_rankings_csv(r.retrieval.rankings, a.out / "rankings.csv", qids, gids);
  m.add(a.out, a.out / "rankings.csv");

  const fs::path ipath = a.out / "identify.csv";
  std::ofstream out(ipath);
  if (!out) throw Error("cannot write " + ipath.string());
  out << "query,expert,top1,top1_distance,top1_relevant\n";
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const RankingResult& rk = r.retrieval.rankings[i];
    std::string expert;
    for (const std::string& id : r.queries.decisions[i].selected) expert += (expert.empty() ? "" : ";") + id;
    out << qids[i] << ',' << expert << ',';
    if (rk.gallery_order.empty()) {
      out << ",,0\n";
    } else {
      out << gids[rk.gallery_order[0]] << ',' << format_weight(rk.distances[0]) << ',' << (rk.relevance[0] ? 1 : 0)
          << '\n';
    }
  }
  out.close();
  m.add(a.out, ipath);

  EvaluationReport report;
  report.protocol = protocol;
  report.map_score = r.retrieval.map_score;
  report.cmc = r.retrieval.cmc;
  report.num_queries = static_cast<int>(queries.size());
  report.queries_without_relevant = r.retrieval.queries_without_relevant;
  write_text(a.out / "report.json", report.to_json() + "\n");
  m.add(a.out, a.out / "report.json");
  m.metrics = report;
  m.write(a.out);
  std::cout << report.to_json() << "\n";
  return 0;
}

// --- report ----------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> evals;   // name=dir
  std::vector<std::string> trains;  // name=dir
  fs::path out;
};

std::pair<std::string, fs::path> named_dir(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) return {fs::path(s).filename().string(), s};
  return {s.substr(0, eq), s.substr(eq + 1)};
}

int cmd_report(const ReportArgs& a) {
  if (a.evals.empty() && a.trains.empty()) throw UsageError("report needs --eval and/or --train directories");
  fs::create_directories(a.out);
  RunManifest m;
  m.command = "report";
  json summary;
  std::string config_text;
  std::map<std::string, std::vector<Bar>> bars;
  for (const std::string& e : a.evals) {
    const auto [name, dir] = named_dir(e);
    const EvaluationReport r = EvaluationReport::from_json(read_text(dir / "report.json"));
    summary["eval"][name] = json::parse(r.to_json());
    config_text += "eval " + name + "=" + fs::absolute(dir).string() + "\n";
    if (r.nmi) bars["nmi"].push_back({name, *r.nmi});
    if (r.recall_at.count(1)) bars["recall_at_1"].push_back({name, r.recall_at.at(1)});
    if (r.map_score) bars["map"].push_back({name, *r.map_score});
    if (!r.cmc.empty()) bars["cmc_1"].push_back({name, r.cmc[0]});
  }
  std::vector<Series> losses;
  for (const std::string& t : a.trains) {
    const auto [name, dir] = named_dir(t);
    config_text += "train " + name + "=" + fs::absolute(dir).string() + "\n";
    std::ifstream in(dir / "loss.csv");
    if (!in) throw Error("no loss.csv in " + dir.string());
    Series s{name, {}, {}};
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::stringstream ls(line);
      std::string step, loss;
      std::getline(ls, step, ',');
      std::getline(ls, loss, ',');
      s.x.push_back(std::stod(step));
      s.y.push_back(std::stod(loss));
    }
    summary["train"][name]["steps"] = s.x.size();
    summary["train"][name]["final_loss"] = s.y.empty() ? json(nullptr) : json(s.y.back());
    losses.push_back(std::move(s));
  }
  for (const auto& [metric, b] : bars) {
    const fs::path p = a.out / (metric + ".png");
    plot_bars(b, {metric, "", metric}, p);
    m.add(a.out, p);
  }
  if (!losses.empty()) {
    plot_lines(losses, {"training loss", "step", "loss"}, a.out / "loss.png");
    m.add(a.out, a.out / "loss.png");
  }
  write_text(a.out / "summary.json", summary.dump(2) + "\n");
  m.add(a.out, a.out / "summary.json");
  m.config_hash = sha256_hex(config_text);
  m.write(a.out);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teamed vehicle re-identification: data preparation, training, evaluation and expert teams."};
  app.require_subcommand(1);
  bool ci = false;
  app.add_flag("--ci", ci, "CI mode: every randomised command must be given --seed");

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Generate or ingest a dataset and write its index and stats");
  prepare->add_option("--synthetic", prep.synthetic, "Synthetic generator settings: brands=N ids=N views=N seed=N")
      ->expected(0, -1);
  prepare->add_option("--layout", prep.layout, "Directory layout to ingest")
      ->check(CLI::IsMember({"cars196", "veri776"}));
  prepare->add_option("--root", prep.root, "Dataset root for --layout");
  prepare->add_option("--out", prep.out, "Output directory")->required();
  prepare->add_option("--size", prep.size, "Image side length (default 64 synthetic, 224 ingested)");
  prepare->add_option("--seed", prep.seed, "Generator seed (overrides seed= in --synthetic)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a brand discriminator or re-id expert");
  train_cmd->add_option("--data", tr.data, "Prepared dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--config", tr.config, "key = value config file (train keys, model.*, loss.*)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--seed", tr.seed, "Seed for sampling, augmentation and initialisation");
  train_cmd->add_option("--recipe", tr.recipe, "brand_proxynca or reid_triplet")
      ->check(CLI::IsMember({"brand_proxynca", "reid_triplet"}));
  train_cmd->add_option("--epochs", tr.epochs, "Override total_epochs");
  train_cmd->add_flag("--verbose", tr.verbose, "Print per-epoch loss");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--data", ev.data, "Prepared dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--protocol", ev.protocol, "cars196_zsl or veri776")
      ->required()
      ->check(CLI::IsMember({"cars196_zsl", "veri776"}));
  eval->add_option("--out", ev.out, "Output directory")->required();
  eval->add_option("--split", ev.split, "cars196_zsl samples: test, train, query, gallery or all")
      ->check(CLI::IsMember({"test", "train", "query", "gallery", "all"}));
  eval->add_option("--label", ev.label, "cars196_zsl ground truth: identity, brand, color or type")
      ->check(CLI::IsMember({"identity", "brand", "color", "type"}));
  eval->add_flag("--rankings", ev.rankings, "Write rankings.csv");
  eval->add_flag("--plots", ev.plots, "Write metric plots");
  eval->add_option("--seed", ev.seed, "k-means seed");

  TeamArgs ta;
  auto* team = app.add_subcommand("team", "Expert teams: assemble, add-expert, route, identify");
  team->require_subcommand(1);
  auto* assemble = team->add_subcommand("assemble", "Build and validate a registry");
  assemble->add_option("--registry", ta.registry, "Registry directory")->required();
  assemble->add_option("--expert", ta.experts, "id,predicate,checkpoint (predicate: brand=N, color=N, type=N or *)")
      ->required();
  assemble->add_option("--gate", ta.gates, "attribute,checkpoint | attribute,label | attribute,constant:N");
  assemble->add_option("--policy", ta.policy, "single_best or per_dimension")
      ->check(CLI::IsMember({"single_best", "per_dimension"}));
  assemble->add_option("--threshold", ta.threshold, "Gate confidence below which the default expert is used")
      ->check(CLI::Range(0.0, 1.0));
  assemble->add_option("--priority", ta.priority, "Dimension priority, comma separated");
  auto* add = team->add_subcommand("add-expert", "Add one expert to an existing registry");
  add->add_option("--registry", ta.registry, "Registry directory")->required()->check(CLI::ExistingDirectory);
  add->add_option("--expert", ta.experts, "id,predicate,checkpoint")->required();
  auto* route = team->add_subcommand("route", "Route samples and dump gate decisions");
  route->add_option("--registry", ta.registry, "Registry directory")->required()->check(CLI::ExistingDirectory);
  route->add_option("--data", ta.data, "Prepared dataset directory")->required()->check(CLI::ExistingDirectory);
  route->add_option("--out", ta.out, "Output directory")->required();
  route->add_option("--split", ta.split, "test, train, query, gallery or all")
      ->check(CLI::IsMember({"test", "train", "query", "gallery", "all"}));
  auto* identify = team->add_subcommand("identify", "Gate, embed and rank the query split against the gallery");
  identify->add_option("--registry", ta.registry, "Registry directory")->required()->check(CLI::ExistingDirectory);
  identify->add_option("--data", ta.data, "Prepared dataset directory")->required()->check(CLI::ExistingDirectory);
  identify->add_option("--out", ta.out, "Output directory")->required();
  identify->add_option("--protocol", ta.protocol, "cars196_zsl or veri776")
      ->check(CLI::IsMember({"cars196_zsl", "veri776"}));

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Collect eval/train runs into plots and a summary");
  report->add_option("--eval", rep.evals, "name=eval_dir");
  report->add_option("--train", rep.trains, "name=train_dir");
  report->add_option("--out", rep.out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return cmd_prepare(prep, ci);
    if (train_cmd->parsed()) return cmd_train(tr, ci);
    if (eval->parsed()) return cmd_eval(ev, ci);
    if (assemble->parsed()) return cmd_team_assemble(ta);
    if (add->parsed()) return cmd_team_add_expert(ta);
    if (route->parsed()) return cmd_team_route(ta);
    if (identify->parsed()) return cmd_team_identify(ta);
    if (report->parsed()) return cmd_report(rep);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
