#include "vteam/teaming.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vteam/checkpoint.hpp"
#include "vteam/error.hpp"

namespace fs = std::filesystem;

namespace vteam {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string t; std::getline(ss, t, sep);) out.push_back(trim(t));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos == s.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw RegistryError("cannot parse " + what + " '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Predicate

std::string Predicate::dimension() const { return attribute ? vteam::to_string(*attribute) : "default"; }

std::string Predicate::to_string() const {
  return attribute ? vteam::to_string(*attribute) + "=" + std::to_string(value) : "*";
}

bool Predicate::overlaps(const Predicate& other) const {
  if (universal() || other.universal()) return universal() && other.universal();
  return *attribute == *other.attribute && value == other.value;
}

Predicate Predicate::parse(const std::string& text) {
  const std::string t = trim(text);
  if (t == "*") return {};
  const auto eq = t.find('=');
  if (eq == std::string::npos) throw RegistryError("predicate '" + text + "' is not '*' or '<attribute>=<label>'");
  std::string name = trim(t.substr(0, eq));
  if (name.size() > 3 && name.ends_with("_id")) name.resize(name.size() - 3);
  Predicate p;
  try {
    p.attribute = parse_attribute(name);
  } catch (const Error&) {
    throw RegistryError("predicate '" + text + "' names unknown attribute '" + name + "'");
  }
  if (*p.attribute == Attribute::identity) {
    throw RegistryError("predicate '" + text + "': experts partition by brand, color or type");
  }
  p.value = parse_int(trim(t.substr(eq + 1)), "predicate label");
  if (p.value < 0) throw RegistryError("predicate '" + text + "': label must be >= 0");
  return p;
}

// ---------------------------------------------------------------------------
// Embedders and gates

Eigen::MatrixXd Embedder::embed(std::span<const Sample* const> samples) const {
  forward_count_.fetch_add(static_cast<long>(samples.size()));
  return do_embed(samples);
}

Eigen::MatrixXd ModelEmbedder::do_embed(std::span<const Sample* const> samples) const {
  return embed_matrix(*model_, samples, true);
}

PrototypeGate::PrototypeGate(Attribute attribute, std::shared_ptr<const EmbeddingModel> model,
                             Eigen::MatrixXd prototypes, double scale, std::string checkpoint_hash)
    : attribute_(attribute), model_(std::move(model)), prototypes_(l2_normalize_rows(prototypes)), scale_(scale),
      hash_(std::move(checkpoint_hash)) {
  if (!model_) throw RegistryError("prototype gate needs a model");
  if (prototypes_.rows() < 1 || prototypes_.cols() != model_->descriptor().embedding_dim) {
    throw ShapeError("prototype gate: prototypes must be (classes x " +
                     std::to_string(model_->descriptor().embedding_dim) + ")");
  }
}

AttributePrediction PrototypeGate::predict(const Sample& sample) const {
  const Sample* one[] = {&sample};
  const Eigen::RowVectorXd e = embed_matrix(*model_, one, true).row(0);
  const Eigen::VectorXd d2 = (prototypes_.rowwise() - e).rowwise().squaredNorm();
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < d2.size(); ++c)
    if (d2(c) < d2(best)) best = c;
  double denom = 0.0;
  for (Eigen::Index c = 0; c < d2.size(); ++c) denom += std::exp(-scale_ * (d2(c) - d2(best)));
  return {static_cast<int>(best), 1.0 / denom};
}

AttributePrediction LabelGate::predict(const Sample& sample) const {
  const auto v = sample.attribute(attribute_);
  if (!v) throw RegistryError("label gate: sample " + sample.source + " has no " + to_string(attribute_) + " label");
  return {*v, 1.0};
}

std::string to_string(RoutingPolicy p) { return p == RoutingPolicy::single_best ? "single_best" : "per_dimension"; }

RoutingPolicy parse_routing_policy(const std::string& s) {
  if (s == "single_best") return RoutingPolicy::single_best;
  if (s == "per_dimension") return RoutingPolicy::per_dimension;
  throw ConfigError("unknown routing policy '" + s + "' (expected single_best or per_dimension)");
}

// ---------------------------------------------------------------------------
// Registry

TeamRegistry::TeamRegistry(std::vector<Expert> experts, std::vector<std::shared_ptr<const AttributePredictor>> gates,
                           TeamOptions options)
    : experts_(std::move(experts)), gates_(std::move(gates)), options_(std::move(options)) {
  if (experts_.empty()) throw RegistryError("registry has no experts");
  if (!(options_.confidence_threshold >= 0.0 && options_.confidence_threshold <= 1.0)) {
    throw RegistryError("confidence threshold must be in [0,1]");
  }
  std::set<Attribute> gate_attributes;
  for (const auto& g : gates_) {
    if (!g) throw RegistryError("null gate");
    if (!gate_attributes.insert(g->attribute()).second) {
      throw RegistryError("two gates predict " + to_string(g->attribute()));
    }
  }
  std::optional<std::size_t> universal;
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    const ExpertDescriptor& d = experts_[i].descriptor;
    if (d.expert_id.empty() || d.expert_id.find_first_of("|\n") != std::string::npos) {
      throw RegistryError("invalid expert id '" + d.expert_id + "'");
    }
    if (!experts_[i].embedder) throw RegistryError("expert '" + d.expert_id + "' has no model");
    if (experts_[i].embedder->embedding_dim() != d.embedding_dim) {
      throw RegistryError("expert '" + d.expert_id + "' declares dim " + std::to_string(d.embedding_dim) +
                          " but its model produces " + std::to_string(experts_[i].embedder->embedding_dim()));
    }
    for (std::size_t j = 0; j < i; ++j) {
      const ExpertDescriptor& o = experts_[j].descriptor;
      if (o.expert_id == d.expert_id) throw RegistryError("duplicate expert id '" + d.expert_id + "'");
      if (o.predicate.overlaps(d.predicate)) {
        throw RegistryError("expert '" + d.expert_id + "' (" + d.predicate.to_string() + ") overlaps expert '" +
                            o.expert_id + "' (" + o.predicate.to_string() + ")");
      }
    }
    if (d.predicate.universal()) {
      universal = i;
    } else if (!gate_attributes.count(*d.predicate.attribute)) {
      throw RegistryError("expert '" + d.expert_id + "' needs a " + to_string(*d.predicate.attribute) +
                          " gate, none registered");
    }
  }
  if (!universal) throw RegistryError("registry has no default expert (an expert with predicate '*')");
  default_index_ = *universal;
}

std::optional<std::size_t> TeamRegistry::find(const std::string& expert_id) const {
  for (std::size_t i = 0; i < experts_.size(); ++i)
    if (experts_[i].descriptor.expert_id == expert_id) return i;
  return std::nullopt;
}

GateDecision TeamRegistry::route(const Sample& sample) const {
  GateDecision decision;
  decision.weights.assign(experts_.size(), 0.0);
  std::map<Attribute, GateEvidence> by_attribute;
  for (const auto& g : gates_) {
    const AttributePrediction p = g->predict(sample);
    decision.evidence.push_back({g->attribute(), p.label, p.confidence});
    by_attribute[g->attribute()] = decision.evidence.back();
  }
  std::vector<Attribute> order = options_.priority;
  for (const auto& g : gates_)
    if (std::find(order.begin(), order.end(), g->attribute()) == order.end()) order.push_back(g->attribute());

  std::vector<std::size_t> chosen;
  for (Attribute a : order) {
    const auto ev = by_attribute.find(a);
    if (ev == by_attribute.end() || ev->second.confidence < options_.confidence_threshold) continue;
    for (std::size_t i = 0; i < experts_.size(); ++i) {
      const Predicate& p = experts_[i].descriptor.predicate;
      if (!p.universal() && *p.attribute == a && p.value == ev->second.label) {
        chosen.push_back(i);
        break;
      }
    }
    if (!chosen.empty() && options_.policy == RoutingPolicy::single_best) break;
  }
  if (chosen.empty()) {
    chosen.push_back(default_index_);
    decision.fell_back = true;
  }
  for (std::size_t i : chosen) {
    decision.weights[i] = 1.0 / static_cast<double>(chosen.size());
    decision.selected.push_back(experts_[i].descriptor.expert_id);
  }
  return decision;
}

EmbeddingVector TeamRegistry::ensemble_embed(const Sample& sample, const GateDecision& decision) const {
  if (decision.weights.size() != experts_.size()) {
    throw RegistryError("gate decision has " + std::to_string(decision.weights.size()) + " weights for " +
                        std::to_string(experts_.size()) + " experts");
  }
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    if (decision.weights[i] < 0.0) throw RegistryError("negative gate weight");
    if (decision.weights[i] > 0.0) selected.push_back(i);
  }
  if (selected.empty()) throw RegistryError("gate decision selects no expert");
  const int dim = experts_[selected.front()].descriptor.embedding_dim;
  for (std::size_t i : selected) {
    if (experts_[i].descriptor.embedding_dim != dim) {
      throw ShapeError("selected experts disagree on embedding dim: '" +
                       experts_[selected.front()].descriptor.expert_id + "' has " + std::to_string(dim) + ", '" +
                       experts_[i].descriptor.expert_id + "' has " +
                       std::to_string(experts_[i].descriptor.embedding_dim));
    }
  }
  const Sample* one[] = {&sample};
  EmbeddingVector out;
  for (std::size_t k = 0; k < selected.size(); ++k) {
    const std::size_t i = selected[k];
    const Eigen::VectorXd h = experts_[i].embedder->embed(one).row(0).transpose();
    if (k == 0) {
      out.values = decision.weights[i] * h;
    } else {
      out.values += decision.weights[i] * h;
    }
  }
  out.normalized = selected.size() == 1 && decision.weights[selected.front()] == 1.0;
  return out;
}

TeamRegistry TeamRegistry::add_expert(Expert expert) const {
  for (const Expert& e : experts_) {
    if (e.descriptor.predicate.overlaps(expert.descriptor.predicate)) {
      throw RegistryError("expert '" + expert.descriptor.expert_id + "' (" + expert.descriptor.predicate.to_string() +
                          ") overlaps expert '" + e.descriptor.expert_id + "' (" + e.descriptor.predicate.to_string() +
                          ")");
    }
  }
  std::vector<Expert> experts = experts_;
  experts.push_back(std::move(expert));
  return TeamRegistry(std::move(experts), gates_, options_);
}

// ---------------------------------------------------------------------------
// Gates

std::shared_ptr<const AttributePredictor> train_gate(const DatasetView& dataset, Attribute attribute,
                                                     const ModelDescriptor& descriptor, TrainConfig config,
                                                     const LossConfig& loss, const TrainOptions& options) {
  if (attribute == Attribute::identity) throw ConfigError("gates predict brand, color or type");
  std::set<int> classes;
  for (const Sample* s : dataset.split(Split::train)) {
    const auto v = s->attribute(attribute);
    if (!v) throw ConfigError("gate training needs " + to_string(attribute) + " labels (missing on " + s->source + ")");
    classes.insert(*v);
  }
  if (classes.empty()) throw ConfigError("gate training needs a non-empty train split");
  if (classes.size() == 1) return std::make_shared<ConstantGate>(attribute, *classes.begin());
  config.recipe = Recipe::brand_proxynca;
  config.label = attribute;
  TrainResult r = train(dataset, descriptor, loss, config, options);
  auto model = std::make_shared<const EmbeddingModel>(std::move(r.model));
  return std::make_shared<PrototypeGate>(attribute, std::move(model), r.proxies.proxies, loss.proxy_scale);
}

double gate_accuracy(const AttributePredictor& gate, std::span<const Sample* const> samples) {
  if (samples.empty()) return 0.0;
  int hits = 0;
  for (const Sample* s : samples)
    if (s->attribute(gate.attribute()) == gate.predict(*s).label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

std::string save_prototype_gate(const PrototypeGate& gate, const fs::path& path) {
  const Eigen::MatrixXd& p = gate.prototypes();
  Tensor t(static_cast<int>(p.rows()), static_cast<int>(p.cols()), 1, 1);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index d = 0; d < p.cols(); ++d) t.at(static_cast<int>(i), static_cast<int>(d), 0, 0) = p(i, d);
  std::ostringstream scale;
  scale.precision(17);
  scale << gate.scale();
  return save_checkpoint(gate.model(), path,
                         {{"gate.attribute", to_string(gate.attribute())}, {"gate.scale", scale.str()}},
                         {{"prototypes", t}});
}

std::shared_ptr<const PrototypeGate> load_prototype_gate(const fs::path& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  const auto attr = ck.metadata.find("gate.attribute");
  const auto proto = ck.extras.find("prototypes");
  if (attr == ck.metadata.end() || proto == ck.extras.end()) {
    throw CheckpointError(path.string() + " is not a gate checkpoint (no prototypes; train it with the brand_proxynca recipe)");
  }
  double scale = 3.0;
  if (const auto s = ck.metadata.find("gate.scale"); s != ck.metadata.end()) scale = std::stod(s->second);
  const Tensor& t = proto->second;
  Eigen::MatrixXd p(t.n(), t.c());
  for (int i = 0; i < t.n(); ++i)
    for (int d = 0; d < t.c(); ++d) p(i, d) = t.at(i, d, 0, 0);
  auto model = std::make_shared<const EmbeddingModel>(std::move(ck.model));
  return std::make_shared<PrototypeGate>(parse_attribute(attr->second), std::move(model), std::move(p), scale,
                                         ck.hash);
}

// ---------------------------------------------------------------------------
// Persistence

fs::path stored_checkpoint(const fs::path& registry_dir, const std::string& hash) {
  return registry_dir / "checkpoints" / (hash + ".vtc");
}

std::string import_checkpoint(const fs::path& registry_dir, const fs::path& checkpoint) {
  const std::string hash = checkpoint_hash(checkpoint);
  const fs::path dest = stored_checkpoint(registry_dir, hash);
  if (!fs::exists(dest)) {
    fs::create_directories(dest.parent_path());
    const fs::path tmp = dest.string() + ".tmp";
    fs::copy_file(checkpoint, tmp, fs::copy_options::overwrite_existing);
    fs::rename(tmp, dest);
  }
  return hash;
}

std::string format_manifest(const ManifestRecords& records) {
  std::ostringstream out;
  out << "# vteam team manifest\n";
  out << "@policy = " << to_string(records.options.policy) << '\n';
  std::ostringstream th;
  th.precision(17);
  th << records.options.confidence_threshold;
  out << "@threshold = " << th.str() << '\n';
  out << "@priority = ";
  for (std::size_t i = 0; i < records.options.priority.size(); ++i)
    out << (i ? "," : "") << to_string(records.options.priority[i]);
  out << '\n';
  for (const GateDescriptor& g : records.gates)
    out << "@gate = " << to_string(g.attribute) << " | " << g.kind << " | " << g.ref << '\n';
  for (const ExpertDescriptor& e : records.experts) {
    out << e.expert_id << " | " << e.predicate.dimension() << " | " << e.predicate.to_string() << " | "
        << e.checkpoint_hash << " | " << e.embedding_dim << '\n';
  }
  return out.str();
}

ManifestRecords parse_manifest(const std::string& text) {
  ManifestRecords r;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "manifest line " + std::to_string(lineno) + ": ";
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    try {
      if (line[0] == '@') {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw RegistryError("expected '@key = value'");
        const std::string key = trim(line.substr(1, eq - 1));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "policy") {
          r.options.policy = parse_routing_policy(value);
        } else if (key == "threshold") {
          r.options.confidence_threshold = std::stod(value);
        } else if (key == "priority") {
          r.options.priority.clear();
          for (const std::string& a : split_fields(value, ',')) r.options.priority.push_back(parse_attribute(a));
        } else if (key == "gate") {
          const auto f = split_fields(value, '|');
          if (f.size() != 3) throw RegistryError("gate record needs 'attribute | kind | ref'");
          if (f[1] != "prototype" && f[1] != "constant" && f[1] != "label") {
            throw RegistryError("unknown gate kind '" + f[1] + "'");
          }
          r.gates.push_back({parse_attribute(f[0]), f[1], f[2]});
        } else {
          throw RegistryError("unknown directive '@" + key + "'");
        }
        continue;
      }
      const auto f = split_fields(line, '|');
      if (f.size() != 5) throw RegistryError("expected 'expert_id | dimension | predicate | checkpoint_hash | dim'");
      ExpertDescriptor e;
      e.expert_id = f[0];
      e.predicate = Predicate::parse(f[2]);
      if (f[1] != e.predicate.dimension()) {
        throw RegistryError("dimension '" + f[1] + "' does not match predicate " + e.predicate.to_string());
      }
      e.checkpoint_hash = f[3];
      e.embedding_dim = parse_int(f[4], "embedding dim");
      r.experts.push_back(std::move(e));
    } catch (const RegistryError& e) {
      throw RegistryError(where + e.what());
    } catch (const Error& e) {
      throw RegistryError(where + e.what());
    } catch (const std::logic_error&) {
      throw RegistryError(where + "cannot parse '" + line + "'");
    }
  }
  return r;
}

ManifestRecords manifest_of(const TeamRegistry& registry) {
  ManifestRecords r;
  r.options = registry.options();
  for (const auto& g : registry.gates()) {
    GateDescriptor d = g->descriptor();
    if (d.ref.empty()) throw RegistryError(to_string(d.attribute) + " gate has not been saved to a checkpoint");
    r.gates.push_back(std::move(d));
  }
  for (const Expert& e : registry.experts()) {
    if (e.descriptor.checkpoint_hash.empty()) {
      throw RegistryError("expert '" + e.descriptor.expert_id + "' has no checkpoint hash");
    }
    r.experts.push_back(e.descriptor);
  }
  return r;
}

void write_manifest(const fs::path& registry_dir, const ManifestRecords& records) {
  fs::create_directories(registry_dir);
  const fs::path path = registry_dir / "manifest.txt";
  const fs::path tmp = registry_dir / "manifest.txt.tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RegistryError("cannot write " + tmp.string());
    out << format_manifest(records);
    if (!out) throw RegistryError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

Expert load_expert(const fs::path& registry_dir, ExpertDescriptor descriptor) {
  const fs::path path = stored_checkpoint(registry_dir, descriptor.checkpoint_hash);
  if (!fs::exists(path)) {
    throw RegistryError("expert '" + descriptor.expert_id + "': checkpoint " + path.string() + " is missing");
  }
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.hash != descriptor.checkpoint_hash) {
    throw RegistryError("expert '" + descriptor.expert_id + "': stored checkpoint hash " + ck.hash +
                        " differs from manifest");
  }
  auto model = std::make_shared<const EmbeddingModel>(std::move(ck.model));
  return {std::move(descriptor), std::make_shared<ModelEmbedder>(std::move(model))};
}

TeamRegistry load_registry(const fs::path& registry_dir) {
  const fs::path path = registry_dir / "manifest.txt";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RegistryError("no registry manifest at " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  ManifestRecords records = parse_manifest(buf.str());

  std::vector<std::shared_ptr<const AttributePredictor>> gates;
  for (const GateDescriptor& g : records.gates) {
    if (g.kind == "label") {
      gates.push_back(std::make_shared<LabelGate>(g.attribute));
    } else if (g.kind == "constant") {
      gates.push_back(std::make_shared<ConstantGate>(g.attribute, parse_int(g.ref, "constant gate label")));
    } else {
      const fs::path gp = stored_checkpoint(registry_dir, g.ref);
      if (!fs::exists(gp)) throw RegistryError(to_string(g.attribute) + " gate checkpoint " + gp.string() + " is missing");
      auto gate = load_prototype_gate(gp);
      if (gate->attribute() != g.attribute) {
        throw RegistryError("gate checkpoint " + g.ref + " predicts " + to_string(gate->attribute()) + ", manifest says " +
                            to_string(g.attribute));
      }
      gates.push_back(std::move(gate));
    }
  }
  std::vector<Expert> experts;
  for (ExpertDescriptor& d : records.experts) experts.push_back(load_expert(registry_dir, std::move(d)));
  return TeamRegistry(std::move(experts), std::move(gates), records.options);
}

// ---------------------------------------------------------------------------
// Teamed retrieval

namespace {

std::string partition_key(const GateDecision& d) {
  std::string key;
  for (const std::string& id : d.selected) key += id + "|";
  return key;
}

}  // namespace

TeamedEmbeddings team_embed(const TeamRegistry& registry, std::span<const Sample* const> samples) {
  TeamedEmbeddings out;
  int dim = -1;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    GateDecision d = registry.route(*samples[i]);
    const EmbeddingVector e = registry.ensemble_embed(*samples[i], d);
    if (dim < 0) {
      dim = static_cast<int>(e.values.size());
      out.embeddings.resize(static_cast<Eigen::Index>(samples.size()), dim);
    } else if (e.values.size() != dim) {
      throw ShapeError("experts in one registry produce different embedding dims");
    }
    out.embeddings.row(static_cast<Eigen::Index>(i)) = e.values.transpose();
    int part = -1;
    if (d.selected.size() == 1) part = static_cast<int>(*registry.find(d.selected.front()));
    out.partition.push_back(part);
    out.decisions.push_back(std::move(d));
  }
  return out;
}

IdentifyResult team_identify(const TeamRegistry& registry, std::span<const Sample* const> queries,
                             std::span<const Sample* const> gallery, Protocol protocol, int max_rank) {
  IdentifyResult r;
  r.queries = team_embed(registry, queries);
  r.gallery = team_embed(registry, gallery);
  const Eigen::Index dim = r.queries.embeddings.cols() > 0 ? r.queries.embeddings.cols() : r.gallery.embeddings.cols();

  auto meta_of = [](const Sample* s) { return RetrievalMeta{s->identity_id, s->camera_id}; };
  std::map<std::string, std::vector<int>> gallery_parts;
  for (std::size_t j = 0; j < gallery.size(); ++j)
    gallery_parts[partition_key(r.gallery.decisions[j])].push_back(static_cast<int>(j));

  MapCmcResult& out = r.retrieval;
  out.cmc.assign(std::max(1, max_rank), 0.0);
  out.rankings.resize(queries.size());
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const RetrievalMeta qm = meta_of(queries[i]);
    int relevant_total = 0;
    for (const Sample* g : gallery) {
      const bool junk = protocol == Protocol::veri776 && g->identity_id == qm.identity && g->camera_id == qm.camera;
      if (!junk && g->identity_id == qm.identity) ++relevant_total;
    }
    const std::vector<int>& part = gallery_parts[partition_key(r.queries.decisions[i])];
    Eigen::MatrixXd g(static_cast<Eigen::Index>(part.size()), dim);
    std::vector<RetrievalMeta> gm;
    for (std::size_t k = 0; k < part.size(); ++k) {
      g.row(static_cast<Eigen::Index>(k)) = r.gallery.embeddings.row(part[k]);
      gm.push_back(meta_of(gallery[part[k]]));
    }
    const RetrievalMeta one_meta[] = {qm};
    MapCmcResult single = map_cmc(r.queries.embeddings.row(static_cast<Eigen::Index>(i)), g, one_meta, gm, protocol,
                                  max_rank);
    RankingResult ranking = std::move(single.rankings.front());
    ranking.query_index = static_cast<int>(i);
    for (int& j : ranking.gallery_order) j = part[j];

    if (relevant_total == 0) {
      ++out.queries_without_relevant;
    } else {
      // Relevant items routed elsewhere are never retrieved and count as misses.
      int seen = 0;
      int first_hit = -1;
      double precision_sum = 0.0;
      for (std::size_t pos = 0; pos < ranking.relevance.size(); ++pos) {
        if (!ranking.relevance[pos]) continue;
        ++seen;
        precision_sum += static_cast<double>(seen) / static_cast<double>(pos + 1);
        if (first_hit < 0) first_hit = static_cast<int>(pos);
      }
      const double ap = precision_sum / relevant_total;
      out.average_precision.push_back(ap);
      ap_sum += ap;
      ++out.valid_queries;
      if (first_hit >= 0)
        for (int k = first_hit; k < static_cast<int>(out.cmc.size()); ++k) out.cmc[k] += 1.0;
    }
    out.rankings[i] = std::move(ranking);
  }
  if (out.valid_queries > 0) {
    out.map_score = ap_sum / out.valid_queries;
    for (double& c : out.cmc) c /= out.valid_queries;
  }
  return r;
}

double teamed_recall_at_1(const TeamRegistry& registry, std::span<const Sample* const> samples) {
  if (samples.empty()) return 0.0;
  const TeamedEmbeddings t = team_embed(registry, samples);
  const Eigen::MatrixXd e = l2_normalize_rows(t.embeddings);
  std::vector<std::string> keys;
  for (const GateDecision& d : t.decisions) keys.push_back(partition_key(d));
  int hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    int best = -1;
    double best_d = 0.0;
    for (std::size_t j = 0; j < samples.size(); ++j) {
      if (j == i || keys[j] != keys[i]) continue;
      const double d = (e.row(static_cast<Eigen::Index>(i)) - e.row(static_cast<Eigen::Index>(j))).squaredNorm();
      if (best < 0 || d < best_d) {
        best = static_cast<int>(j);
        best_d = d;
      }
    }
    if (best >= 0 && samples[best]->identity_id == samples[i]->identity_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace vteam
