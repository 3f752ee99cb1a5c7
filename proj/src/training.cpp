#include "vteam/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "vteam/checkpoint.hpp"
#include "vteam/error.hpp"
#include "vteam/metrics.hpp"
#include "vteam/sampler.hpp"

namespace fs = std::filesystem;

namespace vteam {

std::string to_string(Recipe r) { return r == Recipe::brand_proxynca ? "brand_proxynca" : "reid_triplet"; }

Recipe parse_recipe(const std::string& s) {
  if (s == "brand_proxynca") return Recipe::brand_proxynca;
  if (s == "reid_triplet") return Recipe::reid_triplet;
  throw ConfigError("unknown recipe '" + s + "' (expected brand_proxynca or reid_triplet)");
}

Attribute TrainConfig::label_attribute() const {
  if (label) return *label;
  return recipe == Recipe::brand_proxynca ? Attribute::brand : Attribute::identity;
}

bool TrainConfig::erasing_enabled() const {
  return random_erasing.value_or(recipe == Recipe::reid_triplet);
}

bool TrainConfig::colour_augment_enabled() const {
  const Attribute a = label_attribute();
  return colour_augment.value_or(a == Attribute::brand || a == Attribute::type);
}

void TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (!(base_lr > 0.0)) errors.push_back("base_lr: must be positive");
  if (warmup_epochs < 0) errors.push_back("warmup_epochs: must be >= 0");
  if (total_epochs < 0) errors.push_back("total_epochs: must be >= 0");
  if (total_epochs > 0 && warmup_epochs >= total_epochs) errors.push_back("warmup_epochs: must be < total_epochs");
  for (std::size_t i = 0; i < decay_milestones.size(); ++i) {
    if (decay_milestones[i] <= warmup_epochs) {
      errors.push_back("decay_milestones: " + std::to_string(decay_milestones[i]) + " is not after warm-up");
    }
    if (i > 0 && decay_milestones[i] <= decay_milestones[i - 1]) {
      errors.push_back("decay_milestones: must be strictly increasing");
    }
  }
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) errors.push_back("decay_factor: must be in (0,1)");
  if (P < 1) errors.push_back("batch_pk: P must be >= 1");
  if (K < 1) errors.push_back("batch_pk: K must be >= 1");
  if (recipe == Recipe::reid_triplet && K < 2) errors.push_back("batch_pk: triplet mining needs K >= 2");
  if (recipe == Recipe::reid_triplet && P < 2) errors.push_back("batch_pk: triplet mining needs P >= 2");
  try {
    colour.validate();
  } catch (const ConfigError& e) {
    errors.push_back(std::string("colour: ") + e.what());
  }
  if (weight_decay < 0.0) errors.push_back("weight_decay: must be >= 0");
  if (steps_per_epoch < 0) errors.push_back("steps_per_epoch: must be >= 0");
  if (val_identities < 0) errors.push_back("val_identities: must be >= 0");
  try {
    erasing.validate();
  } catch (const ConfigError& e) {
    errors.push_back(std::string("erasing: ") + e.what());
  }
  if (!errors.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

TrainConfig TrainConfig::desk(Recipe recipe, std::uint64_t seed) {
  TrainConfig c;
  c.recipe = recipe;
  c.base_lr = 1e-3;
  c.warmup_epochs = 2;
  c.total_epochs = 20;
  c.decay_milestones = {12, 17};
  c.decay_factor = 0.1;
  c.steps_per_epoch = 8;
  c.seed = seed;
  if (recipe == Recipe::brand_proxynca) {
    c.P = 4;
    c.K = 8;
    c.decay_milestones.clear();
    c.colour.brightness = 0.3;
    c.colour.contrast = 0.3;
  } else {
    c.P = 3;
    c.K = 4;
  }
  return c;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string t; std::getline(ss, t, ',');) {
    std::size_t pos = 0;
    out.push_back(std::stod(t, &pos));
    while (pos < t.size() && std::isspace(static_cast<unsigned char>(t[pos]))) ++pos;
    if (pos != t.size()) throw std::invalid_argument(t);
  }
  return out;
}

int parse_int_strict(const std::string& s) {
  std::size_t pos = 0;
  const int v = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

double parse_double_strict(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument(s);
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_key_values() const {
  std::map<std::string, std::string> kv{
      {"recipe", to_string(recipe)},
      {"base_lr", fmt_double(base_lr)},
      {"warmup_epochs", std::to_string(warmup_epochs)},
      {"total_epochs", std::to_string(total_epochs)},
      {"decay_milestones", join_ints(decay_milestones)},
      {"decay_factor", fmt_double(decay_factor)},
      {"batch_pk", std::to_string(P) + "x" + std::to_string(K)},
      {"seed", std::to_string(seed)},
      {"label", to_string(label_attribute())},
      {"random_erasing", erasing_enabled() ? "true" : "false"},
      {"erasing.probability", fmt_double(erasing.probability)},
      {"erasing.area_range", fmt_double(erasing.area_range.first) + "," + fmt_double(erasing.area_range.second)},
      {"erasing.aspect_range",
       fmt_double(erasing.aspect_range.first) + "," + fmt_double(erasing.aspect_range.second)},
      {"colour_augment", colour_augment_enabled() ? "true" : "false"},
      {"colour.grey_probability", fmt_double(colour.grey_probability)},
      {"colour.brightness", fmt_double(colour.brightness)},
      {"colour.contrast", fmt_double(colour.contrast)},
      {"weight_decay", fmt_double(weight_decay)},
      {"steps_per_epoch", std::to_string(steps_per_epoch)},
      {"val_identities", std::to_string(val_identities)},
  };
  return kv;
}

TrainConfig TrainConfig::from_key_values(const std::map<std::string, std::string>& kv, TrainConfig c) {
  std::vector<std::string> errors;
  for (const auto& [key, value] : kv) {
    try {
      if (key == "recipe") {
        c.recipe = parse_recipe(value);
      } else if (key == "base_lr") {
        c.base_lr = parse_double_strict(value);
      } else if (key == "warmup_epochs") {
        c.warmup_epochs = parse_int_strict(value);
      } else if (key == "total_epochs") {
        c.total_epochs = parse_int_strict(value);
      } else if (key == "decay_milestones") {
        c.decay_milestones.clear();
        for (double d : value.empty() ? std::vector<double>{} : parse_doubles(value)) {
          if (d != std::floor(d)) throw std::invalid_argument(value);
          c.decay_milestones.push_back(static_cast<int>(d));
        }
      } else if (key == "decay_factor") {
        c.decay_factor = parse_double_strict(value);
      } else if (key == "batch_pk") {
        const auto x = value.find('x');
        if (x == std::string::npos) throw std::invalid_argument(value);
        c.P = parse_int_strict(value.substr(0, x));
        c.K = parse_int_strict(value.substr(x + 1));
      } else if (key == "seed") {
        std::size_t pos = 0;
        c.seed = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
      } else if (key == "label") {
        c.label = parse_attribute(value);
      } else if (key == "random_erasing") {
        c.random_erasing = parse_bool(value);
      } else if (key == "erasing.probability") {
        c.erasing.probability = parse_double_strict(value);
      } else if (key == "erasing.area_range" || key == "erasing.aspect_range") {
        const auto v = parse_doubles(value);
        if (v.size() != 2) throw std::invalid_argument(value);
        (key == "erasing.area_range" ? c.erasing.area_range : c.erasing.aspect_range) = {v[0], v[1]};
      } else if (key == "colour_augment") {
        c.colour_augment = parse_bool(value);
      } else if (key == "colour.grey_probability") {
        c.colour.grey_probability = parse_double_strict(value);
      } else if (key == "colour.brightness") {
        c.colour.brightness = parse_double_strict(value);
      } else if (key == "colour.contrast") {
        c.colour.contrast = parse_double_strict(value);
      } else if (key == "weight_decay") {
        c.weight_decay = parse_double_strict(value);
      } else if (key == "steps_per_epoch") {
        c.steps_per_epoch = parse_int_strict(value);
      } else if (key == "val_identities") {
        c.val_identities = parse_int_strict(value);
      } else {
        errors.push_back(key + ": unknown key");
      }
    } catch (const ConfigError& e) {
      errors.push_back(key + ": " + e.what());
    } catch (const std::logic_error&) {
      errors.push_back(key + ": cannot parse '" + value + "'");
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_key_values(const std::map<std::string, std::string>& kv) {
  return from_key_values(kv, TrainConfig{});
}

double lr_at(const TrainConfig& config, int epoch) {
  if (epoch < 0 || epoch >= config.total_epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.total_epochs) + ")");
  }
  if (epoch < config.warmup_epochs) {
    const double start = config.base_lr / 10.0;
    return start + (config.base_lr - start) * static_cast<double>(epoch) / config.warmup_epochs;
  }
  double lr = config.base_lr;
  for (int m : config.decay_milestones)
    if (epoch >= m) lr *= config.decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// TrainState

std::string TrainState::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["current_lr"] = current_lr;
  j["best_metric"] = best_metric;
  j["checkpoint_refs"] = checkpoint_refs;
  std::vector<std::string> paths;
  for (const auto& p : checkpoint_paths) paths.push_back(p.string());
  j["checkpoint_paths"] = paths;
  auto hist = nlohmann::ordered_json::array();
  for (const LossRecord& r : loss_history) hist.push_back({{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}});
  j["loss_history"] = hist;
  return j.dump(2);
}

void TrainState::write_loss_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "step,loss,lr\n";
  for (const LossRecord& r : loss_history) out << r.step << ',' << r.loss << ',' << r.lr << '\n';
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(const ParameterList& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    auto [it, inserted] = moments_.try_emplace(p->name);
    if (inserted) {
      it->second.first = Tensor(p->value.n(), p->value.c(), p->value.h(), p->value.w());
      it->second.second = Tensor(p->value.n(), p->value.c(), p->value.h(), p->value.w());
    }
    double* m = it->second.first.data();
    double* v = it->second.second.data();
    double* w = p->value.data();
    const double* g = p->grad.data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = g[i] + weight_decay_ * w[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<int> labels_of(const std::vector<const Sample*>& samples, Attribute a) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const Sample* s : samples) out.push_back(*s->attribute(a));
  return out;
}

void preflight(const DatasetView& dataset, const TrainConfig& config) {
  const Attribute label = config.label_attribute();
  const auto train = dataset.split(Split::train);
  if (train.empty()) throw ConfigError("training needs a non-empty train split");
  std::map<int, int> counts;
  for (const Sample* s : train) {
    const auto v = s->attribute(label);
    if (!v) {
      throw ConfigError("recipe " + to_string(config.recipe) + " needs " + to_string(label) +
                        " labels on every train sample (missing on " + s->source + ")");
    }
    ++counts[*v];
  }
  if (counts.size() < 2) {
    throw ConfigError("recipe " + to_string(config.recipe) + " needs at least two " + to_string(label) + " classes");
  }
  if (config.recipe == Recipe::reid_triplet) {
    const bool any_pair = std::any_of(counts.begin(), counts.end(), [](const auto& kv) { return kv.second >= 2; });
    if (!any_pair) {
      throw ConfigError("recipe reid_triplet needs identity labels shared by at least two images; every train image has a distinct identity");
    }
  }
  const int classes_after_holdout =
      static_cast<int>(counts.size()) - (label == Attribute::identity ? config.val_identities : 0);
  if (config.P > classes_after_holdout) {
    throw ConfigError("batch_pk: P=" + std::to_string(config.P) + " exceeds the " +
                      std::to_string(classes_after_holdout) + " trainable " + to_string(label) + " classes");
  }
}

double validation_metric(const EmbeddingModel& model, const std::vector<const Sample*>& val, const TrainConfig& config) {
  const Eigen::MatrixXd e = embed_matrix(model, val, true);
  if (config.recipe == Recipe::brand_proxynca) {
    const std::vector<int> labels = labels_of(val, config.label_attribute());
    const int k1[] = {1};
    return recall_at_k(e, labels, k1).at(1);
  }
  // mAP with the first image of every identity as query.
  std::set<int> seen;
  std::vector<Eigen::Index> qi, gi;
  std::vector<RetrievalMeta> qm, gm;
  bool cameras = true;
  for (std::size_t i = 0; i < val.size(); ++i) {
    cameras = cameras && val[i]->camera_id.has_value();
    if (seen.insert(val[i]->identity_id).second) {
      qi.push_back(static_cast<Eigen::Index>(i));
      qm.push_back({val[i]->identity_id, val[i]->camera_id});
    } else {
      gi.push_back(static_cast<Eigen::Index>(i));
      gm.push_back({val[i]->identity_id, val[i]->camera_id});
    }
  }
  Eigen::MatrixXd q(qi.size(), e.cols()), g(gi.size(), e.cols());
  for (std::size_t i = 0; i < qi.size(); ++i) q.row(i) = e.row(qi[i]);
  for (std::size_t i = 0; i < gi.size(); ++i) g.row(i) = e.row(gi[i]);
  return map_cmc(q, g, qm, gm, cameras ? Protocol::veri776 : Protocol::cars196_zsl).map_score;
}

}  // namespace

TrainResult train(const DatasetView& dataset, const ModelDescriptor& model_descriptor, const LossConfig& loss_config,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  preflight(dataset, config);
  const Attribute label = config.label_attribute();

  TrainResult result{EmbeddingModel(model_descriptor), TrainState{}, ProxyBank{}};
  if (config.total_epochs == 0) return result;

  // Hold out the highest train identities for validation.
  const int train_ids = dataset.num_identities(Split::train);
  const int first_val = train_ids - config.val_identities;
  if (config.val_identities > 0 && first_val < 2) throw ConfigError("val_identities leaves fewer than two train identities");
  std::vector<Sample> fit_samples;
  std::vector<const Sample*> val;
  for (const Sample& s : dataset.samples()) {
    if (s.split != Split::train) continue;
    if (s.identity_id >= first_val) {
      val.push_back(&s);
    } else {
      fit_samples.push_back(s);
    }
  }
  const DatasetView fit(std::move(fit_samples), dataset.identity_names(), dataset.attribute_names());

  LossConfig lc = loss_config;
  ParameterList params = result.model.parameters();
  Parameter proxy_param;
  if (config.recipe == Recipe::brand_proxynca) {
    int classes = 0;
    for (const Sample& s : dataset.samples())
      if (auto v = s.attribute(label); v && s.split == Split::train) classes = std::max(classes, *v + 1);
    if (lc.num_proxies == 0) lc.num_proxies = classes;
    if (lc.num_proxies != classes) {
      throw ConfigError("num_proxies=" + std::to_string(lc.num_proxies) + " but the data has " +
                        std::to_string(classes) + " " + to_string(label) + " classes");
    }
    result.proxies = ProxyBank::random(lc.num_proxies, model_descriptor.embedding_dim, config.seed ^ 0x5eedULL);
    proxy_param = Parameter("proxies", lc.num_proxies, model_descriptor.embedding_dim, 1, 1);
    for (int i = 0; i < lc.num_proxies; ++i)
      for (int d = 0; d < model_descriptor.embedding_dim; ++d)
        proxy_param.value.at(i, d, 0, 0) = result.proxies.proxies(i, d);
    params.push_back(&proxy_param);
  }
  auto sync_proxies = [&]() {
    for (int i = 0; i < lc.num_proxies; ++i)
      for (int d = 0; d < model_descriptor.embedding_dim; ++d)
        result.proxies.proxies(i, d) = proxy_param.value.at(i, d, 0, 0);
  };
  Adam adam(0.9, 0.999, 1e-8, config.weight_decay);
  std::mt19937_64 rng(config.seed);
  const int batch = config.P * config.K;
  const int steps = config.steps_per_epoch > 0
                        ? config.steps_per_epoch
                        : std::max<int>(1, static_cast<int>((fit.split(Split::train).size() + batch - 1) / batch));
  const std::set<int> milestones(config.decay_milestones.begin(), config.decay_milestones.end());
  TrainState& state = result.state;
  state.best_metric = -std::numeric_limits<double>::infinity();

  auto write_checkpoint = [&](const std::string& tag) {
    if (!options.checkpoint_dir) return;
    const fs::path path = *options.checkpoint_dir / (tag + ".vtc");
    std::map<std::string, std::string> meta{{"recipe", to_string(config.recipe)},
                                            {"label", to_string(label)},
                                            {"epoch", std::to_string(state.epoch)},
                                            {"tag", tag}};
    std::map<std::string, Tensor> extras;
    if (config.recipe == Recipe::brand_proxynca) {
      // Proxies double as gate prototypes.
      meta["gate.attribute"] = to_string(label);
      meta["gate.scale"] = fmt_double(lc.proxy_scale);
      extras["prototypes"] = proxy_param.value;
    }
    const std::string hash = save_checkpoint(result.model, path, meta, extras);
    state.checkpoint_refs.push_back(hash);
    state.checkpoint_paths.push_back(path);
  };

  for (int epoch = 0; epoch < config.total_epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = lr_at(config, epoch);
    state.current_lr = lr;
    double epoch_loss = 0.0;
    for (int s = 0; s < steps; ++s) {
      const TripletBatch tb = sample_pk_batch(fit, config.P, config.K, rng, label);
      std::vector<Sample> augmented;
      std::vector<const Sample*> ptrs;
      if (config.erasing_enabled() || config.colour_augment_enabled()) {
        augmented.reserve(tb.samples.size());
        for (std::size_t i : tb.samples) {
          Sample a = fit.samples()[i];
          if (config.colour_augment_enabled()) a = colour_augment(a, config.colour, rng);
          if (config.erasing_enabled()) a = random_erase(a, config.erasing, rng);
          augmented.push_back(std::move(a));
        }
        for (const Sample& a : augmented) ptrs.push_back(&a);
      } else {
        for (std::size_t i : tb.samples) ptrs.push_back(&fit.samples()[i]);
      }
      const Tensor x = images_to_tensor(ptrs, model_descriptor.input_size);
      result.model.zero_grad();
      const Eigen::MatrixXd emb = result.model.forward(x);
      LossResult loss;
      if (config.recipe == Recipe::brand_proxynca) {
        loss = proxy_nca_loss(emb, tb.labels, result.proxies, lc);
      } else {
        loss = triplet_loss(emb, tb.labels, lc);
      }
      if (!std::isfinite(loss.value) || !loss.grad_embeddings.allFinite()) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(state.step) + " (lr " + fmt_double(lr) + ", max |embedding| " +
                            fmt_double(emb.cwiseAbs().maxCoeff()) + ")");
      }
      result.model.backward(loss.grad_embeddings);
      if (config.recipe == Recipe::brand_proxynca) {
        for (int i = 0; i < lc.num_proxies; ++i)
          for (int d = 0; d < model_descriptor.embedding_dim; ++d)
            proxy_param.grad.at(i, d, 0, 0) = loss.grad_proxies(i, d);
      }
      adam.step(params, lr);
      if (config.recipe == Recipe::brand_proxynca) sync_proxies();
      state.loss_history.push_back({state.step, loss.value, lr});
      ++state.step;
      epoch_loss += loss.value;
    }
    epoch_loss /= steps;
    if (options.verbose) std::cerr << "epoch " << epoch << " lr " << lr << " loss " << epoch_loss << "\n";

    const double metric = val.empty() ? -epoch_loss : validation_metric(result.model, val, config);
    if (metric > state.best_metric) {
      state.best_metric = metric;
      write_checkpoint("best");
    }
    if (milestones.count(epoch + 1)) write_checkpoint("milestone_" + std::to_string(epoch + 1));
  }
  write_checkpoint("final");
  return result;
}

double nearest_proxy_accuracy(const EmbeddingModel& model, const ProxyBank& proxies, const DatasetView& dataset,
                              Attribute label) {
  const auto train = dataset.split(Split::train);
  if (train.empty()) return 0.0;
  const std::vector<int> pred = nearest_proxy(embed_matrix(model, train, false), proxies);
  int hits = 0;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train[i]->attribute(label) == pred[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(train.size());
}

std::map<std::string, std::string> read_key_value_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace vteam
