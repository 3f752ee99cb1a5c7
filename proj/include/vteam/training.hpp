#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vteam/augment.hpp"
#include "vteam/dataset.hpp"
#include "vteam/losses.hpp"
#include "vteam/model.hpp"

namespace vteam {

enum class Recipe { brand_proxynca, reid_triplet };
std::string to_string(Recipe r);
Recipe parse_recipe(const std::string& s);

struct TrainConfig {
  Recipe recipe = Recipe::reid_triplet;
  double base_lr = 3.5e-4;
  int warmup_epochs = 10;
  int total_epochs = 120;
  std::vector<int> decay_milestones{40, 70, 100};
  double decay_factor = 0.1;
  int P = 8;
  int K = 4;
  std::uint64_t seed = 0;

  /// Class label the recipe learns: brand for brand_proxynca, identity for
  /// reid_triplet unless overridden (ProxyNCA on Cars196 classes uses identity).
  std::optional<Attribute> label;
  /// Random erasing; enabled by default for reid_triplet only.
  std::optional<bool> random_erasing;
  ErasingParams erasing;
  /// Colour augmentation so paint colour cannot stand in for the label; on by
  /// default when learning brand or type.
  std::optional<bool> colour_augment;
  ColourParams colour;
  double weight_decay = 0.0;
  /// 0 derives ceil(train samples / (P*K)).
  int steps_per_epoch = 0;
  /// Train identities (highest ids) held out for choosing the best checkpoint.
  int val_identities = 0;

  Attribute label_attribute() const;
  bool erasing_enabled() const;
  bool colour_augment_enabled() const;

  /// Throws ConfigError listing every violated field.
  void validate() const;

  /// Short CPU schedule (20 epochs) used for synthetic desk-scale runs.
  static TrainConfig desk(Recipe recipe, std::uint64_t seed);

  std::map<std::string, std::string> to_key_values() const;
  /// Applies recognised keys over `base`; unknown keys and bad values are
  /// collected and reported together.
  static TrainConfig from_key_values(const std::map<std::string, std::string>& kv, TrainConfig base);
  static TrainConfig from_key_values(const std::map<std::string, std::string>& kv);
};

/// Linear warm-up from base_lr/10 to base_lr over warmup_epochs, then base_lr
/// times decay_factor^(milestones passed).
double lr_at(const TrainConfig& config, int epoch);

struct LossRecord {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainState {
  int epoch = 0;
  int step = 0;
  double current_lr = 0.0;
  std::vector<LossRecord> loss_history;
  double best_metric = 0.0;
  std::vector<std::string> checkpoint_refs;
  std::vector<std::filesystem::path> checkpoint_paths;

  std::string to_json() const;
  void write_loss_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  EmbeddingModel model;
  TrainState state;
  ProxyBank proxies;  ///< empty unless the recipe is brand_proxynca
};

struct TrainOptions {
  /// Checkpoints (milestones, best, final) go here when set.
  std::optional<std::filesystem::path> checkpoint_dir;
  bool verbose = false;
};

/// Adaptive moment estimation over a parameter list.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  void step(const ParameterList& params, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

/// Trains an embedding model with the configured recipe. Label requirements
/// are checked before the first step; any non-finite loss aborts with a
/// TrainingError.
TrainResult train(const DatasetView& dataset, const ModelDescriptor& model_descriptor, const LossConfig& loss_config,
                  const TrainConfig& train_config, const TrainOptions& options = {});

/// Fraction of train samples whose nearest proxy is their own class.
double nearest_proxy_accuracy(const EmbeddingModel& model, const ProxyBank& proxies, const DatasetView& dataset,
                              Attribute label);

/// Reads `key = value` lines ('#' comments allowed).
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

}  // namespace vteam
