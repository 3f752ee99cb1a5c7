#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vteam/dataset.hpp"
#include "vteam/losses.hpp"
#include "vteam/metrics.hpp"
#include "vteam/model.hpp"
#include "vteam/training.hpp"

namespace vteam {

/// Subspace of an expert: `brand=3` (also `brand_id=3`) or `*` for every input.
struct Predicate {
  std::optional<Attribute> attribute;  ///< empty for the universal predicate
  int value = 0;

  bool universal() const { return !attribute.has_value(); }
  /// Team dimension name: the attribute, or "default" for the universal predicate.
  std::string dimension() const;
  std::string to_string() const;
  bool overlaps(const Predicate& other) const;

  static Predicate parse(const std::string& text);
  bool operator==(const Predicate&) const = default;
};

struct ExpertDescriptor {
  std::string expert_id;
  Predicate predicate;
  std::string checkpoint_hash;
  int embedding_dim = 0;
};

/// Something that maps samples to L2-normalised embeddings. Every sample
/// passed in counts as one forward pass.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int embedding_dim() const = 0;
  Eigen::MatrixXd embed(std::span<const Sample* const> samples) const;
  long forward_count() const { return forward_count_.load(); }
  void reset_forward_count() const { forward_count_.store(0); }

 protected:
  virtual Eigen::MatrixXd do_embed(std::span<const Sample* const> samples) const = 0;

 private:
  mutable std::atomic<long> forward_count_{0};
};

class ModelEmbedder final : public Embedder {
 public:
  explicit ModelEmbedder(std::shared_ptr<const EmbeddingModel> model) : model_(std::move(model)) {}
  int embedding_dim() const override { return model_->descriptor().embedding_dim; }
  const EmbeddingModel& model() const { return *model_; }

 private:
  Eigen::MatrixXd do_embed(std::span<const Sample* const> samples) const override;
  std::shared_ptr<const EmbeddingModel> model_;
};

struct AttributePrediction {
  int label = 0;
  double confidence = 1.0;
};

/// How a gate is persisted in a manifest: kind is `prototype` (ref = checkpoint
/// hash), `constant` (ref = the label) or `label` (reads ground truth; ref "-").
struct GateDescriptor {
  Attribute attribute = Attribute::brand;
  std::string kind;
  std::string ref;
};

class AttributePredictor {
 public:
  virtual ~AttributePredictor() = default;
  virtual Attribute attribute() const = 0;
  virtual AttributePrediction predict(const Sample& sample) const = 0;
  virtual GateDescriptor descriptor() const = 0;
};

/// Embedding model plus one prototype per class; predicts the nearest
/// prototype. Confidence is the softmax of -scale * squared distance.
class PrototypeGate final : public AttributePredictor {
 public:
  PrototypeGate(Attribute attribute, std::shared_ptr<const EmbeddingModel> model, Eigen::MatrixXd prototypes,
                double scale = 3.0, std::string checkpoint_hash = {});
  Attribute attribute() const override { return attribute_; }
  AttributePrediction predict(const Sample& sample) const override;
  GateDescriptor descriptor() const override { return {attribute_, "prototype", hash_}; }
  const EmbeddingModel& model() const { return *model_; }
  const Eigen::MatrixXd& prototypes() const { return prototypes_; }
  double scale() const { return scale_; }

 private:
  Attribute attribute_;
  std::shared_ptr<const EmbeddingModel> model_;
  Eigen::MatrixXd prototypes_;  ///< L2-normalised rows
  double scale_;
  std::string hash_;
};

class ConstantGate final : public AttributePredictor {
 public:
  ConstantGate(Attribute attribute, int label) : attribute_(attribute), label_(label) {}
  Attribute attribute() const override { return attribute_; }
  AttributePrediction predict(const Sample&) const override { return {label_, 1.0}; }
  GateDescriptor descriptor() const override { return {attribute_, "constant", std::to_string(label_)}; }

 private:
  Attribute attribute_;
  int label_;
};

/// Reads the ground-truth label; for oracle routing in experiments.
class LabelGate final : public AttributePredictor {
 public:
  explicit LabelGate(Attribute attribute) : attribute_(attribute) {}
  Attribute attribute() const override { return attribute_; }
  AttributePrediction predict(const Sample& sample) const override;
  GateDescriptor descriptor() const override { return {attribute_, "label", "-"}; }

 private:
  Attribute attribute_;
};

struct GateEvidence {
  Attribute attribute = Attribute::brand;
  int label = 0;
  double confidence = 0.0;
};

struct GateDecision {
  std::vector<double> weights;        ///< one per registered expert, registry order
  std::vector<std::string> selected;  ///< ids with nonzero weight
  std::vector<GateEvidence> evidence;
  bool fell_back = false;             ///< routed to the default expert
};

enum class RoutingPolicy { single_best, per_dimension };
std::string to_string(RoutingPolicy p);
RoutingPolicy parse_routing_policy(const std::string& s);

struct Expert {
  ExpertDescriptor descriptor;
  std::shared_ptr<const Embedder> embedder;
};

struct TeamOptions {
  RoutingPolicy policy = RoutingPolicy::single_best;
  /// Gate predictions below this confidence do not select an expert.
  double confidence_threshold = 0.0;
  std::vector<Attribute> priority{Attribute::brand, Attribute::color, Attribute::type};
};

/// Immutable snapshot of experts and gates. Routing and embedding are const
/// and may run concurrently; add_expert returns a new snapshot.
class TeamRegistry {
 public:
  /// Validates: unique ids, exactly one universal (default) expert, disjoint
  /// predicates within a dimension, a gate for every predicate attribute.
  TeamRegistry(std::vector<Expert> experts, std::vector<std::shared_ptr<const AttributePredictor>> gates,
               TeamOptions options = {});

  const std::vector<Expert>& experts() const { return experts_; }
  const std::vector<std::shared_ptr<const AttributePredictor>>& gates() const { return gates_; }
  const TeamOptions& options() const { return options_; }
  std::size_t default_index() const { return default_index_; }
  std::optional<std::size_t> find(const std::string& expert_id) const;

  GateDecision route(const Sample& sample) const;
  /// Weighted sum over the selected experts only.
  EmbeddingVector ensemble_embed(const Sample& sample, const GateDecision& decision) const;

  TeamRegistry add_expert(Expert expert) const;

 private:
  std::vector<Expert> experts_;
  std::vector<std::shared_ptr<const AttributePredictor>> gates_;
  TeamOptions options_;
  std::size_t default_index_ = 0;
};

/// Trains a gate for `attribute` with the ProxyNCA recipe and keeps the learned
/// proxies as prototypes. A train split with a single class yields a ConstantGate.
std::shared_ptr<const AttributePredictor> train_gate(const DatasetView& dataset, Attribute attribute,
                                                     const ModelDescriptor& descriptor, TrainConfig config,
                                                     const LossConfig& loss = {}, const TrainOptions& options = {});

/// Fraction of samples whose predicted attribute equals the ground truth.
double gate_accuracy(const AttributePredictor& gate, std::span<const Sample* const> samples);

/// Stores the gate model with its prototypes; returns the checkpoint hash.
std::string save_prototype_gate(const PrototypeGate& gate, const std::filesystem::path& path);
std::shared_ptr<const PrototypeGate> load_prototype_gate(const std::filesystem::path& path);

// --- Persistence ----------------------------------------------------------
//
// A registry directory holds `manifest.txt` and content-addressed checkpoints
// under `checkpoints/<hash>.vtc`. Manifest lines:
//
//     @policy = single_best
//     @threshold = 0
//     @priority = brand,color,type
//     @gate = brand | prototype | <hash>
//     <expert_id> | <dimension> | <predicate> | <checkpoint_hash> | <dim>

/// Copies a checkpoint into the registry store and returns its hash.
std::string import_checkpoint(const std::filesystem::path& registry_dir, const std::filesystem::path& checkpoint);
std::filesystem::path stored_checkpoint(const std::filesystem::path& registry_dir, const std::string& hash);

struct ManifestRecords {
  TeamOptions options;
  std::vector<GateDescriptor> gates;
  std::vector<ExpertDescriptor> experts;
};

std::string format_manifest(const ManifestRecords& records);
ManifestRecords parse_manifest(const std::string& text);
ManifestRecords manifest_of(const TeamRegistry& registry);

/// Writes manifest.txt atomically.
void write_manifest(const std::filesystem::path& registry_dir, const ManifestRecords& records);
/// Loads every referenced checkpoint (hash-verified) and validates the registry.
TeamRegistry load_registry(const std::filesystem::path& registry_dir);
/// Expert backed by a stored checkpoint.
Expert load_expert(const std::filesystem::path& registry_dir, ExpertDescriptor descriptor);

// --- Teamed retrieval -----------------------------------------------------

struct TeamedEmbeddings {
  std::vector<GateDecision> decisions;
  Eigen::MatrixXd embeddings;  ///< one row per sample
  std::vector<int> partition;  ///< index of the single selected expert, -1 when several
};

TeamedEmbeddings team_embed(const TeamRegistry& registry, std::span<const Sample* const> samples);

/// Queries are ranked only against gallery items routed to the same expert.
/// Rankings carry global gallery indices; per-query entries are in query order.
struct IdentifyResult {
  TeamedEmbeddings queries;
  TeamedEmbeddings gallery;
  MapCmcResult retrieval;
};

IdentifyResult team_identify(const TeamRegistry& registry, std::span<const Sample* const> queries,
                             std::span<const Sample* const> gallery, Protocol protocol, int max_rank = 50);

/// Leave-one-out Recall@1 where each sample searches only samples routed to
/// the same expert.
double teamed_recall_at_1(const TeamRegistry& registry, std::span<const Sample* const> samples);

}  // namespace vteam
