#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vteam/attention.hpp"
#include "vteam/layers.hpp"

namespace vteam {

struct Sample;

enum class CbamPlacement { none, all, first_block, last_block };

std::string to_string(CbamPlacement p);
CbamPlacement parse_cbam_placement(const std::string& s);

struct AttentionConfig {
  CbamPlacement cbam_placement = CbamPlacement::none;
  bool ga_enabled = false;
  int cbam_reduction = 16;
  int spatial_kernel = 7;
  /// Hidden width of the global attention convolutions; 0 means the stem width.
  int ga_width = 0;
  double leaky_slope = 0.01;

  /// Whether residual stage `stage` (1..4) carries CBAM under this placement.
  bool cbam_on_stage(int stage) const;
  bool operator==(const AttentionConfig&) const = default;
};

/// Everything needed to rebuild a network bit-for-bit.
struct ModelDescriptor {
  std::string backbone = "resnet18-like";
  AttentionConfig attention;
  int embedding_dim = 512;
  int base_width = 64;
  int input_size = 224;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on any inconsistency (including CBAM reduction
  /// ratios that do not divide a stage width).
  void validate() const;

  std::map<std::string, std::string> to_key_values() const;
  static ModelDescriptor from_key_values(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelDescriptor&) const = default;
};

/// A fixed-length identity feature.
struct EmbeddingVector {
  Eigen::VectorXd values;
  bool normalized = false;
};

/// Entry of the structural audit, in forward order.
struct LayerRecord {
  std::string name;
  std::string kind;  ///< conv, batchnorm, relu, maxpool, global_attention, cbam, residual, global_avg_pool
  std::size_t trainable_scalars = 0;
};

class BasicBlock {
 public:
  BasicBlock(const std::string& name, int in, int out, int stride, const AttentionConfig* cbam);

  Tensor apply(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  void collect(ParameterList& out);
  void collect(ConstParameterList& out) const;
  void audit(std::vector<LayerRecord>& out) const;

 private:
  std::string name_;
  Conv2d conv1_, conv2_;
  BatchNorm2d bn1_, bn2_;
  Relu relu1_, relu_out_;
  std::optional<Cbam> cbam_;
  std::optional<Conv2d> down_conv_;
  std::optional<BatchNorm2d> down_bn_;
};

/// ResNet-18-like embedding network with optional stem global attention and
/// per-stage CBAM. The head is global average pooling of the last
/// convolutional map (preceded by a 1x1 convolution only when the embedding
/// dimension differs from the final stage width).
class EmbeddingModel {
 public:
  explicit EmbeddingModel(const ModelDescriptor& descriptor);

  const ModelDescriptor& descriptor() const { return descriptor_; }

  /// Inference pass: raw (unnormalised) embeddings, one row per sample.
  Eigen::MatrixXd infer(const Tensor& batch) const;

  /// Training pass (batch statistics, caches activations).
  Eigen::MatrixXd forward(const Tensor& batch);
  /// Back-propagates dLoss/dEmbedding (one row per sample) into parameter gradients.
  void backward(const Eigen::MatrixXd& grad);

  ParameterList parameters();
  ConstParameterList parameters() const;
  void zero_grad();

  /// Exact count of trainable scalars, recomputed on every call.
  std::size_t parameter_count() const;
  std::vector<LayerRecord> audit() const;

  const GlobalAttention* global_attention() const { return ga_ ? &*ga_ : nullptr; }
  int feature_width() const { return 8 * descriptor_.base_width; }

 private:
  void check_input(const Tensor& batch) const;

  ModelDescriptor descriptor_;
  Conv2d stem_conv_;
  std::optional<GlobalAttention> ga_;
  BatchNorm2d stem_bn_;
  Relu stem_relu_;
  MaxPool2d stem_pool_{3, 2, 1};
  std::vector<BasicBlock> blocks_;
  std::optional<Conv2d> embed_conv_;
  GlobalAvgPool pool_;
};

EmbeddingModel build_model(const ModelDescriptor& descriptor);

/// Converts preprocessed images to a normalised NCHW batch. Throws ShapeError
/// if an image does not match `input_size`.
Tensor images_to_tensor(std::span<const Sample* const> samples, int input_size);

/// One embedding per sample, evaluated in inference mode in chunks.
std::vector<EmbeddingVector> embed(const EmbeddingModel& model, std::span<const Sample* const> samples,
                                   bool normalize);
/// Same as embed() but packed as an (N x D) matrix.
Eigen::MatrixXd embed_matrix(const EmbeddingModel& model, std::span<const Sample* const> samples,
                             bool normalize);

Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixXd& m);

}  // namespace vteam
