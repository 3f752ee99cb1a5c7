#include "vteam/model.hpp"

#include <random>

#include "vteam/dataset.hpp"
#include "vteam/error.hpp"

namespace vteam {

std::string to_string(CbamPlacement p) {
  switch (p) {
    case CbamPlacement::none: return "none";
    case CbamPlacement::all: return "all";
    case CbamPlacement::first_block: return "first_block";
    case CbamPlacement::last_block: return "last_block";
  }
  return "?";
}

CbamPlacement parse_cbam_placement(const std::string& s) {
  if (s == "none") return CbamPlacement::none;
  if (s == "all") return CbamPlacement::all;
  if (s == "first_block" || s == "cbam-1") return CbamPlacement::first_block;
  if (s == "last_block" || s == "cbam-4") return CbamPlacement::last_block;
  throw ConfigError("unknown cbam placement '" + s + "'");
}

bool AttentionConfig::cbam_on_stage(int stage) const {
  switch (cbam_placement) {
    case CbamPlacement::none: return false;
    case CbamPlacement::all: return true;
    case CbamPlacement::first_block: return stage == 1;
    case CbamPlacement::last_block: return stage == 4;
  }
  return false;
}

void ModelDescriptor::validate() const {
  if (backbone != "resnet18-like") throw ConfigError("unsupported backbone '" + backbone + "'");
  if (base_width <= 0) throw ConfigError("base_width must be positive");
  if (embedding_dim <= 0) throw ConfigError("embedding_dim must be positive");
  if (input_size < 32) throw ConfigError("input_size must be at least 32");
  if (attention.ga_width < 0) throw ConfigError("ga_width must be >= 0");
  if (attention.cbam_placement != CbamPlacement::none) {
    for (int stage = 1; stage <= 4; ++stage) {
      const int width = base_width << (stage - 1);
      if (attention.cbam_on_stage(stage) &&
          (attention.cbam_reduction <= 0 || width % attention.cbam_reduction != 0)) {
        throw ConfigError("cbam reduction " + std::to_string(attention.cbam_reduction) +
                          " does not divide stage " + std::to_string(stage) + " width " +
                          std::to_string(width));
      }
    }
    if (attention.spatial_kernel <= 0 || attention.spatial_kernel % 2 == 0) {
      throw ConfigError("cbam spatial kernel must be odd and positive");
    }
  }
}

std::map<std::string, std::string> ModelDescriptor::to_key_values() const {
  std::ostringstream slope;
  slope.precision(17);
  slope << attention.leaky_slope;
  return {
      {"backbone", backbone},
      {"attention.cbam_placement", to_string(attention.cbam_placement)},
      {"attention.ga_enabled", attention.ga_enabled ? "true" : "false"},
      {"attention.cbam_reduction", std::to_string(attention.cbam_reduction)},
      {"attention.spatial_kernel", std::to_string(attention.spatial_kernel)},
      {"attention.ga_width", std::to_string(attention.ga_width)},
      {"attention.leaky_slope", slope.str()},
      {"embedding_dim", std::to_string(embedding_dim)},
      {"base_width", std::to_string(base_width)},
      {"input_size", std::to_string(input_size)},
      {"init_seed", std::to_string(init_seed)},
  };
}

ModelDescriptor ModelDescriptor::from_key_values(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("model descriptor lacks key '" + key + "'");
    return it->second;
  };
  auto get_bool = [&](const std::string& key) {
    const std::string& v = get(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("descriptor key '" + key + "' must be true or false");
  };
  ModelDescriptor d;
  try {
    d.backbone = get("backbone");
    d.attention.cbam_placement = parse_cbam_placement(get("attention.cbam_placement"));
    d.attention.ga_enabled = get_bool("attention.ga_enabled");
    d.attention.cbam_reduction = std::stoi(get("attention.cbam_reduction"));
    d.attention.spatial_kernel = std::stoi(get("attention.spatial_kernel"));
    d.attention.ga_width = std::stoi(get("attention.ga_width"));
    d.attention.leaky_slope = std::stod(get("attention.leaky_slope"));
    d.embedding_dim = std::stoi(get("embedding_dim"));
    d.base_width = std::stoi(get("base_width"));
    d.input_size = std::stoi(get("input_size"));
    d.init_seed = std::stoull(get("init_seed"));
  } catch (const std::logic_error& e) {
    throw ConfigError(std::string("malformed model descriptor value: ") + e.what());
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// BasicBlock

BasicBlock::BasicBlock(const std::string& name, int in, int out, int stride, const AttentionConfig* cbam)
    : name_(name),
      conv1_(name + ".conv1", in, out, 3, stride, 1, false),
      conv2_(name + ".conv2", out, out, 3, 1, 1, false),
      bn1_(name + ".bn1", out),
      bn2_(name + ".bn2", out) {
  if (cbam) cbam_.emplace(name + ".cbam", out, cbam->cbam_reduction, cbam->spatial_kernel);
  if (stride != 1 || in != out) {
    down_conv_.emplace(name + ".downsample.0", in, out, 1, stride, 0, false);
    down_bn_.emplace(name + ".downsample.1", out);
  }
}

Tensor BasicBlock::apply(const Tensor& x) const {
  Tensor y = bn2_.apply(conv2_.apply(Relu::apply(bn1_.apply(conv1_.apply(x)))));
  if (cbam_) y = cbam_->apply(y);
  y += down_conv_ ? down_bn_->apply(down_conv_->apply(x)) : x;
  return Relu::apply(y);
}

Tensor BasicBlock::forward(const Tensor& x) {
  Tensor y = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x)))));
  if (cbam_) y = cbam_->forward(y);
  y += down_conv_ ? down_bn_->forward(down_conv_->forward(x)) : x;
  return relu_out_.forward(y);
}

Tensor BasicBlock::backward(const Tensor& dy) {
  const Tensor dsum = relu_out_.backward(dy);
  Tensor dbranch = cbam_ ? cbam_->backward(dsum) : dsum;
  Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dbranch)))));
  dx += down_conv_ ? down_conv_->backward(down_bn_->backward(dsum)) : dsum;
  return dx;
}

void BasicBlock::collect(ParameterList& out) {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  if (cbam_) cbam_->collect(out);
  if (down_conv_) {
    down_conv_->collect(out);
    down_bn_->collect(out);
  }
}

void BasicBlock::collect(ConstParameterList& out) const {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  if (cbam_) cbam_->collect(out);
  if (down_conv_) {
    down_conv_->collect(out);
    down_bn_->collect(out);
  }
}

namespace {

std::size_t trainable_scalars(const ConstParameterList& params) {
  std::size_t n = 0;
  for (const Parameter* p : params)
    if (p->trainable) n += p->value.size();
  return n;
}

template <class Layer>
LayerRecord record(const std::string& name, const std::string& kind, const Layer& layer) {
  ConstParameterList params;
  layer.collect(params);
  return {name, kind, trainable_scalars(params)};
}

}  // namespace

void BasicBlock::audit(std::vector<LayerRecord>& out) const {
  out.push_back(record(name_ + ".conv1", "conv", conv1_));
  out.push_back(record(name_ + ".bn1", "batchnorm", bn1_));
  out.push_back({name_ + ".relu1", "relu", 0});
  out.push_back(record(name_ + ".conv2", "conv", conv2_));
  out.push_back(record(name_ + ".bn2", "batchnorm", bn2_));
  if (cbam_) out.push_back(record(name_ + ".cbam", "cbam", *cbam_));
  if (down_conv_) {
    out.push_back(record(name_ + ".downsample.0", "conv", *down_conv_));
    out.push_back(record(name_ + ".downsample.1", "batchnorm", *down_bn_));
  }
  out.push_back({name_ + ".residual", "residual", 0});
  out.push_back({name_ + ".relu", "relu", 0});
}

// ---------------------------------------------------------------------------
// EmbeddingModel

EmbeddingModel::EmbeddingModel(const ModelDescriptor& descriptor) : descriptor_(descriptor) {
  descriptor_.validate();
  const int width = descriptor_.base_width;
  stem_conv_ = Conv2d("conv1", 3, width, 7, 2, 3, false);
  if (descriptor_.attention.ga_enabled) {
    const int hidden = descriptor_.attention.ga_width > 0 ? descriptor_.attention.ga_width : width;
    ga_.emplace("ga", width, hidden, descriptor_.attention.leaky_slope);
  }
  stem_bn_ = BatchNorm2d("bn1", width);
  int in = width;
  for (int stage = 1; stage <= 4; ++stage) {
    const int out = width << (stage - 1);
    const AttentionConfig* cbam = descriptor_.attention.cbam_on_stage(stage) ? &descriptor_.attention : nullptr;
    for (int b = 0; b < 2; ++b) {
      const std::string name = "layer" + std::to_string(stage) + "." + std::to_string(b);
      blocks_.emplace_back(name, in, out, (stage > 1 && b == 0) ? 2 : 1, cbam);
      in = out;
    }
  }
  if (descriptor_.embedding_dim != in) {
    embed_conv_.emplace("embed", in, descriptor_.embedding_dim, 1, 1, 0, false);
  }

  std::mt19937_64 rng(descriptor_.init_seed);
  for (Parameter* p : parameters()) {
    if (!p->trainable) continue;
    const std::string& n = p->name;
    const bool is_bias = n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
    const bool is_bn = n.find("bn") != std::string::npos || n.find("downsample.1") != std::string::npos;
    if (is_bn || is_bias) continue;  // BN: gamma=1, beta=0; conv biases start at zero
    he_normal(*p, rng);
  }
}

void EmbeddingModel::check_input(const Tensor& batch) const {
  if (batch.c() != 3 || batch.h() != descriptor_.input_size || batch.w() != descriptor_.input_size) {
    throw ShapeError("model expects Nx3x" + std::to_string(descriptor_.input_size) + "x" +
                     std::to_string(descriptor_.input_size) + " input, got " + batch.shape_string());
  }
}

namespace {

Eigen::MatrixXd pooled_to_matrix(const Tensor& pooled) {
  Eigen::MatrixXd out(pooled.n(), pooled.c());
  for (int n = 0; n < pooled.n(); ++n)
    for (int c = 0; c < pooled.c(); ++c) out(n, c) = pooled.at(n, c, 0, 0);
  return out;
}

}  // namespace

Eigen::MatrixXd EmbeddingModel::infer(const Tensor& batch) const {
  check_input(batch);
  if (batch.n() == 0) return Eigen::MatrixXd(0, descriptor_.embedding_dim);
  Tensor x = stem_conv_.apply(batch);
  if (ga_) x = ga_->apply(x);
  x = stem_pool_.apply(Relu::apply(stem_bn_.apply(x)));
  for (const BasicBlock& b : blocks_) x = b.apply(x);
  if (embed_conv_) x = embed_conv_->apply(x);
  return pooled_to_matrix(GlobalAvgPool::apply(x));
}

Eigen::MatrixXd EmbeddingModel::forward(const Tensor& batch) {
  check_input(batch);
  Tensor x = stem_conv_.forward(batch);
  if (ga_) x = ga_->forward(x);
  x = stem_pool_.forward(stem_relu_.forward(stem_bn_.forward(x)));
  for (BasicBlock& b : blocks_) x = b.forward(x);
  if (embed_conv_) x = embed_conv_->forward(x);
  return pooled_to_matrix(pool_.forward(x));
}

void EmbeddingModel::backward(const Eigen::MatrixXd& grad) {
  Tensor g(static_cast<int>(grad.rows()), static_cast<int>(grad.cols()), 1, 1);
  for (int n = 0; n < g.n(); ++n)
    for (int c = 0; c < g.c(); ++c) g.at(n, c, 0, 0) = grad(n, c);
  Tensor x = pool_.backward(g);
  if (embed_conv_) x = embed_conv_->backward(x);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) x = it->backward(x);
  x = stem_bn_.backward(stem_relu_.backward(stem_pool_.backward(x)));
  if (ga_) x = ga_->backward(x);
  stem_conv_.backward(x);
}

ParameterList EmbeddingModel::parameters() {
  ParameterList out;
  stem_conv_.collect(out);
  if (ga_) ga_->collect(out);
  stem_bn_.collect(out);
  for (BasicBlock& b : blocks_) b.collect(out);
  if (embed_conv_) embed_conv_->collect(out);
  return out;
}

ConstParameterList EmbeddingModel::parameters() const {
  ConstParameterList out;
  stem_conv_.collect(out);
  if (ga_) ga_->collect(out);
  stem_bn_.collect(out);
  for (const BasicBlock& b : blocks_) b.collect(out);
  if (embed_conv_) embed_conv_->collect(out);
  return out;
}

void EmbeddingModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::size_t EmbeddingModel::parameter_count() const { return trainable_scalars(parameters()); }

std::vector<LayerRecord> EmbeddingModel::audit() const {
  std::vector<LayerRecord> out;
  out.push_back(record("conv1", "conv", stem_conv_));
  if (ga_) out.push_back(record("ga", "global_attention", *ga_));
  out.push_back(record("bn1", "batchnorm", stem_bn_));
  out.push_back({"relu", "relu", 0});
  out.push_back({"maxpool", "maxpool", 0});
  for (const BasicBlock& b : blocks_) b.audit(out);
  if (embed_conv_) out.push_back(record("embed", "conv", *embed_conv_));
  out.push_back({"global_avg_pool", "global_avg_pool", 0});
  return out;
}

EmbeddingModel build_model(const ModelDescriptor& descriptor) { return EmbeddingModel(descriptor); }

// ---------------------------------------------------------------------------
// Embedding helpers

namespace {
constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};
// One sample per inference call: a row never depends on what else is in the list.
constexpr std::size_t kChunk = 1;
}  // namespace

Tensor images_to_tensor(std::span<const Sample* const> samples, int input_size) {
  Tensor t(static_cast<int>(samples.size()), 3, input_size, input_size);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Image& img = samples[n]->image;
    if (img.height != input_size || img.width != input_size) {
      throw ShapeError("image resolution " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       " does not match model input " + std::to_string(input_size));
    }
    for (int ch = 0; ch < 3; ++ch) {
      double* dst = t.plane(static_cast<int>(n), ch);
      for (int y = 0; y < input_size; ++y)
        for (int x = 0; x < input_size; ++x)
          dst[y * input_size + x] = (img.at(y, x, ch) - kMean[ch]) / kStd[ch];
    }
  }
  return t;
}

Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm > 0.0) out.row(i) /= norm;
  }
  return out;
}

Eigen::MatrixXd embed_matrix(const EmbeddingModel& model, std::span<const Sample* const> samples,
                             bool normalize) {
  const int size = model.descriptor().input_size;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(samples.size()), model.descriptor().embedding_dim);
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, samples.size() - start);
    const Eigen::MatrixXd chunk = model.infer(images_to_tensor(samples.subspan(start, count), size));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = chunk;
  }
  return normalize ? l2_normalize_rows(out) : out;
}

std::vector<EmbeddingVector> embed(const EmbeddingModel& model, std::span<const Sample* const> samples,
                                   bool normalize) {
  const Eigen::MatrixXd m = embed_matrix(model, samples, normalize);
  std::vector<EmbeddingVector> out;
  out.reserve(samples.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back({m.row(i).transpose(), normalize});
  return out;
}

}  // namespace vteam
