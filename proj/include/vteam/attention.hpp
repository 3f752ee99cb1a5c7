#pragma once

#include <string>

#include "vteam/layers.hpp"

namespace vteam {

/// Pooling-free attention over the stem convolution output.
///
/// mask = sigmoid(conv3x3(leaky_relu(conv3x3(x)))), output = x * mask. Both
/// convolutions carry a bias; the hidden width defaults to the input width.
class GlobalAttention {
 public:
  GlobalAttention() = default;
  GlobalAttention(std::string name, int channels, int hidden_width, double leaky_slope = 0.01);

  Tensor apply(const Tensor& x) const;
  Tensor mask(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  void collect(ParameterList& out);
  void collect(ConstParameterList& out) const;

  Conv2d& first() { return conv1_; }
  Conv2d& second() { return conv2_; }
  int channels() const { return channels_; }

 private:
  int channels_ = 0;
  Conv2d conv1_, conv2_;
  LeakyRelu act_{0.01};
  Tensor input_, mask_;
};

struct CbamMasks {
  Tensor channel;  ///< (N,C,1,1)
  Tensor spatial;  ///< (N,1,H,W)
};

/// Channel-then-spatial attention. The channel mask comes from a shared
/// two-layer MLP over average- and max-pooled descriptors; the spatial mask
/// from a k x k convolution over the channel-wise [max, mean] maps of the
/// channel-refined input. The spatial convolution pads by edge replication so
/// a spatially constant map yields a spatially constant mask.
class Cbam {
 public:
  Cbam() = default;
  Cbam(std::string name, int channels, int reduction, int spatial_kernel);

  Tensor apply(const Tensor& x) const;
  CbamMasks masks(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  void collect(ParameterList& out);
  void collect(ConstParameterList& out) const;

  Conv2d& mlp_in() { return mlp1_; }
  Conv2d& mlp_out() { return mlp2_; }
  Conv2d& spatial_conv() { return spatial_; }

 private:
  struct Pass {
    Tensor channel_mask, refined, spatial_mask, output;
  };
  Pass run(const Tensor& x) const;

  int channels_ = 0, kernel_ = 7;
  Conv2d mlp1_, mlp2_, spatial_;
  // Training caches.
  Relu mlp_act_;
  Tensor input_, channel_mask_, refined_, spatial_mask_;
  std::vector<int> max_channel_;   // argmax over channels per (n, pixel) of refined
  std::vector<int> max_position_;  // argmax over pixels per (n, c) of input
};

/// Edge-replicating pad of `pad` pixels on each side.
Tensor replicate_pad(const Tensor& x, int pad);
/// Adjoint of replicate_pad: folds border gradients onto the clamped source pixels.
Tensor replicate_pad_backward(const Tensor& dpadded, int pad);

}  // namespace vteam
