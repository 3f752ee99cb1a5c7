#pragma once

#include <string>
#include <vector>

#include "vteam/tensor.hpp"

namespace vteam {

// Every layer has two entry points. apply() is the const inference path and
// caches nothing, so a model in inference mode can be shared across threads.
// forward() is the training path; it caches what backward() needs and
// backward() accumulates into the parameter gradients.

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad,
         bool bias);

  Tensor apply(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  void collect(ParameterList& out);
  void collect(ConstParameterList& out) const;

  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }
  Parameter& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  int pad() const { return pad_; }

 private:
  int out_size(int extent) const { return (extent + 2 * pad_ - kernel_) / stride_ + 1; }

  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor apply(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  void collect(ParameterList& out);
  void collect(ConstParameterList& out) const;

 private:
  int channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Parameter gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class Relu {
 public:
  static Tensor apply(const Tensor& x);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor output_;
};

class LeakyRelu {
 public:
  explicit LeakyRelu(double slope = 0.01) : slope_(slope) {}
  Tensor apply(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;
  double slope() const { return slope_; }

 private:
  double slope_;
  Tensor input_;
};

class MaxPool2d {
 public:
  MaxPool2d(int kernel = 3, int stride = 2, int pad = 1) : kernel_(kernel), stride_(stride), pad_(pad) {}
  Tensor apply(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor run(const Tensor& x, std::vector<std::size_t>* argmax) const;

  int kernel_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  int in_n_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

/// Spatial mean per channel: (N,C,H,W) -> (N,C,1,1).
class GlobalAvgPool {
 public:
  static Tensor apply(const Tensor& x);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  int h_ = 0, w_ = 0;
};

double sigmoid(double v);
Tensor sigmoid(const Tensor& x);

/// He-normal (fan-out) initialisation as used for ResNet convolutions.
template <class Rng>
void he_normal(Parameter& p, Rng& rng);

}  // namespace vteam

#include <cmath>
#include <random>

namespace vteam {

template <class Rng>
void he_normal(Parameter& p, Rng& rng) {
  const double fan_out = static_cast<double>(p.value.n()) * p.value.h() * p.value.w();
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_out));
  for (double& v : p.value.values()) v = dist(rng);
}

}  // namespace vteam
