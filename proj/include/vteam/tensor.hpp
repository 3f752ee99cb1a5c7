#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vteam {

/// Dense 4-D array of doubles in NCHW order. Lower-rank quantities (biases,
/// MLP weights) use trailing singleton dimensions.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0);

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  /// Pointer to the H*W plane of channel c in sample n.
  double* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const double* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  bool same_shape(const Tensor& other) const {
    return n_ == other.n_ && c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }
  std::string shape_string() const;

  void fill(double v);
  Tensor& operator+=(const Tensor& other);

  bool all_finite() const;

 private:
  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w;
  }

  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

/// A named tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name_, int n, int c, int h, int w, bool trainable_ = true)
      : name(std::move(name_)), value(n, c, h, w), grad(trainable_ ? Tensor(n, c, h, w) : Tensor()),
        trainable(trainable_) {}
  void zero_grad() {
    if (trainable) grad.fill(0.0);
  }
};

using ParameterList = std::vector<Parameter*>;
using ConstParameterList = std::vector<const Parameter*>;

}  // namespace vteam
