#include "vteam/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "vteam/error.hpp"

namespace vteam {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Column matrix of shape (C*k*k) x (N*Ho*Wo); column j = n*Ho*Wo + oy*Wo + ox.
void im2col(const Tensor& x, int k, int s, int p, int ho, int wo, RowMat& col) {
  const int n_batch = x.n(), channels = x.c(), h = x.h(), w = x.w();
  const long plane = static_cast<long>(ho) * wo;
  col.resize(static_cast<long>(channels) * k * k, n_batch * plane);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col.row((static_cast<long>(c) * k + ky) * k + kx).data();
        for (int n = 0; n < n_batch; ++n) {
          const double* src = x.plane(n, c);
          double* out = dst + n * plane;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s - p + ky;
            double* row = out + static_cast<long>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, 0.0);
              continue;
            }
            const double* srow = src + static_cast<long>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s - p + kx;
              row[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const RowMat& col, int k, int s, int p, int ho, int wo, Tensor& dx) {
  const int n_batch = dx.n(), channels = dx.c(), h = dx.h(), w = dx.w();
  const long plane = static_cast<long>(ho) * wo;
  dx.fill(0.0);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col.row((static_cast<long>(c) * k + ky) * k + kx).data();
        for (int n = 0; n < n_batch; ++n) {
          double* dst = dx.plane(n, c);
          const double* in = src + n * plane;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s - p + ky;
            if (iy < 0 || iy >= h) continue;
            double* drow = dst + static_cast<long>(iy) * w;
            const double* irow = in + static_cast<long>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s - p + kx;
              if (ix >= 0 && ix < w) drow[ix] += irow[ox];
            }
          }
        }
      }
    }
  }
}

// (C, N*P) matrix <-> NCHW tensor with P = H*W.
void scatter_rows(const RowMat& y, Tensor& out) {
  const long plane = static_cast<long>(out.h()) * out.w();
  for (int n = 0; n < out.n(); ++n)
    for (int c = 0; c < out.c(); ++c)
      std::memcpy(out.plane(n, c), y.row(c).data() + n * plane, sizeof(double) * plane);
}

RowMat gather_rows(const Tensor& t) {
  const long plane = static_cast<long>(t.h()) * t.w();
  RowMat y(t.c(), t.n() * plane);
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      std::memcpy(y.row(c).data() + n * plane, t.plane(n, c), sizeof(double) * plane);
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad,
               bool bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad),
      has_bias_(bias), weight_(name + ".weight", out_channels, in_channels, kernel, kernel) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || pad < 0) {
    throw ShapeError("invalid convolution geometry for " + name);
  }
  if (bias) bias_ = Parameter(name + ".bias", out_channels, 1, 1, 1);
}

Tensor Conv2d::apply(const Tensor& x) const {
  if (x.c() != in_) {
    throw ShapeError(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " +
                     std::to_string(x.c()));
  }
  const int ho = out_size(x.h()), wo = out_size(x.w());
  if (ho <= 0 || wo <= 0) throw ShapeError(weight_.name + ": input too small " + x.shape_string());
  RowMat col;
  im2col(x, kernel_, stride_, pad_, ho, wo, col);
  Eigen::Map<const RowMat> wmat(weight_.value.data(), out_, static_cast<long>(in_) * kernel_ * kernel_);
  RowMat y(out_, col.cols());
  y.noalias() = wmat * col;
  if (has_bias_) {
    for (int c = 0; c < out_; ++c) y.row(c).array() += bias_.value.data()[c];
  }
  Tensor out(x.n(), out_, ho, wo);
  scatter_rows(y, out);
  return out;
}

Tensor Conv2d::forward(const Tensor& x) {
  input_ = x;
  return apply(x);
}

Tensor Conv2d::backward(const Tensor& dy) {
  const int ho = out_size(input_.h()), wo = out_size(input_.w());
  if (dy.n() != input_.n() || dy.c() != out_ || dy.h() != ho || dy.w() != wo) {
    throw ShapeError(weight_.name + ": gradient shape mismatch " + dy.shape_string());
  }
  RowMat col;
  im2col(input_, kernel_, stride_, pad_, ho, wo, col);
  const RowMat dymat = gather_rows(dy);
  const long k_dim = static_cast<long>(in_) * kernel_ * kernel_;
  Eigen::Map<RowMat> dw(weight_.grad.data(), out_, k_dim);
  dw.noalias() += dymat * col.transpose();
  if (has_bias_) {
    for (int c = 0; c < out_; ++c) bias_.grad.data()[c] += dymat.row(c).sum();
  }
  Eigen::Map<const RowMat> wmat(weight_.value.data(), out_, k_dim);
  col.noalias() = wmat.transpose() * dymat;
  Tensor dx(input_.n(), input_.c(), input_.h(), input_.w());
  col2im(col, kernel_, stride_, pad_, ho, wo, dx);
  return dx;
}

void Conv2d::collect(ParameterList& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

void Conv2d::collect(ConstParameterList& out) const {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps),
      gamma_(name + ".weight", channels, 1, 1, 1), beta_(name + ".bias", channels, 1, 1, 1),
      running_mean_(name + ".running_mean", channels, 1, 1, 1, false),
      running_var_(name + ".running_var", channels, 1, 1, 1, false) {
  gamma_.value.fill(1.0);
  running_var_.value.fill(1.0);
}

Tensor BatchNorm2d::apply(const Tensor& x) const {
  if (x.c() != channels_) throw ShapeError(gamma_.name + ": channel mismatch");
  Tensor out(x.n(), x.c(), x.h(), x.w());
  const long plane = static_cast<long>(x.h()) * x.w();
  for (int c = 0; c < channels_; ++c) {
    const double scale = gamma_.value.data()[c] / std::sqrt(running_var_.value.data()[c] + eps_);
    const double shift = beta_.value.data()[c] - running_mean_.value.data()[c] * scale;
    for (int n = 0; n < x.n(); ++n) {
      const double* src = x.plane(n, c);
      double* dst = out.plane(n, c);
      for (long i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
    }
  }
  return out;
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  if (x.c() != channels_) throw ShapeError(gamma_.name + ": channel mismatch");
  const long plane = static_cast<long>(x.h()) * x.w();
  const double count = static_cast<double>(plane) * x.n();
  Tensor out(x.n(), x.c(), x.h(), x.w());
  xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
  inv_std_.assign(channels_, 0.0);
  for (int c = 0; c < channels_; ++c) {
    double mean = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* src = x.plane(n, c);
      for (long i = 0; i < plane; ++i) mean += src[i];
    }
    mean /= count;
    double var = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* src = x.plane(n, c);
      for (long i = 0; i < plane; ++i) var += (src[i] - mean) * (src[i] - mean);
    }
    var /= count;
    const double inv_std = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv_std;
    const double g = gamma_.value.data()[c], b = beta_.value.data()[c];
    for (int n = 0; n < x.n(); ++n) {
      const double* src = x.plane(n, c);
      double* xh = xhat_.plane(n, c);
      double* dst = out.plane(n, c);
      for (long i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mean) * inv_std;
        dst[i] = g * xh[i] + b;
      }
    }
    const double unbiased = count > 1 ? var * count / (count - 1) : var;
    double& rm = running_mean_.value.data()[c];
    double& rv = running_var_.value.data()[c];
    rm = (1.0 - momentum_) * rm + momentum_ * mean;
    rv = (1.0 - momentum_) * rv + momentum_ * unbiased;
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  if (!dy.same_shape(xhat_)) throw ShapeError(gamma_.name + ": gradient shape mismatch");
  const long plane = static_cast<long>(dy.h()) * dy.w();
  const double count = static_cast<double>(plane) * dy.n();
  Tensor dx(dy.n(), dy.c(), dy.h(), dy.w());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < dy.n(); ++n) {
      const double* g = dy.plane(n, c);
      const double* xh = xhat_.plane(n, c);
      for (long i = 0; i < plane; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * xh[i];
      }
    }
    gamma_.grad.data()[c] += sum_dy_xhat;
    beta_.grad.data()[c] += sum_dy;
    const double k = gamma_.value.data()[c] * inv_std_[c] / count;
    for (int n = 0; n < dy.n(); ++n) {
      const double* g = dy.plane(n, c);
      const double* xh = xhat_.plane(n, c);
      double* d = dx.plane(n, c);
      for (long i = 0; i < plane; ++i) d[i] = k * (count * g[i] - sum_dy - xh[i] * sum_dy_xhat);
    }
  }
  return dx;
}

void BatchNorm2d::collect(ParameterList& out) {
  out.insert(out.end(), {&gamma_, &beta_, &running_mean_, &running_var_});
}

void BatchNorm2d::collect(ConstParameterList& out) const {
  out.insert(out.end(), {&gamma_, &beta_, &running_mean_, &running_var_});
}

// ---------------------------------------------------------------------------
// Activations and pooling

Tensor Relu::apply(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor Relu::forward(const Tensor& x) {
  output_ = apply(x);
  return output_;
}

Tensor Relu::backward(const Tensor& dy) const {
  Tensor dx = dy;
  auto o = output_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (o[i] <= 0.0) d[i] = 0.0;
  return dx;
}

Tensor LeakyRelu::apply(const Tensor& x) const {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : slope_ * v;
  return out;
}

Tensor LeakyRelu::forward(const Tensor& x) {
  input_ = x;
  return apply(x);
}

Tensor LeakyRelu::backward(const Tensor& dy) const {
  Tensor dx = dy;
  auto in = input_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (in[i] <= 0.0) d[i] *= slope_;
  return dx;
}

Tensor MaxPool2d::run(const Tensor& x, std::vector<std::size_t>* argmax) const {
  const int ho = (x.h() + 2 * pad_ - kernel_) / stride_ + 1;
  const int wo = (x.w() + 2 * pad_ - kernel_) / stride_ + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("max pool: input too small " + x.shape_string());
  Tensor out(x.n(), x.c(), ho, wo);
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.plane(n, c);
      const std::size_t base = static_cast<std::size_t>(src - x.data());
      double* dst = out.plane(n, c);
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const double v = src[iy * x.w() + ix];
              if (v > best) {
                best = v;
                best_i = base + static_cast<std::size_t>(iy) * x.w() + ix;
              }
            }
          }
          dst[oy * wo + ox] = best;
          if (argmax) (*argmax)[o] = best_i;
        }
      }
    }
  }
  return out;
}

Tensor MaxPool2d::apply(const Tensor& x) const { return run(x, nullptr); }

Tensor MaxPool2d::forward(const Tensor& x) {
  in_n_ = x.n();
  in_c_ = x.c();
  in_h_ = x.h();
  in_w_ = x.w();
  return run(x, &argmax_);
}

Tensor MaxPool2d::backward(const Tensor& dy) const {
  if (dy.size() != argmax_.size()) throw ShapeError("max pool: gradient shape mismatch");
  Tensor dx(in_n_, in_c_, in_h_, in_w_);
  auto d = dy.values();
  for (std::size_t i = 0; i < d.size(); ++i) dx.data()[argmax_[i]] += d[i];
  return dx;
}

Tensor GlobalAvgPool::apply(const Tensor& x) {
  Tensor out(x.n(), x.c(), 1, 1);
  const long plane = static_cast<long>(x.h()) * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.plane(n, c);
      double s = 0.0;
      for (long i = 0; i < plane; ++i) s += src[i];
      out.at(n, c, 0, 0) = s / static_cast<double>(plane);
    }
  }
  return out;
}

Tensor GlobalAvgPool::forward(const Tensor& x) {
  h_ = x.h();
  w_ = x.w();
  return apply(x);
}

Tensor GlobalAvgPool::backward(const Tensor& dy) const {
  Tensor dx(dy.n(), dy.c(), h_, w_);
  const long plane = static_cast<long>(h_) * w_;
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const double g = dy.at(n, c, 0, 0) / static_cast<double>(plane);
      double* dst = dx.plane(n, c);
      for (long i = 0; i < plane; ++i) dst[i] = g;
    }
  }
  return dx;
}

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = sigmoid(v);
  return out;
}

}  // namespace vteam
