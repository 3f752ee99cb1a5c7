#include "vteam/attention.hpp"

#include <algorithm>

#include "vteam/error.hpp"

namespace vteam {

// ---------------------------------------------------------------------------
// GlobalAttention

GlobalAttention::GlobalAttention(std::string name, int channels, int hidden_width, double leaky_slope)
    : channels_(channels),
      conv1_(name + ".conv1", channels, hidden_width, 3, 1, 1, true),
      conv2_(name + ".conv2", hidden_width, channels, 3, 1, 1, true),
      act_(leaky_slope) {}

Tensor GlobalAttention::mask(const Tensor& x) const {
  if (x.c() != channels_) {
    throw ShapeError("global attention: expected " + std::to_string(channels_) + " channels, got " +
                     std::to_string(x.c()));
  }
  return sigmoid(conv2_.apply(act_.apply(conv1_.apply(x))));
}

Tensor GlobalAttention::apply(const Tensor& x) const {
  Tensor out = mask(x);
  auto in = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= in[i];
  return out;
}

Tensor GlobalAttention::forward(const Tensor& x) {
  if (x.c() != channels_) throw ShapeError("global attention: channel mismatch");
  input_ = x;
  mask_ = sigmoid(conv2_.forward(act_.forward(conv1_.forward(x))));
  Tensor out = mask_;
  auto in = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= in[i];
  return out;
}

Tensor GlobalAttention::backward(const Tensor& dy) {
  Tensor dz = dy;
  Tensor dx = dy;
  auto g = dy.values();
  auto in = input_.values();
  auto m = mask_.values();
  auto z = dz.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    z[i] = g[i] * in[i] * m[i] * (1.0 - m[i]);
    d[i] = g[i] * m[i];
  }
  dx += conv1_.backward(act_.backward(conv2_.backward(dz)));
  return dx;
}

void GlobalAttention::collect(ParameterList& out) {
  conv1_.collect(out);
  conv2_.collect(out);
}

void GlobalAttention::collect(ConstParameterList& out) const {
  conv1_.collect(out);
  conv2_.collect(out);
}

// ---------------------------------------------------------------------------
// Replicate padding

Tensor replicate_pad(const Tensor& x, int pad) {
  Tensor out(x.n(), x.c(), x.h() + 2 * pad, x.w() + 2 * pad);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < out.h(); ++y) {
        const int sy = std::clamp(y - pad, 0, x.h() - 1);
        for (int xx = 0; xx < out.w(); ++xx) {
          const int sx = std::clamp(xx - pad, 0, x.w() - 1);
          out.at(n, c, y, xx) = x.at(n, c, sy, sx);
        }
      }
  return out;
}

Tensor replicate_pad_backward(const Tensor& dpadded, int pad) {
  Tensor dx(dpadded.n(), dpadded.c(), dpadded.h() - 2 * pad, dpadded.w() - 2 * pad);
  for (int n = 0; n < dpadded.n(); ++n)
    for (int c = 0; c < dpadded.c(); ++c)
      for (int y = 0; y < dpadded.h(); ++y) {
        const int sy = std::clamp(y - pad, 0, dx.h() - 1);
        for (int xx = 0; xx < dpadded.w(); ++xx) {
          const int sx = std::clamp(xx - pad, 0, dx.w() - 1);
          dx.at(n, c, sy, sx) += dpadded.at(n, c, y, xx);
        }
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Cbam

namespace {

// [avg; max] descriptors stacked along the batch axis: (2N, C, 1, 1).
Tensor pooled_descriptors(const Tensor& x, std::vector<int>* argmax) {
  const int n_batch = x.n(), channels = x.c();
  const int plane = x.h() * x.w();
  Tensor d(2 * n_batch, channels, 1, 1);
  if (argmax) argmax->assign(static_cast<std::size_t>(n_batch) * channels, 0);
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const double* p = x.plane(n, c);
      double sum = 0.0;
      int best = 0;
      for (int i = 0; i < plane; ++i) {
        sum += p[i];
        if (p[i] > p[best]) best = i;
      }
      d.at(n, c, 0, 0) = sum / plane;
      d.at(n_batch + n, c, 0, 0) = p[best];
      if (argmax) (*argmax)[static_cast<std::size_t>(n) * channels + c] = best;
    }
  }
  return d;
}

// Channel-wise [max, mean] maps: (N, 2, H, W).
Tensor channel_pool(const Tensor& x, std::vector<int>* argmax) {
  const int plane = x.h() * x.w();
  Tensor out(x.n(), 2, x.h(), x.w());
  if (argmax) argmax->assign(static_cast<std::size_t>(x.n()) * plane, 0);
  for (int n = 0; n < x.n(); ++n) {
    double* mx = out.plane(n, 0);
    double* mean = out.plane(n, 1);
    for (int i = 0; i < plane; ++i) {
      double best = x.plane(n, 0)[i];
      int best_c = 0;
      double sum = 0.0;
      for (int c = 0; c < x.c(); ++c) {
        const double v = x.plane(n, c)[i];
        sum += v;
        if (v > best) {
          best = v;
          best_c = c;
        }
      }
      mx[i] = best;
      mean[i] = sum / x.c();
      if (argmax) (*argmax)[static_cast<std::size_t>(n) * plane + i] = best_c;
    }
  }
  return out;
}

Tensor combine_mlp_halves(const Tensor& z) {
  const int n_batch = z.n() / 2;
  Tensor mask(n_batch, z.c(), 1, 1);
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < z.c(); ++c)
      mask.at(n, c, 0, 0) = sigmoid(z.at(n, c, 0, 0) + z.at(n_batch + n, c, 0, 0));
  return mask;
}

}  // namespace

Cbam::Cbam(std::string name, int channels, int reduction, int spatial_kernel)
    : channels_(channels), kernel_(spatial_kernel) {
  if (reduction <= 0 || channels % reduction != 0) {
    throw ConfigError("cbam " + name + ": reduction " + std::to_string(reduction) +
                      " does not divide channel count " + std::to_string(channels));
  }
  if (spatial_kernel <= 0 || spatial_kernel % 2 == 0) {
    throw ConfigError("cbam " + name + ": spatial kernel must be odd and positive");
  }
  mlp1_ = Conv2d(name + ".mlp1", channels, channels / reduction, 1, 1, 0, true);
  mlp2_ = Conv2d(name + ".mlp2", channels / reduction, channels, 1, 1, 0, true);
  spatial_ = Conv2d(name + ".spatial", 2, 1, spatial_kernel, 1, 0, false);
}

Cbam::Pass Cbam::run(const Tensor& x) const {
  if (x.c() != channels_) throw ShapeError("cbam: channel mismatch");
  Pass p;
  const Tensor z = mlp2_.apply(Relu::apply(mlp1_.apply(pooled_descriptors(x, nullptr))));
  p.channel_mask = combine_mlp_halves(z);
  p.refined = x;
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double m = p.channel_mask.at(n, c, 0, 0);
      double* r = p.refined.plane(n, c);
      for (int i = 0; i < plane; ++i) r[i] *= m;
    }
  p.spatial_mask = sigmoid(spatial_.apply(replicate_pad(channel_pool(p.refined, nullptr), kernel_ / 2)));
  p.output = p.refined;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double* s = p.spatial_mask.plane(n, 0);
      double* o = p.output.plane(n, c);
      for (int i = 0; i < plane; ++i) o[i] *= s[i];
    }
  return p;
}

Tensor Cbam::apply(const Tensor& x) const { return run(x).output; }

CbamMasks Cbam::masks(const Tensor& x) const {
  Pass p = run(x);
  return {std::move(p.channel_mask), std::move(p.spatial_mask)};
}

Tensor Cbam::forward(const Tensor& x) {
  if (x.c() != channels_) throw ShapeError("cbam: channel mismatch");
  input_ = x;
  const Tensor z = mlp2_.forward(mlp_act_.forward(mlp1_.forward(pooled_descriptors(x, &max_position_))));
  channel_mask_ = combine_mlp_halves(z);
  refined_ = x;
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double m = channel_mask_.at(n, c, 0, 0);
      double* r = refined_.plane(n, c);
      for (int i = 0; i < plane; ++i) r[i] *= m;
    }
  spatial_mask_ =
      sigmoid(spatial_.forward(replicate_pad(channel_pool(refined_, &max_channel_), kernel_ / 2)));
  Tensor out = refined_;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double* s = spatial_mask_.plane(n, 0);
      double* o = out.plane(n, c);
      for (int i = 0; i < plane; ++i) o[i] *= s[i];
    }
  return out;
}

Tensor Cbam::backward(const Tensor& dy) {
  const int n_batch = input_.n(), channels = channels_;
  const int plane = input_.h() * input_.w();
  if (!dy.same_shape(input_)) throw ShapeError("cbam: gradient shape mismatch");

  // Spatial stage: out = refined * s.
  Tensor drefined(n_batch, channels, input_.h(), input_.w());
  Tensor dlogit(n_batch, 1, input_.h(), input_.w());
  for (int n = 0; n < n_batch; ++n) {
    const double* s = spatial_mask_.plane(n, 0);
    double* dl = dlogit.plane(n, 0);
    for (int c = 0; c < channels; ++c) {
      const double* g = dy.plane(n, c);
      const double* r = refined_.plane(n, c);
      double* dr = drefined.plane(n, c);
      for (int i = 0; i < plane; ++i) {
        dr[i] = g[i] * s[i];
        dl[i] += g[i] * r[i];
      }
    }
    for (int i = 0; i < plane; ++i) dl[i] *= s[i] * (1.0 - s[i]);
  }
  const Tensor dpooled = replicate_pad_backward(spatial_.backward(dlogit), kernel_ / 2);
  for (int n = 0; n < n_batch; ++n) {
    const double* dmax = dpooled.plane(n, 0);
    const double* dmean = dpooled.plane(n, 1);
    for (int i = 0; i < plane; ++i) {
      const int c_max = max_channel_[static_cast<std::size_t>(n) * plane + i];
      drefined.plane(n, c_max)[i] += dmax[i];
      const double share = dmean[i] / channels;
      for (int c = 0; c < channels; ++c) drefined.plane(n, c)[i] += share;
    }
  }

  // Channel stage: refined = x * m.
  Tensor dx(n_batch, channels, input_.h(), input_.w());
  Tensor dz(2 * n_batch, channels, 1, 1);
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const double m = channel_mask_.at(n, c, 0, 0);
      const double* dr = drefined.plane(n, c);
      const double* in = input_.plane(n, c);
      double* d = dx.plane(n, c);
      double dm = 0.0;
      for (int i = 0; i < plane; ++i) {
        d[i] = dr[i] * m;
        dm += dr[i] * in[i];
      }
      const double g = dm * m * (1.0 - m);
      dz.at(n, c, 0, 0) = g;
      dz.at(n_batch + n, c, 0, 0) = g;
    }
  }
  const Tensor ddesc = mlp1_.backward(mlp_act_.backward(mlp2_.backward(dz)));
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const double davg = ddesc.at(n, c, 0, 0) / plane;
      double* d = dx.plane(n, c);
      for (int i = 0; i < plane; ++i) d[i] += davg;
      d[max_position_[static_cast<std::size_t>(n) * channels + c]] += ddesc.at(n_batch + n, c, 0, 0);
    }
  }
  return dx;
}

void Cbam::collect(ParameterList& out) {
  mlp1_.collect(out);
  mlp2_.collect(out);
  spatial_.collect(out);
}

void Cbam::collect(ConstParameterList& out) const {
  mlp1_.collect(out);
  mlp2_.collect(out);
  spatial_.collect(out);
}

}  // namespace vteam
