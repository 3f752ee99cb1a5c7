#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "vteam/tensor.hpp"

namespace testing {

inline vteam::Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng, double scale = 1.0) {
  vteam::Tensor t(n, c, h, w);
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : t.values()) v = d(rng);
  return t;
}

inline void randomize(vteam::Parameter& p, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : p.value.values()) v = d(rng);
}

inline double max_abs_diff(const vteam::Tensor& a, const vteam::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double dot(const vteam::Tensor& a, const vteam::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Largest relative error between analytic and central-difference gradients
/// of L = <f(x), r> over every coordinate of `x`. `eval` recomputes f.
inline double fd_relative_error(vteam::Tensor& x, const vteam::Tensor& analytic,
                                const std::function<double()>& eval, double h = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double up = eval();
    x.data()[i] = orig - h;
    const double down = eval();
    x.data()[i] = orig;
    const double num = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vteam_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
