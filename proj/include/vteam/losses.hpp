#pragma once

#include <Eigen/Dense>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace vteam {

enum class Mining { batch_hard, all_valid };
enum class Reduction { mean_active, mean_all, sum };

struct LossConfig {
  double margin_alpha = 0.3;
  Mining mining = Mining::batch_hard;
  Reduction reduction = Reduction::mean_active;
  /// Triplet distances on L2-normalised embeddings instead of raw features.
  bool triplet_normalize = false;
  double proxy_scale = 3.0;
  int num_proxies = 0;
};

/// One learnable proxy per training class (rows). Only training code reads it.
struct ProxyBank {
  Eigen::MatrixXd proxies;
  bool trainable = true;

  static ProxyBank random(int num_proxies, int dim, std::uint64_t seed);
};

struct LossResult {
  double value = 0.0;
  Eigen::MatrixXd grad_embeddings;  ///< dLoss/dEmbedding, same shape as the input
  Eigen::MatrixXd grad_proxies;     ///< ProxyNCA only
  int active_terms = 0;             ///< triplets with a positive hinge (triplet loss)
  int mined_terms = 0;
};

/// Hinged triplet loss, mean over active triplets by default:
///   [ ||f(a)-f(p)||^2 - ||f(a)-f(n)||^2 + alpha ]_+
/// batch_hard keeps, per anchor, the farthest positive and the nearest
/// negative (ties to the lowest index). Throws if fewer than two identities.
LossResult triplet_loss(const Eigen::MatrixXd& embeddings, std::span<const int> labels, const LossConfig& config);

/// ProxyNCA with the positive proxy excluded from the denominator:
///   d(x,p_y) + log sum_{z != y} exp(-d(x,p_z)),
/// d = squared distance between L2-normalised vectors scaled by proxy_scale.
/// Averaged over the batch; gradients for embeddings and proxies.
LossResult proxy_nca_loss(const Eigen::MatrixXd& embeddings, std::span<const int> labels, const ProxyBank& bank,
                          const LossConfig& config);

/// Index of the nearest proxy (same normalised distance as the loss).
std::vector<int> nearest_proxy(const Eigen::MatrixXd& embeddings, const ProxyBank& bank);

struct GradientReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// A differentiable scalar function of a flat parameter vector. When `grad`
/// is non-null it receives the analytic gradient.
using ScalarFunction = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

/// Central finite differences against the analytic gradient. The relative
/// error of each coordinate is |a - n| / max(|a|, |n|, floor).
GradientReport gradient_check(const ScalarFunction& fn, const Eigen::VectorXd& at, double step = 1e-5,
                              double floor = 1e-6);

}  // namespace vteam
