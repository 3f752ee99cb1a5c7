#include "vteam/losses.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "vteam/error.hpp"

namespace vteam {

ProxyBank ProxyBank::random(int num_proxies, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  ProxyBank bank;
  bank.proxies.resize(num_proxies, dim);
  for (Eigen::Index i = 0; i < bank.proxies.size(); ++i) bank.proxies.data()[i] = dist(rng);
  return bank;
}

namespace {

struct Triplet {
  int a, p, n;
};

// Row-wise normalisation with its Jacobian applied lazily in backprop_normalize().
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& x, Eigen::VectorXd& norms) {
  norms = x.rowwise().norm();
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (norms(i) <= 0.0) throw Error("cannot normalise a zero embedding");
    out.row(i) /= norms(i);
  }
  return out;
}

// d/dx of x/|x| applied to g: (g - u (u.g)) / |x|.
Eigen::MatrixXd backprop_normalize(const Eigen::MatrixXd& g, const Eigen::MatrixXd& unit,
                                   const Eigen::VectorXd& norms) {
  Eigen::MatrixXd out(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double dot = unit.row(i).dot(g.row(i));
    out.row(i) = (g.row(i) - unit.row(i) * dot) / norms(i);
  }
  return out;
}

}  // namespace

LossResult triplet_loss(const Eigen::MatrixXd& embeddings, std::span<const int> labels, const LossConfig& config) {
  const Eigen::Index n = embeddings.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("triplet loss: label count mismatch");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw Error("triplet loss needs at least two identities in the batch");
  }
  Eigen::VectorXd norms;
  const Eigen::MatrixXd f = config.triplet_normalize ? normalize_rows(embeddings, norms) : embeddings;

  Eigen::MatrixXd dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) dist(i, j) = (f.row(i) - f.row(j)).squaredNorm();

  std::vector<Triplet> mined;
  for (int a = 0; a < n; ++a) {
    if (config.mining == Mining::batch_hard) {
      int hp = -1, hn = -1;
      for (int j = 0; j < n; ++j) {
        if (j == a) continue;
        if (labels[j] == labels[a]) {
          if (hp < 0 || dist(a, j) > dist(a, hp)) hp = j;
        } else if (hn < 0 || dist(a, j) < dist(a, hn)) {
          hn = j;
        }
      }
      if (hp >= 0 && hn >= 0) mined.push_back({a, hp, hn});
    } else {
      for (int p = 0; p < n; ++p) {
        if (p == a || labels[p] != labels[a]) continue;
        for (int q = 0; q < n; ++q)
          if (labels[q] != labels[a]) mined.push_back({a, p, q});
      }
    }
  }

  LossResult r;
  r.grad_embeddings = Eigen::MatrixXd::Zero(n, embeddings.cols());
  r.mined_terms = static_cast<int>(mined.size());
  double total = 0.0;
  std::vector<const Triplet*> active;
  for (const Triplet& t : mined) {
    const double term = dist(t.a, t.p) - dist(t.a, t.n) + config.margin_alpha;
    if (term > 0.0) {
      total += term;
      active.push_back(&t);
    }
  }
  r.active_terms = static_cast<int>(active.size());
  double denom = 1.0;
  switch (config.reduction) {
    case Reduction::mean_active: denom = active.empty() ? 1.0 : static_cast<double>(active.size()); break;
    case Reduction::mean_all: denom = mined.empty() ? 1.0 : static_cast<double>(mined.size()); break;
    case Reduction::sum: denom = 1.0; break;
  }
  r.value = total / denom;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, embeddings.cols());
  for (const Triplet* t : active) {
    const Eigen::RowVectorXd ap = f.row(t->a) - f.row(t->p);
    const Eigen::RowVectorXd an = f.row(t->a) - f.row(t->n);
    g.row(t->a) += 2.0 * (ap - an) / denom;
    g.row(t->p) -= 2.0 * ap / denom;
    g.row(t->n) += 2.0 * an / denom;
  }
  r.grad_embeddings = config.triplet_normalize ? backprop_normalize(g, f, norms) : g;
  return r;
}

LossResult proxy_nca_loss(const Eigen::MatrixXd& embeddings, std::span<const int> labels, const ProxyBank& bank,
                          const LossConfig& config) {
  const Eigen::Index n = embeddings.rows(), m = bank.proxies.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("proxy loss: label count mismatch");
  if (bank.proxies.cols() != embeddings.cols()) throw ShapeError("proxy loss: proxy dimension mismatch");
  if (m < 2) throw Error("proxy loss needs at least two proxies");
  for (int y : labels)
    if (y < 0 || y >= m) throw Error("label " + std::to_string(y) + " out of range for " + std::to_string(m) + " proxies");
  if (n == 0) return {0.0, Eigen::MatrixXd(0, embeddings.cols()), Eigen::MatrixXd::Zero(m, bank.proxies.cols()), 0, 0};

  const double s = config.proxy_scale;
  Eigen::VectorXd xnorm, pnorm;
  const Eigen::MatrixXd xu = normalize_rows(embeddings, xnorm);
  const Eigen::MatrixXd pu = normalize_rows(bank.proxies, pnorm);
  const Eigen::MatrixXd x = s * xu, p = s * pu;

  Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(n, embeddings.cols());
  Eigen::MatrixXd gp = Eigen::MatrixXd::Zero(m, bank.proxies.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[i];
    Eigen::VectorXd d(m);
    for (Eigen::Index z = 0; z < m; ++z) d(z) = (x.row(i) - p.row(z)).squaredNorm();
    // log-sum-exp over negatives, stabilised by the smallest distance.
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index z = 0; z < m; ++z)
      if (z != y) dmin = std::min(dmin, d(z));
    double sum = 0.0;
    for (Eigen::Index z = 0; z < m; ++z)
      if (z != y) sum += std::exp(-(d(z) - dmin));
    total += d(y) - dmin + std::log(sum);

    // dL/dd_y = 1; dL/dd_z = -softmax_z over negatives.
    gx.row(i) += 2.0 * (x.row(i) - p.row(y));
    gp.row(y) -= 2.0 * (x.row(i) - p.row(y));
    for (Eigen::Index z = 0; z < m; ++z) {
      if (z == y) continue;
      const double w = std::exp(-(d(z) - dmin)) / sum;
      gx.row(i) -= w * 2.0 * (x.row(i) - p.row(z));
      gp.row(z) += w * 2.0 * (x.row(i) - p.row(z));
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult r;
  r.value = total * inv_n;
  r.grad_embeddings = backprop_normalize(gx * (s * inv_n), xu, xnorm);
  r.grad_proxies = backprop_normalize(gp * (s * inv_n), pu, pnorm);
  r.mined_terms = static_cast<int>(n);
  r.active_terms = static_cast<int>(n);
  return r;
}

std::vector<int> nearest_proxy(const Eigen::MatrixXd& embeddings, const ProxyBank& bank) {
  Eigen::VectorXd xn, pn;
  const Eigen::MatrixXd x = normalize_rows(embeddings, xn);
  const Eigen::MatrixXd p = normalize_rows(bank.proxies, pn);
  std::vector<int> out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    (p.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

GradientReport gradient_check(const ScalarFunction& fn, const Eigen::VectorXd& at, double step, double floor) {
  Eigen::VectorXd analytic(at.size());
  fn(at, &analytic);
  GradientReport report;
  Eigen::VectorXd x = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    x(i) = at(i) + step;
    const double up = fn(x, nullptr);
    x(i) = at(i) - step;
    const double down = fn(x, nullptr);
    x(i) = at(i);
    const double numeric = (up - down) / (2.0 * step);
    const double abs_err = std::abs(analytic(i) - numeric);
    const double rel = abs_err / std::max({std::abs(analytic(i)), std::abs(numeric), floor});
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = static_cast<std::size_t>(i);
    }
  }
  report.checked = static_cast<std::size_t>(at.size());
  return report;
}

}  // namespace vteam
