#include "vteam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <random>

#include "vteam/error.hpp"
#include "vteam/model.hpp"

namespace vteam {

double nmi(const ClusterAssignment& a) {
  if (a.predicted.empty() || a.truth.empty()) throw Error("nmi: empty partition");
  if (a.predicted.size() != a.truth.size()) throw Error("nmi: partitions cover different index sets");
  const double n = static_cast<double>(a.predicted.size());
  std::map<int, double> p_count, t_count;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.predicted.size(); ++i) {
    p_count[a.predicted[i]] += 1.0;
    t_count[a.truth[i]] += 1.0;
    joint[{a.predicted[i], a.truth[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& counts) {
    double h = 0.0;
    for (const auto& [label, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double hp = entropy(p_count), ht = entropy(t_count);
  if (hp + ht <= 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    mi += (c / n) * std::log(c * n / (p_count[key.first] * t_count[key.second]));
  }
  return std::clamp(2.0 * mi / (hp + ht), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// k-means

namespace {

KMeansResult lloyd(const Eigen::MatrixXd& x, int k, int max_iterations, std::mt19937_64& rng) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd centers(k, x.cols());
  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = x.row(pick(rng));
  Eigen::VectorXd closest = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = closest.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      double target = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (chosen = 0; chosen < n - 1; ++chosen) {
        target -= closest(chosen);
        if (target < 0.0) break;
      }
    } else {
      chosen = pick(rng);
    }
    centers.row(c) = x.row(chosen);
    closest = closest.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  std::vector<int> labels(n, -1);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (labels[i] != static_cast<int>(best)) {
        labels[i] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed && iter > 0) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    std::vector<int> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[i]) += x.row(i);
      ++counts[labels[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / counts[c];
        continue;
      }
      // Empty cluster: take the point farthest from its current centre.
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (x.row(i) - centers.row(labels[i])).squaredNorm();
        if (d > far_d && counts[labels[i]] > 1) {
          far_d = d;
          far = i;
        }
      }
      --counts[labels[far]];
      labels[far] = c;
      counts[c] = 1;
      centers.row(c) = x.row(far);
      changed = true;
    }
  }
  KMeansResult r;
  r.labels = std::move(labels);
  r.centers = std::move(centers);
  for (Eigen::Index i = 0; i < n; ++i) r.wcss += (x.row(i) - r.centers.row(r.labels[i])).squaredNorm();
  return r;
}

}  // namespace

KMeansResult kmeans_cluster(const Eigen::MatrixXd& points, int k, const KMeansOptions& options) {
  if (k < 1) throw Error("k-means: k must be >= 1");
  if (k > points.rows()) {
    throw Error("k-means: k=" + std::to_string(k) + " exceeds " + std::to_string(points.rows()) + " samples");
  }
  KMeansResult best;
  best.wcss = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, options.restarts); ++r) {
    std::mt19937_64 rng(options.seed * 7919ULL + static_cast<std::uint64_t>(r));
    KMeansResult cand = lloyd(points, k, options.max_iterations, rng);
    if (cand.wcss < best.wcss) best = std::move(cand);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Retrieval

namespace {

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd d(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return d;
}

std::vector<int> argsort_row(const Eigen::MatrixXd& d, Eigen::Index row, const std::vector<int>& candidates) {
  std::vector<int> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return d(row, x) < d(row, y); });
  return order;
}

}  // namespace

std::map<int, double> recall_at_k(const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                                  std::span<const int> ks, bool normalize) {
  const Eigen::Index n = embeddings.rows();
  if (n < 2) throw Error("recall@k needs at least two samples");
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("recall@k: label count mismatch");
  const Eigen::MatrixXd e = normalize ? l2_normalize_rows(embeddings) : embeddings;
  const Eigen::MatrixXd d = squared_distances(e, e);
  std::map<int, double> hits;
  for (int k : ks) {
    if (k < 1) throw Error("recall@k: k must be >= 1");
    hits[k] = 0.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<int> others;
    for (int j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    const std::vector<int> order = argsort_row(d, i, others);
    int first_hit = -1;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (labels[order[r]] == labels[i]) {
        first_hit = static_cast<int>(r);
        break;
      }
    }
    for (auto& [k, h] : hits)
      if (first_hit >= 0 && first_hit < k) h += 1.0;
  }
  for (auto& [k, h] : hits) h /= static_cast<double>(n);
  return hits;
}

std::string to_string(Protocol p) { return p == Protocol::cars196_zsl ? "cars196_zsl" : "veri776"; }

Protocol parse_protocol(const std::string& s) {
  if (s == "cars196_zsl") return Protocol::cars196_zsl;
  if (s == "veri776") return Protocol::veri776;
  throw ConfigError("unknown protocol '" + s + "' (expected cars196_zsl or veri776)");
}

MapCmcResult map_cmc(const Eigen::MatrixXd& query, const Eigen::MatrixXd& gallery,
                     std::span<const RetrievalMeta> query_meta, std::span<const RetrievalMeta> gallery_meta,
                     Protocol protocol, int max_rank, bool normalize) {
  if (static_cast<std::size_t>(query.rows()) != query_meta.size() ||
      static_cast<std::size_t>(gallery.rows()) != gallery_meta.size()) {
    throw ShapeError("map_cmc: metadata count mismatch");
  }
  if (query.rows() > 0 && gallery.rows() > 0 && query.cols() != gallery.cols()) {
    throw ShapeError("map_cmc: query and gallery dimensions differ");
  }
  if (protocol == Protocol::veri776) {
    for (const auto* meta : {&query_meta, &gallery_meta})
      for (const RetrievalMeta& m : *meta)
        if (!m.camera) throw Error("veri776 protocol needs camera ids on every sample");
  }
  const Eigen::MatrixXd q = normalize ? l2_normalize_rows(query) : query;
  const Eigen::MatrixXd g = normalize ? l2_normalize_rows(gallery) : gallery;
  const Eigen::MatrixXd d = squared_distances(q, g);

  MapCmcResult r;
  r.cmc.assign(std::max(1, max_rank), 0.0);
  double ap_sum = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const RetrievalMeta& qm = query_meta[i];
    std::vector<int> candidates;
    for (int j = 0; j < static_cast<int>(g.rows()); ++j) {
      const RetrievalMeta& gm = gallery_meta[j];
      const bool junk = protocol == Protocol::veri776 && gm.identity == qm.identity && gm.camera == qm.camera;
      if (!junk) candidates.push_back(j);
    }
    RankingResult rank;
    rank.query_index = static_cast<int>(i);
    rank.gallery_order = argsort_row(d, i, candidates);
    int relevant_seen = 0;
    double precision_sum = 0.0;
    int first_hit = -1;
    for (std::size_t pos = 0; pos < rank.gallery_order.size(); ++pos) {
      const int j = rank.gallery_order[pos];
      const bool rel = gallery_meta[j].identity == qm.identity;
      rank.distances.push_back(std::sqrt(d(i, j)));
      rank.relevance.push_back(rel);
      if (rel) {
        ++relevant_seen;
        precision_sum += static_cast<double>(relevant_seen) / static_cast<double>(pos + 1);
        if (first_hit < 0) first_hit = static_cast<int>(pos);
      }
    }
    r.rankings.push_back(std::move(rank));
    if (relevant_seen == 0) {
      ++r.queries_without_relevant;
      continue;
    }
    const double ap = precision_sum / relevant_seen;
    r.average_precision.push_back(ap);
    ap_sum += ap;
    ++r.valid_queries;
    for (int k = first_hit; k < static_cast<int>(r.cmc.size()); ++k) r.cmc[k] += 1.0;
  }
  if (r.valid_queries > 0) {
    r.map_score = ap_sum / r.valid_queries;
    for (double& c : r.cmc) c /= r.valid_queries;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports

std::string EvaluationReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(protocol);
  if (nmi) j["nmi"] = *nmi;
  for (const auto& [k, v] : recall_at) j["recall_at." + std::to_string(k)] = v;
  if (map_score) j["map"] = *map_score;
  if (!cmc.empty()) {
    for (int k : {1, 5, 10})
      if (k <= static_cast<int>(cmc.size())) j["cmc." + std::to_string(k)] = cmc[k - 1];
    j["cmc_curve"] = cmc;
  }
  j["num_queries"] = num_queries;
  j["queries_without_relevant"] = queries_without_relevant;
  return j.dump(2);
}

EvaluationReport EvaluationReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvaluationReport r;
  r.protocol = parse_protocol(j.at("protocol").get<std::string>());
  if (j.contains("nmi")) r.nmi = j["nmi"].get<double>();
  for (const auto& [key, value] : j.items()) {
    if (key.rfind("recall_at.", 0) == 0) r.recall_at[std::stoi(key.substr(10))] = value.get<double>();
  }
  if (j.contains("map")) r.map_score = j["map"].get<double>();
  if (j.contains("cmc_curve")) r.cmc = j["cmc_curve"].get<std::vector<double>>();
  r.num_queries = j.value("num_queries", 0);
  r.queries_without_relevant = j.value("queries_without_relevant", 0);
  return r;
}

void write_rankings_csv(const std::vector<RankingResult>& rankings, const std::filesystem::path& path,
                        std::span<const std::string> query_ids, std::span<const std::string> gallery_ids) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "query_id,rank,gallery_id,distance,relevant\n";
  for (const RankingResult& r : rankings) {
    const std::string qid = query_ids.empty() ? std::to_string(r.query_index) : query_ids[r.query_index];
    for (std::size_t pos = 0; pos < r.gallery_order.size(); ++pos) {
      const int gj = r.gallery_order[pos];
      out << qid << ',' << pos + 1 << ',' << (gallery_ids.empty() ? std::to_string(gj) : gallery_ids[gj]) << ','
          << r.distances[pos] << ',' << (r.relevance[pos] ? 1 : 0) << '\n';
    }
  }
}

}  // namespace vteam
