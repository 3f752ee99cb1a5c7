#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vteam {

/// Predicted and ground-truth partitions over the same index set, as labels.
struct ClusterAssignment {
  std::vector<int> predicted;
  std::vector<int> truth;
};

/// 2 I(P;T) / (H(P) + H(T)) in nats. Two single-cluster partitions score 1.
double nmi(const ClusterAssignment& assignment);

struct KMeansResult {
  std::vector<int> labels;
  Eigen::MatrixXd centers;
  double wcss = 0.0;
};

struct KMeansOptions {
  int restarts = 10;
  int max_iterations = 300;
  std::uint64_t seed = 0;
};

/// Best-of-restarts Lloyd iterations (k-means++ seeding) by within-cluster
/// sum of squares. Deterministic for a given seed.
KMeansResult kmeans_cluster(const Eigen::MatrixXd& points, int k, const KMeansOptions& options = {});

/// Leave-one-out top-k retrieval accuracy: a query succeeds at k when any of
/// its k nearest other samples shares its label. Ties go to the lower index.
std::map<int, double> recall_at_k(const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                                  std::span<const int> ks, bool normalize = true);

enum class Protocol { cars196_zsl, veri776 };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& s);

struct RetrievalMeta {
  int identity = 0;
  std::optional<int> camera;
};

struct RankingResult {
  int query_index = 0;
  std::vector<int> gallery_order;  ///< ascending distance, junk removed
  std::vector<double> distances;   ///< aligned with gallery_order
  std::vector<bool> relevance;     ///< aligned with gallery_order
};

struct MapCmcResult {
  double map_score = 0.0;
  std::vector<double> cmc;  ///< cmc[k-1] = CMC-k
  std::vector<double> average_precision;  ///< per valid query
  int valid_queries = 0;
  int queries_without_relevant = 0;
  std::vector<RankingResult> rankings;
};

/// Gallery ranking per query. Under veri776, gallery items sharing both
/// identity and camera with the query are removed before ranking. Queries
/// without any relevant gallery item are excluded from mAP/CMC and counted.
MapCmcResult map_cmc(const Eigen::MatrixXd& query, const Eigen::MatrixXd& gallery,
                     std::span<const RetrievalMeta> query_meta, std::span<const RetrievalMeta> gallery_meta,
                     Protocol protocol, int max_rank = 50, bool normalize = true);

/// Aggregate numbers for one evaluation run.
struct EvaluationReport {
  Protocol protocol = Protocol::cars196_zsl;
  std::optional<double> nmi;
  std::map<int, double> recall_at;
  std::optional<double> map_score;
  std::vector<double> cmc;
  int num_queries = 0;
  int queries_without_relevant = 0;

  /// Flat JSON object: "nmi", "recall_at.<k>", "map", "cmc.<k>" for k in
  /// {1,5,10}, the whole curve under "cmc_curve", plus bookkeeping.
  std::string to_json() const;
  static EvaluationReport from_json(const std::string& text);
};

/// CSV: query_id,rank,gallery_id,distance,relevant
void write_rankings_csv(const std::vector<RankingResult>& rankings, const std::filesystem::path& path,
                        std::span<const std::string> query_ids = {}, std::span<const std::string> gallery_ids = {});

}  // namespace vteam
