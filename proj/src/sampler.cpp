#include "vteam/sampler.hpp"

#include <algorithm>
#include <map>

#include "vteam/error.hpp"

namespace vteam {

TripletBatch sample_pk_batch(const DatasetView& view, int P, int K, std::mt19937_64& rng, Attribute label) {
  if (P < 1 || K < 1) throw ConfigError("P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < view.samples().size(); ++i) {
    const Sample& s = view.samples()[i];
    if (s.split != Split::train) continue;
    const auto v = s.attribute(label);
    if (!v) throw ConfigError("train sample lacks a " + to_string(label) + " label");
    by_class[*v].push_back(i);
  }
  if (static_cast<int>(by_class.size()) < P) {
    throw ConfigError("PK sampling needs P=" + std::to_string(P) + " classes but the train split has " +
                      std::to_string(by_class.size()));
  }
  std::vector<int> classes;
  for (const auto& [c, idx] : by_class) classes.push_back(c);
  // Partial Fisher-Yates: the first P entries become the draw.
  for (int i = 0; i < P; ++i) {
    const int j = std::uniform_int_distribution<int>(i, static_cast<int>(classes.size()) - 1)(rng);
    std::swap(classes[i], classes[j]);
  }
  TripletBatch batch;
  batch.P = P;
  batch.K = K;
  for (int i = 0; i < P; ++i) {
    std::vector<std::size_t> pool = by_class[classes[i]];
    const int n = static_cast<int>(pool.size());
    for (int k = 0; k < K; ++k) {
      std::size_t pick;
      if (n >= K) {
        const int j = std::uniform_int_distribution<int>(k, n - 1)(rng);
        std::swap(pool[k], pool[j]);
        pick = pool[k];
      } else {
        pick = pool[std::uniform_int_distribution<int>(0, n - 1)(rng)];
      }
      batch.samples.push_back(pick);
      batch.labels.push_back(classes[i]);
    }
  }
  return batch;
}

std::vector<std::array<int, 3>> enumerate_triplets(const TripletBatch& batch) {
  std::vector<std::array<int, 3>> out;
  const int n = static_cast<int>(batch.labels.size());
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p) {
      if (p == a || batch.labels[p] != batch.labels[a]) continue;
      for (int q = 0; q < n; ++q)
        if (batch.labels[q] != batch.labels[a]) out.push_back({a, p, q});
    }
  return out;
}

}  // namespace vteam
