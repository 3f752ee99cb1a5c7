#pragma once

#include <array>
#include <random>
#include <vector>

#include "vteam/dataset.hpp"

namespace vteam {

/// P identities x K instances drawn from the train split. `samples` indexes
/// DatasetView::samples(); `labels` is the grouping label of each entry.
/// Triplets are mined from it at loss time.
struct TripletBatch {
  std::vector<std::size_t> samples;
  std::vector<int> labels;
  int P = 0;
  int K = 0;
};

/// Draws P distinct classes of `label` (identity by default) uniformly without
/// replacement, then K images per class (with replacement when a class has
/// fewer than K images). Throws if the train split has fewer than P classes.
TripletBatch sample_pk_batch(const DatasetView& view, int P, int K, std::mt19937_64& rng,
                             Attribute label = Attribute::identity);

/// Every valid (anchor, positive, negative) position triple of a batch.
std::vector<std::array<int, 3>> enumerate_triplets(const TripletBatch& batch);

}  // namespace vteam
