#pragma once

#include <random>
#include <utility>

#include "vteam/dataset.hpp"

namespace vteam {

struct ErasingParams {
  double probability = 0.5;
  std::pair<double, double> area_range{0.02, 0.4};
  std::pair<double, double> aspect_range{0.3, 3.33};

  void validate() const;
};

/// With the given probability, overwrites one rectangle with uniform random
/// values. The rectangle's area fraction lies in area_range and its
/// height/width ratio in aspect_range. Labels are never touched. If no
/// rectangle fits after 100 attempts the sample is returned unchanged.
Sample random_erase(const Sample& sample, const ErasingParams& params, std::mt19937_64& rng);

struct ColourParams {
  double grey_probability = 0.3;
  double brightness = 0.0;  ///< scale drawn from [1 - b, 1 + b]
  double contrast = 0.0;    ///< deviation from the image mean scaled by [1 - c, 1 + c]

  void validate() const;
};

/// Applies one of the six RGB channel orders uniformly at random; then with
/// probability grey_probability replaces every pixel by its channel mean; then
/// applies random contrast and brightness, clamping to [0,1].
Sample colour_augment(const Sample& sample, const ColourParams& params, std::mt19937_64& rng);

}  // namespace vteam
