#include "vteam/augment.hpp"

#include <algorithm>
#include <cmath>

#include "vteam/error.hpp"

namespace vteam {

void ErasingParams::validate() const {
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("erasing probability must be in [0,1]");
  const auto [lo, hi] = area_range;
  if (!(lo > 0.0 && lo <= hi && hi < 1.0)) throw ConfigError("erasing area range must satisfy 0 < lo <= hi < 1");
  const auto [alo, ahi] = aspect_range;
  if (!(alo > 0.0 && alo <= ahi)) throw ConfigError("erasing aspect range must satisfy 0 < lo <= hi");
}

Sample random_erase(const Sample& sample, const ErasingParams& params, std::mt19937_64& rng) {
  params.validate();
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Sample out = sample;
  if (u01(rng) >= params.probability) return out;
  const int h = sample.image.height, w = sample.image.width;
  const double area = static_cast<double>(h) * w;
  const double log_lo = std::log(params.aspect_range.first), log_hi = std::log(params.aspect_range.second);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = area * (params.area_range.first +
                                  (params.area_range.second - params.area_range.first) * u01(rng));
    const double aspect = std::exp(log_lo + (log_hi - log_lo) * u01(rng));
    const int eh = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int ew = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (eh < 1 || ew < 1 || eh >= h || ew >= w) continue;
    // Rounding can push the realised rectangle outside the requested ranges.
    const double frac = static_cast<double>(eh) * ew / area;
    const double ratio = static_cast<double>(eh) / ew;
    if (frac < params.area_range.first || frac > params.area_range.second) continue;
    if (ratio < params.aspect_range.first || ratio > params.aspect_range.second) continue;
    const int y0 = std::uniform_int_distribution<int>(0, h - eh)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, w - ew)(rng);
    std::uniform_real_distribution<float> value(0.0f, 1.0f);
    for (int y = y0; y < y0 + eh; ++y)
      for (int x = x0; x < x0 + ew; ++x)
        for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = value(rng);
    return out;
  }
  return out;
}

void ColourParams::validate() const {
  if (!(grey_probability >= 0.0 && grey_probability <= 1.0)) throw ConfigError("grey probability must be in [0,1]");
  if (!(brightness >= 0.0 && brightness < 1.0)) throw ConfigError("brightness jitter must be in [0,1)");
  if (!(contrast >= 0.0 && contrast < 1.0)) throw ConfigError("contrast jitter must be in [0,1)");
}

Sample colour_augment(const Sample& sample, const ColourParams& params, std::mt19937_64& rng) {
  params.validate();
  static constexpr int kOrders[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  const int* order = kOrders[std::uniform_int_distribution<int>(0, 5)(rng)];
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const bool grey = u01(rng) < params.grey_probability;
  const double contrast = 1.0 + params.contrast * (2.0 * u01(rng) - 1.0);
  const double brightness = 1.0 + params.brightness * (2.0 * u01(rng) - 1.0);
  Sample out = sample;
  Image& img = out.image;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float c[3] = {sample.image.at(y, x, 0), sample.image.at(y, x, 1), sample.image.at(y, x, 2)};
      const float mean = (c[0] + c[1] + c[2]) / 3.0f;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = grey ? mean : c[order[ch]];
    }
  }
  if (contrast != 1.0 || brightness != 1.0) {
    double mean = 0.0;
    for (float v : img.pixels) mean += v;
    mean /= static_cast<double>(img.pixels.size());
    for (float& v : img.pixels) {
      v = static_cast<float>(std::clamp(((v - mean) * contrast + mean) * brightness, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace vteam
