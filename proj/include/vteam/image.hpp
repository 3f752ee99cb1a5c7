#pragma once

#include <filesystem>
#include <vector>

namespace vteam {

/// H x W x 3 image with interleaved RGB intensities in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int ch) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }
  float at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

/// Decodes any format OpenCV reads and resizes to size x size (area
/// interpolation when shrinking, bilinear otherwise). Throws IngestError.
Image load_image(const std::filesystem::path& path, int size);
/// Writes an 8-bit image; the encoder is picked from the extension.
void save_image(const Image& image, const std::filesystem::path& path);
/// Quantises to 8 bits, exactly as save_image + load_image would.
Image quantize_8bit(const Image& image);
Image resize_image(const Image& image, int size);

}  // namespace vteam
