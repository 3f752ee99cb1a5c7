#include "vteam/image.hpp"

#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vteam/error.hpp"

namespace vteam {
namespace {

cv::Mat to_mat8(const Image& image) {
  cv::Mat mat(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      auto& px = mat.at<cv::Vec3b>(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(image.at(y, x, ch), 0.0f, 1.0f);
        px[2 - ch] = static_cast<unsigned char>(std::lround(v * 255.0f));  // BGR
      }
    }
  return mat;
}

Image from_mat8(const cv::Mat& mat) {
  Image image(mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y)
    for (int x = 0; x < mat.cols; ++x) {
      const auto& px = mat.at<cv::Vec3b>(y, x);
      for (int ch = 0; ch < 3; ++ch) image.at(y, x, ch) = static_cast<float>(px[2 - ch]) / 255.0f;
    }
  return image;
}

}  // namespace

Image load_image(const std::filesystem::path& path, int size) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.empty()) throw IngestError("cannot decode image " + path.string());
  if (mat.rows != size || mat.cols != size) {
    const int interp = (mat.rows > size || mat.cols > size) ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(mat, mat, cv::Size(size, size), 0, 0, interp);
  }
  return from_mat8(mat);
}

void save_image(const Image& image, const std::filesystem::path& path) {
  if (!cv::imwrite(path.string(), to_mat8(image))) {
    throw IngestError("cannot write image " + path.string());
  }
}

Image quantize_8bit(const Image& image) { return from_mat8(to_mat8(image)); }

Image resize_image(const Image& image, int size) {
  if (image.height == size && image.width == size) return image;
  cv::Mat src(image.height, image.width, CV_32FC3, const_cast<float*>(image.pixels.data()));
  cv::Mat dst;
  const int interp = (image.height > size || image.width > size) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(src, dst, cv::Size(size, size), 0, 0, interp);
  Image out(size, size);
  std::memcpy(out.pixels.data(), dst.ptr<float>(0), out.pixels.size() * sizeof(float));
  return out;
}

}  // namespace vteam
