#include "vteam/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vteam/error.hpp"

namespace vteam {

namespace {

constexpr int kWidth = 800;
constexpr int kHeight = 500;
constexpr int kLeft = 80;
constexpr int kRight = 30;
constexpr int kTop = 50;
constexpr int kBottom = 70;

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Frame {
  cv::Mat canvas{kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255)};
  double x0, x1, y0, y1;

  int px(double x) const { return kLeft + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (kWidth - kLeft - kRight))); }
  int py(double y) const {
    return kHeight - kBottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (kHeight - kTop - kBottom)));
  }
};

void pad_range(double& lo, double& hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi <= lo) {
    const double c = lo;
    lo = c - 0.5;
    hi = c + 0.5;
  }
}

void draw_axes(Frame& f, const PlotLabels& labels, bool x_ticks) {
  const cv::Scalar black(0, 0, 0), grey(220, 220, 220);
  const int font = cv::FONT_HERSHEY_SIMPLEX;
  for (int i = 0; i <= 5; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 5.0;
    cv::line(f.canvas, {kLeft, f.py(y)}, {kWidth - kRight, f.py(y)}, grey, 1);
    cv::putText(f.canvas, number(y), {5, f.py(y) + 5}, font, 0.45, black, 1, cv::LINE_AA);
    if (x_ticks) {
      const double x = f.x0 + (f.x1 - f.x0) * i / 5.0;
      cv::putText(f.canvas, number(x), {f.px(x) - 15, kHeight - kBottom + 20}, font, 0.45, black, 1, cv::LINE_AA);
    }
  }
  cv::rectangle(f.canvas, {kLeft, kTop}, {kWidth - kRight, kHeight - kBottom}, black, 1);
  cv::putText(f.canvas, labels.title, {kLeft, 30}, font, 0.7, black, 1, cv::LINE_AA);
  cv::putText(f.canvas, labels.x, {kWidth / 2 - 40, kHeight - 15}, font, 0.55, black, 1, cv::LINE_AA);
  cv::putText(f.canvas, labels.y, {5, kTop - 10}, font, 0.55, black, 1, cv::LINE_AA);
}

void write_png(const cv::Mat& canvas, const std::filesystem::path& path) {
  if (!cv::imwrite(path.string(), canvas)) throw Error("cannot write plot " + path.string());
}

}  // namespace

void plot_lines(const std::vector<Series>& series, const PlotLabels& labels, const std::filesystem::path& path) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeError("series '" + s.name + "' has mismatched x/y lengths");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  pad_range(x0, x1);
  pad_range(y0, y1);
  Frame f{.x0 = x0, .x1 = x1, .y0 = y0, .y1 = y1};
  draw_axes(f, labels, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    const cv::Scalar color = kPalette[k % std::size(kPalette)];
    for (std::size_t i = 1; i < s.x.size(); ++i)
      cv::line(f.canvas, {f.px(s.x[i - 1]), f.py(s.y[i - 1])}, {f.px(s.x[i]), f.py(s.y[i])}, color, 2, cv::LINE_AA);
    if (s.x.size() == 1) cv::circle(f.canvas, {f.px(s.x[0]), f.py(s.y[0])}, 3, color, -1);
    const int ly = kTop + 20 + 20 * static_cast<int>(k);
    cv::line(f.canvas, {kWidth - kRight - 160, ly - 4}, {kWidth - kRight - 135, ly - 4}, color, 2);
    cv::putText(f.canvas, s.name, {kWidth - kRight - 130, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                cv::LINE_AA);
  }
  write_png(f.canvas, path);
}

void plot_bars(const std::vector<Bar>& bars, const PlotLabels& labels, const std::filesystem::path& path) {
  double y1 = 0.0;
  for (const Bar& b : bars)
    if (std::isfinite(b.value)) y1 = std::max(y1, b.value);
  Frame f{.x0 = 0.0, .x1 = static_cast<double>(std::max<std::size_t>(1, bars.size())), .y0 = 0.0,
          .y1 = y1 > 0.0 ? y1 * 1.1 : 1.0};
  draw_axes(f, labels, false);
  for (std::size_t k = 0; k < bars.size(); ++k) {
    const double v = std::isfinite(bars[k].value) ? std::max(0.0, bars[k].value) : 0.0;
    const cv::Point a(f.px(k + 0.15), f.py(v)), b(f.px(k + 0.85), f.py(0.0));
    cv::rectangle(f.canvas, a, b, kPalette[k % std::size(kPalette)], cv::FILLED);
    cv::putText(f.canvas, number(bars[k].value), {a.x, a.y - 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                cv::LINE_AA);
    cv::putText(f.canvas, bars[k].label, {a.x, kHeight - kBottom + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                cv::LINE_AA);
  }
  write_png(f.canvas, path);
}

}  // namespace vteam
