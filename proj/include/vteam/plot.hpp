#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vteam {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Bar {
  std::string label;
  double value = 0.0;
};

struct PlotLabels {
  std::string title;
  std::string x;
  std::string y;
};

/// Line chart written as PNG.
void plot_lines(const std::vector<Series>& series, const PlotLabels& labels, const std::filesystem::path& path);

/// Bar chart written as PNG.
void plot_bars(const std::vector<Bar>& bars, const PlotLabels& labels, const std::filesystem::path& path);

}  // namespace vteam
