#pragma once

#include <string>
#include <utility>
#include <vector>

namespace hydet {

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string svg_line_plot(const std::vector<PlotSeries>& series, const std::string& title,
                          const std::string& x_label, const std::string& y_label);

}  // namespace hydet
