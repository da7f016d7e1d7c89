#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace csmri::cli {

struct Series {
  std::string label;
  std::vector<double> xs, ys;
};

// Fixed-size SVG line chart; byte-stable output for identical inputs (no
// timestamps, fixed number formatting).
void write_line_chart_svg(const std::filesystem::path& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

}  // namespace csmri::cli
