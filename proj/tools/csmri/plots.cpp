#include "csmri/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "csmri/errors.hpp"
#include "csmri/io.hpp"

namespace csmri::cli {
namespace {

constexpr int kWidth = 860, kHeight = 520;
constexpr int kLeft = 70, kRight = 210, kTop = 50, kBottom = 60;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_line_chart_svg(const std::filesystem::path& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      x_min = std::min(x_min, s.xs[i]);
      x_max = std::max(x_max, s.xs[i]);
      y_min = std::min(y_min, s.ys[i]);
      y_max = std::max(y_max, s.ys[i]);
    }
  }
  if (!std::isfinite(x_min)) {
    x_min = 0;
    x_max = 1;
    y_min = 0;
    y_max = 1;
  }
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;

  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * plot_w; };
  auto sy = [&](double y) { return kTop + plot_h - (y - y_min) / (y_max - y_min) * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" font-family=\"monospace\" font-size=\"13\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kLeft << "\" y=\"25\" font-size=\"16\">" << escape(title)
      << "</text>\n";

  // Frame and ticks.
  svg << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << fmt(plot_w)
      << "\" height=\"" << fmt(plot_h) << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double xv = x_min + (x_max - x_min) * t / 5.0;
    const double yv = y_min + (y_max - y_min) * t / 5.0;
    svg << "<line x1=\"" << fmt(sx(xv)) << "\" y1=\"" << kTop + plot_h << "\" x2=\""
        << fmt(sx(xv)) << "\" y2=\"" << fmt(kTop + plot_h + 5) << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"" << fmt(sx(xv) - 12) << "\" y=\"" << fmt(kTop + plot_h + 22) << "\">"
        << fmt(xv) << "</text>\n";
    svg << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << fmt(sy(yv)) << "\" x2=\"" << kLeft
        << "\" y2=\"" << fmt(sy(yv)) << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"8\" y=\"" << fmt(sy(yv) + 4) << "\">" << fmt(yv) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(kLeft + plot_w / 2 - 20) << "\" y=\"" << kHeight - 15 << "\">"
      << escape(x_label) << "</text>\n";
  svg << "<text x=\"14\" y=\"" << kTop - 10 << "\">" << escape(y_label) << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      svg << fmt(sx(s.xs[i])) << ',' << fmt(sy(s.ys[i])) << ' ';
    }
    svg << "\"/>\n";
    const double ly = kTop + 18.0 * static_cast<double>(si);
    svg << "<rect x=\"" << kWidth - kRight + 16 << "\" y=\"" << fmt(ly + 6)
        << "\" width=\"12\" height=\"4\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << kWidth - kRight + 34 << "\" y=\"" << fmt(ly + 12) << "\">"
        << escape(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  csmri::write_text(path, svg.str());
}

}  // namespace csmri::cli
