#pragma once

#include <fstream>

#include "flowdet/common.hpp"

namespace flowdet {

// Minimal static SVG plotting: enough for PR curves, loss curves and FLOP
// bars. No styling knobs; reports are meant to be glanced at, not themed.

struct SvgSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

inline const char* series_color(size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[i % 8];
}

}  // namespace detail

inline void svg_line_chart(const std::string& path, const std::string& title,
                           const std::vector<SvgSeries>& series, const std::string& x_label = "",
                           const std::string& y_label = "") {
  const double width = 640, height = 420, ml = 60, mr = 20, mt = 40, mb = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x0 > x1) {
    x0 = 0;
    x1 = 1;
  }
  if (y0 > y1) {
    y0 = 0;
    y1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb); };
  std::ofstream os(path);
  if (!os) throw IoError("svg_line_chart: cannot open " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << width / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
     << "</text>\n";
  os << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='"
     << height - mb << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb
     << "' stroke='black'/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x='" << px(xv) << "' y='" << height - mb + 18
       << "' text-anchor='middle' font-size='11'>" << xv << "</text>\n";
    os << "<text x='" << ml - 8 << "' y='" << py(yv) + 4
       << "' text-anchor='end' font-size='11'>" << yv << "</text>\n";
  }
  if (!x_label.empty())
    os << "<text x='" << (ml + width - mr) / 2 << "' y='" << height - 12
       << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
  if (!y_label.empty())
    os << "<text x='16' y='" << (mt + height - mb) / 2
       << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
       << (mt + height - mb) / 2 << ")'>" << y_label << "</text>\n";
  for (size_t s = 0; s < series.size(); ++s) {
    os << "<polyline fill='none' stroke='" << detail::series_color(s) << "' stroke-width='1.5' points='";
    for (auto [x, y] : series[s].points) os << px(x) << "," << py(y) << " ";
    os << "'/>\n";
    os << "<text x='" << width - mr - 6 << "' y='" << mt + 16 * double(s + 1)
       << "' text-anchor='end' font-size='11' fill='" << detail::series_color(s) << "'>"
       << series[s].name << "</text>\n";
  }
  os << "</svg>\n";
}

inline void svg_bar_chart(const std::string& path, const std::string& title,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values, const std::string& y_label = "") {
  if (labels.size() != values.size()) throw ValueError("svg_bar_chart: label/value count mismatch");
  const double width = 640, height = 420, ml = 70, mr = 20, mt = 40, mb = 60;
  double vmax = 1e-12;
  for (double v : values) vmax = std::max(vmax, v);
  std::ofstream os(path);
  if (!os) throw IoError("svg_bar_chart: cannot open " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << width / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
     << "</text>\n";
  const double span = width - ml - mr;
  const double bw = span / double(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const double h = (height - mt - mb) * values[i] / vmax;
    const double x = ml + double(i) * bw + bw * 0.15;
    os << "<rect x='" << x << "' y='" << height - mb - h << "' width='" << bw * 0.7
       << "' height='" << h << "' fill='" << detail::series_color(i) << "'/>\n";
    os << "<text x='" << x + bw * 0.35 << "' y='" << height - mb + 16
       << "' text-anchor='middle' font-size='11'>" << labels[i] << "</text>\n";
    os << "<text x='" << x + bw * 0.35 << "' y='" << height - mb - h - 4
       << "' text-anchor='middle' font-size='10'>" << values[i] << "</text>\n";
  }
  if (!y_label.empty())
    os << "<text x='16' y='" << height / 2 << "' text-anchor='middle' font-size='12' "
       << "transform='rotate(-90 16 " << height / 2 << ")'>" << y_label << "</text>\n";
  os << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='"
     << height - mb << "' stroke='black'/>\n</svg>\n";
}

}  // namespace flowdet
