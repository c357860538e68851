#pragma once

// Plain SVG figures: grouped metric bars with significance stars, step/line plots (KM curves,
// calibration, risk trajectories) and horizontal attribution bars. Output bytes depend only on inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "chronoscope/core/error.hpp"

namespace chronoscope::report {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", std::abs(v) < 5e-3 ? 0.0 : v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

inline constexpr const char* kPalette[] = {"#3b6ea5", "#d1793a", "#5b9e5b", "#b54a4a", "#7d63a8", "#8a7560"};

inline const char* color(std::size_t i) { return kPalette[i % (sizeof kPalette / sizeof kPalette[0])]; }

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {
    body_ = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) +
            " " + num(h) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    body_ += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0, bool dashed = false) {
    body_ += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) + "\" stroke=\"" + stroke +
             "\" stroke-width=\"" + num(width) + "\"" + (dashed ? " stroke-dasharray=\"4 3\"" : "") + "/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(std::max(w, 0.0)) + "\" height=\"" +
             num(std::max(h, 0.0)) + "\" fill=\"" + fill + "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    body_ += "<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"" + num(r) + "\" fill=\"" + fill + "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, double width = 1.5) {
    body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" + num(width) + "\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) body_ += (i ? " " : "") + num(pts[i].first) + "," + num(pts[i].second);
    body_ += "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start", int size = 11) {
    body_ += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\" font-size=\"" + std::to_string(size) + "\">" +
             escape(s) + "</text>\n";
  }
  std::string str() const { return body_ + "</svg>\n"; }
  double width() const { return w_; }
  double height() const { return h_; }

 private:
  double w_, h_;
  std::string body_;
};

// ---------------------------------------------------------------- grouped bars

struct Bar {
  std::string model;
  double value = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

struct BarGroup {
  std::string label;
  std::vector<Bar> bars;
  bool significant = false;  // first two bars differ at p ≤ 0.05
};

// One group per task; error bars show the CI, a star marks significant groups.
inline std::string grouped_bars(const std::string& title, const std::string& y_label, const std::vector<BarGroup>& groups,
                                double y_min = 0.0, double y_max = 1.0) {
  require(y_max > y_min, "grouped_bars: empty value range");
  std::vector<std::string> models;
  for (const auto& g : groups) {
    for (const auto& b : g.bars) {
      if (std::find(models.begin(), models.end(), b.model) == models.end()) models.push_back(b.model);
    }
  }
  const double left = 60, top = 40, plot_h = 220, group_w = std::max<double>(40.0, 24.0 * static_cast<double>(models.size()) + 20);
  const double plot_w = std::max<double>(200.0, group_w * static_cast<double>(groups.size()));
  Svg s(left + plot_w + 160, top + plot_h + 90);
  s.text(left, 20, title, "start", 13);
  auto ymap = [&](double v) { return top + plot_h * (1.0 - (std::clamp(v, y_min, y_max) - y_min) / (y_max - y_min)); };
  for (int k = 0; k <= 5; ++k) {
    const double v = y_min + (y_max - y_min) * k / 5.0;
    s.line(left, ymap(v), left + plot_w, ymap(v), "#dddddd");
    s.text(left - 6, ymap(v) + 4, num(v), "end");
  }
  s.line(left, top, left, top + plot_h, "black");
  s.line(left, top + plot_h, left + plot_w, top + plot_h, "black");
  s.text(14, top + plot_h / 2, y_label, "start");
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const double x0 = left + group_w * static_cast<double>(gi) + 10;
    double top_y = top + plot_h;
    for (const auto& b : g.bars) {
      const auto mi = static_cast<std::size_t>(std::find(models.begin(), models.end(), b.model) - models.begin());
      const double x = x0 + 24.0 * static_cast<double>(mi);
      s.rect(x, ymap(b.value), 20, top + plot_h - ymap(b.value), color(mi));
      s.line(x + 10, ymap(b.lo), x + 10, ymap(b.hi), "black");
      s.line(x + 6, ymap(b.hi), x + 14, ymap(b.hi), "black");
      s.line(x + 6, ymap(b.lo), x + 14, ymap(b.lo), "black");
      top_y = std::min(top_y, ymap(b.hi));
    }
    if (g.significant) s.text(x0 + 12.0 * static_cast<double>(g.bars.size()), top_y - 6, "*", "middle", 14);
    s.text(x0 + 12.0 * static_cast<double>(g.bars.size()), top + plot_h + 16, g.label, "middle");
  }
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const double y = top + 14.0 * static_cast<double>(mi);
    s.rect(left + plot_w + 20, y, 10, 10, color(mi));
    s.text(left + plot_w + 36, y + 9, models[mi]);
  }
  s.text(left, top + plot_h + 40, "* p <= 0.05 (unpaired bootstrap)");
  return s.str();
}

// ---------------------------------------------------------------- line plots

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool step = false;    // right-continuous step function
  bool points = false;  // draw markers instead of a line
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
  bool diagonal = false;               // reference y = x
  std::vector<double> vertical_marks;  // e.g. encounters
};

inline std::string line_plot(const Axes& a, const std::vector<Series>& series) {
  require(a.x_max > a.x_min && a.y_max > a.y_min, "line_plot: empty axis range");
  const double left = 60, top = 40, w = 420, h = 240;
  Svg s(left + w + 170, top + h + 60);
  s.text(left, 20, a.title, "start", 13);
  auto X = [&](double v) { return left + w * (std::clamp(v, a.x_min, a.x_max) - a.x_min) / (a.x_max - a.x_min); };
  auto Y = [&](double v) { return top + h * (1.0 - (std::clamp(v, a.y_min, a.y_max) - a.y_min) / (a.y_max - a.y_min)); };
  for (int k = 0; k <= 4; ++k) {
    const double yv = a.y_min + (a.y_max - a.y_min) * k / 4.0, xv = a.x_min + (a.x_max - a.x_min) * k / 4.0;
    s.line(left, Y(yv), left + w, Y(yv), "#eeeeee");
    s.text(left - 6, Y(yv) + 4, num(yv), "end");
    s.text(X(xv), top + h + 16, num(xv), "middle");
  }
  for (double m : a.vertical_marks) s.line(X(m), top, X(m), top + h, "#bbbbbb", 1.0, true);
  s.line(left, top, left, top + h, "black");
  s.line(left, top + h, left + w, top + h, "black");
  if (a.diagonal) s.line(X(a.x_min), Y(a.x_min), X(a.x_max), Y(a.x_max), "#888888", 1.0, true);
  s.text(left + w / 2, top + h + 36, a.x_label, "middle");
  s.text(8, top - 10, a.y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& sr = series[i];
    require(sr.x.size() == sr.y.size(), "line_plot: series '" + sr.name + "' has mismatched coordinates");
    if (sr.points) {
      for (std::size_t k = 0; k < sr.x.size(); ++k) s.circle(X(sr.x[k]), Y(sr.y[k]), 3, color(i));
    } else {
      std::vector<std::pair<double, double>> pts;
      for (std::size_t k = 0; k < sr.x.size(); ++k) {
        if (sr.step && k > 0) pts.push_back({X(sr.x[k]), Y(sr.y[k - 1])});
        pts.push_back({X(sr.x[k]), Y(sr.y[k])});
      }
      s.polyline(pts, color(i));
    }
    s.rect(left + w + 20, top + 14.0 * static_cast<double>(i), 10, 10, color(i));
    s.text(left + w + 36, top + 14.0 * static_cast<double>(i) + 9, sr.name);
  }
  return s.str();
}

// ---------------------------------------------------------------- horizontal bars

inline std::string horizontal_bars(const std::string& title, const std::vector<std::string>& labels, const std::vector<double>& values) {
  require(labels.size() == values.size(), "horizontal_bars: labels and values differ in length");
  double m = 1e-12;
  for (double v : values) m = std::max(m, std::abs(v));
  const double left = 200, top = 40, w = 300, row = 16;
  Svg s(left + w + 40, top + row * static_cast<double>(labels.size()) + 30);
  s.text(10, 20, title, "start", 13);
  const double zero = left + w / 2;
  s.line(zero, top - 4, zero, top + row * static_cast<double>(labels.size()), "black");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = top + row * static_cast<double>(i);
    const double len = (w / 2) * values[i] / m;
    s.rect(len >= 0 ? zero : zero + len, y + 2, std::abs(len), row - 4, values[i] >= 0 ? "#b54a4a" : "#3b6ea5");
    s.text(left - 6, y + row - 4, labels[i], "end");
  }
  return s.str();
}

}  // namespace chronoscope::report
