/*
 * Copyright 2026 The bnnrobust Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "bnnr/plot.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace bnnr {

namespace {

#include "glyphs.inc"

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr std::array<Rgb, 8> kPalette = {{{31, 119, 180},
                                          {255, 127, 14},
                                          {44, 160, 44},
                                          {214, 39, 40},
                                          {148, 103, 189},
                                          {140, 86, 75},
                                          {227, 119, 194},
                                          {127, 127, 127}}};

std::string hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(3);
  ss << v;
  return ss.str();
}

// Plot area in pixels shared by both back ends.
struct Frame {
  int width = 720, height = 480;
  int left = 70, right = 170, top = 40, bottom = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), pix_(static_cast<std::size_t>(w * h * 3), 255) {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    auto* p = &pix_[static_cast<std::size_t>((y * w_ + x) * 3)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }

  void fill_rect(double x0, double y0, double x1, double y1, Rgb c) {
    for (int y = static_cast<int>(std::lround(std::min(y0, y1))); y < std::lround(std::max(y0, y1)); ++y) {
      for (int x = static_cast<int>(std::lround(std::min(x0, x1))); x < std::lround(std::max(x0, x1)); ++x) {
        set(x, y, c);
      }
    }
  }

  void line(double x0, double y0, double x1, double y1, Rgb c, int thickness = 1) {
    const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    const int steps = std::max(1, static_cast<int>(std::ceil(len)));
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      for (int dy = 0; dy < thickness; ++dy) {
        for (int dx = 0; dx < thickness; ++dx) set(x + dx - thickness / 2, y + dy - thickness / 2, c);
      }
    }
  }

  void text(double x, double y, const std::string& s, Rgb c) {
    int cx = static_cast<int>(std::lround(x));
    const int cy = static_cast<int>(std::lround(y)) - kGlyphHeight + 2;
    for (char ch : s) {
      const int code = static_cast<unsigned char>(ch);
      if (code >= 32 && code < 127) {
        const auto& g = kGlyphs[code - 32];
        for (int row = 0; row < kGlyphHeight; ++row) {
          for (int col = 0; col < kGlyphWidth; ++col) {
            if (g[row] >> (kGlyphWidth - 1 - col) & 1) set(cx + col, cy + row, c);
          }
        }
      }
      cx += kGlyphWidth;
    }
  }

  static int text_width(const std::string& s) { return static_cast<int>(s.size()) * kGlyphWidth; }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw Error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw Error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h_; ++y) {
      png_write_row(png, const_cast<png_bytep>(&pix_[static_cast<std::size_t>(y * w_ * 3)]));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }

 private:
  int w_, h_;
  std::vector<std::uint8_t> pix_;
};

constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kGrid{220, 220, 220};

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
}

std::vector<double> ticks(double lo, double hi) {
  std::vector<double> t;
  for (int i = 0; i <= 5; ++i) t.push_back(lo + (hi - lo) * i / 5.0);
  return t;
}

// Axes, grid, tick labels and titles in SVG.
void svg_axes(std::ostringstream& s, const Frame& f, const std::string& title, const std::string& xl,
              const std::string& yl) {
  s << "<rect x=\"0\" y=\"0\" width=\"" << f.width << "\" height=\"" << f.height << "\" fill=\"white\"/>\n";
  for (double t : ticks(f.x0, f.x1)) {
    s << "<line x1=\"" << f.px(t) << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << f.px(t) << "\" y2=\"" << f.py(f.y1)
      << "\" stroke=\"" << hex(kGrid) << "\"/>\n";
    s << "<text x=\"" << f.px(t) << "\" y=\"" << f.py(f.y0) + 18 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << fmt(t) << "</text>\n";
  }
  for (double t : ticks(f.y0, f.y1)) {
    s << "<line x1=\"" << f.px(f.x0) << "\" y1=\"" << f.py(t) << "\" x2=\"" << f.px(f.x1) << "\" y2=\"" << f.py(t)
      << "\" stroke=\"" << hex(kGrid) << "\"/>\n";
    s << "<text x=\"" << f.px(f.x0) - 6 << "\" y=\"" << f.py(t) + 4 << "\" text-anchor=\"end\" font-size=\"12\">"
      << fmt(t) << "</text>\n";
  }
  s << "<rect x=\"" << f.left << "\" y=\"" << f.top << "\" width=\"" << f.width - f.left - f.right
    << "\" height=\"" << f.height - f.top - f.bottom << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << f.width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
    << "</text>\n";
  s << "<text x=\"" << (f.left + f.width - f.right) / 2 << "\" y=\"" << f.height - 18
    << "\" text-anchor=\"middle\" font-size=\"13\">" << escape(xl) << "</text>\n";
  s << "<text x=\"18\" y=\"" << f.height / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
    << f.height / 2 << ")\">" << escape(yl) << "</text>\n";
}

void png_axes(Canvas& c, const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  for (double t : ticks(f.x0, f.x1)) {
    c.line(f.px(t), f.py(f.y0), f.px(t), f.py(f.y1), kGrid);
    const std::string s = fmt(t);
    c.text(f.px(t) - Canvas::text_width(s) / 2.0, f.py(f.y0) + 18, s, kBlack);
  }
  for (double t : ticks(f.y0, f.y1)) {
    c.line(f.px(f.x0), f.py(t), f.px(f.x1), f.py(t), kGrid);
    const std::string s = fmt(t);
    c.text(f.px(f.x0) - 6 - Canvas::text_width(s), f.py(t) + 4, s, kBlack);
  }
  c.line(f.left, f.top, f.width - f.right, f.top, kBlack);
  c.line(f.left, f.height - f.bottom, f.width - f.right, f.height - f.bottom, kBlack);
  c.line(f.left, f.top, f.left, f.height - f.bottom, kBlack);
  c.line(f.width - f.right, f.top, f.width - f.right, f.height - f.bottom, kBlack);
  c.text(f.width / 2.0 - Canvas::text_width(title) / 2.0, 24, title, kBlack);
  c.text((f.left + f.width - f.right) / 2.0 - Canvas::text_width(xl) / 2.0, f.height - 18, xl, kBlack);
  c.text(4, f.top - 8, yl, kBlack);
}

Frame line_frame(const LineFigure& fig) {
  Frame f;
  f.x0 = fig.x_min;
  f.x1 = fig.x_max;
  f.y0 = fig.y_min;
  f.y1 = fig.y_max;
  return f;
}

Frame hist_frame(const HistogramFigure& fig) {
  Frame f;
  f.x0 = fig.edges.front();
  f.x1 = fig.edges.back();
  if (!(f.x1 > f.x0)) f.x1 = f.x0 + 1.0;
  std::size_t peak = 1;
  for (const auto& c : fig.counts) {
    for (std::size_t v : c) peak = std::max(peak, v);
  }
  f.y0 = 0.0;
  f.y1 = static_cast<double>(peak);
  return f;
}

}  // namespace

std::vector<double> shared_bin_edges(const std::vector<std::vector<double>>& groups, std::size_t bins) {
  if (bins == 0) throw ArgumentError("histogram needs at least one bin");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& g : groups) {
    for (double v : g) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return edges;
}

std::vector<std::size_t> histogram_counts(const std::vector<double>& values, const std::vector<double>& edges) {
  if (edges.size() < 2) throw ArgumentError("histogram needs at least two edges");
  const std::size_t bins = edges.size() - 1;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    const auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t idx = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    ++counts[std::min(idx, bins - 1)];
  }
  return counts;
}

HistogramFigure make_histogram(std::string title, std::string x_label, std::vector<std::string> labels,
                               const std::vector<std::vector<double>>& groups, std::size_t bins) {
  HistogramFigure h;
  h.title = std::move(title);
  h.x_label = std::move(x_label);
  h.labels = std::move(labels);
  h.edges = shared_bin_edges(groups, bins);
  for (const auto& g : groups) h.counts.push_back(histogram_counts(g, h.edges));
  return h;
}

void write_svg(const std::filesystem::path& path, const LineFigure& fig) {
  const Frame f = line_frame(fig);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
  svg_axes(s, f, fig.title, fig.x_label, fig.y_label);
  for (std::size_t i = 0; i < fig.series.size(); ++i) {
    const Series& ser = fig.series[i];
    const Rgb c = kPalette[i % kPalette.size()];
    s << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << hex(c) << "\" points=\"";
    for (std::size_t k = 0; k < ser.x.size(); ++k) s << f.px(ser.x[k]) << ',' << f.py(ser.y[k]) << ' ';
    s << "\"/>\n";
    const double ly = f.top + 16.0 + 18.0 * static_cast<double>(i);
    s << "<line x1=\"" << f.width - f.right + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << f.width - f.right + 30
      << "\" y2=\"" << ly - 4 << "\" stroke-width=\"2\" stroke=\"" << hex(c) << "\"/>\n";
    s << "<text x=\"" << f.width - f.right + 36 << "\" y=\"" << ly << "\" font-size=\"12\">" << escape(ser.label)
      << "</text>\n";
  }
  s << "</svg>\n";
  write_text_file(path, s.str());
}

void write_png(const std::filesystem::path& path, const LineFigure& fig) {
  const Frame f = line_frame(fig);
  Canvas c(f.width, f.height);
  png_axes(c, f, fig.title, fig.x_label, fig.y_label);
  for (std::size_t i = 0; i < fig.series.size(); ++i) {
    const Series& ser = fig.series[i];
    const Rgb col = kPalette[i % kPalette.size()];
    for (std::size_t k = 1; k < ser.x.size(); ++k) {
      c.line(f.px(ser.x[k - 1]), f.py(ser.y[k - 1]), f.px(ser.x[k]), f.py(ser.y[k]), col, 2);
    }
    const double ly = f.top + 16.0 + 18.0 * static_cast<double>(i);
    c.line(f.width - f.right + 10, ly - 4, f.width - f.right + 30, ly - 4, col, 2);
    c.text(f.width - f.right + 36, ly, ser.label, kBlack);
  }
  c.save(path);
}

void write_svg(const std::filesystem::path& path, const HistogramFigure& fig) {
  const Frame f = hist_frame(fig);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
  svg_axes(s, f, fig.title, fig.x_label, "count");
  for (std::size_t g = 0; g < fig.counts.size(); ++g) {
    const Rgb c = kPalette[g % kPalette.size()];
    for (std::size_t b = 0; b < fig.counts[g].size(); ++b) {
      const double top = f.py(static_cast<double>(fig.counts[g][b]));
      s << "<rect x=\"" << f.px(fig.edges[b]) << "\" y=\"" << top << "\" width=\""
        << f.px(fig.edges[b + 1]) - f.px(fig.edges[b]) << "\" height=\"" << f.py(0.0) - top << "\" fill=\"" << hex(c)
        << "\" fill-opacity=\"0.35\" stroke=\"" << hex(c) << "\"/>\n";
    }
    const double ly = f.top + 16.0 + 18.0 * static_cast<double>(g);
    s << "<rect x=\"" << f.width - f.right + 10 << "\" y=\"" << ly - 10 << "\" width=\"20\" height=\"10\" fill=\""
      << hex(c) << "\" fill-opacity=\"0.5\"/>\n";
    s << "<text x=\"" << f.width - f.right + 36 << "\" y=\"" << ly << "\" font-size=\"12\">" << escape(fig.labels[g])
      << "</text>\n";
  }
  s << "</svg>\n";
  write_text_file(path, s.str());
}

void write_png(const std::filesystem::path& path, const HistogramFigure& fig) {
  const Frame f = hist_frame(fig);
  Canvas c(f.width, f.height);
  png_axes(c, f, fig.title, fig.x_label, "count");
  for (std::size_t g = 0; g < fig.counts.size(); ++g) {
    const Rgb col = kPalette[g % kPalette.size()];
    for (std::size_t b = 0; b < fig.counts[g].size(); ++b) {
      const double x0 = f.px(fig.edges[b]), x1 = f.px(fig.edges[b + 1]);
      const double top = f.py(static_cast<double>(fig.counts[g][b]));
      c.line(x0, top, x1, top, col, 2);
      c.line(x0, top, x0, f.py(0.0), col);
      c.line(x1, top, x1, f.py(0.0), col);
    }
    const double ly = f.top + 16.0 + 18.0 * static_cast<double>(g);
    c.fill_rect(f.width - f.right + 10, ly - 10, f.width - f.right + 30, ly, col);
    c.text(f.width - f.right + 36, ly, fig.labels[g], kBlack);
  }
  c.save(path);
}

LineFigure curve_figure(const EvalReport& report) {
  LineFigure fig;
  fig.title = "Selective accuracy (" + to_string(report.task) + ")";
  fig.x_label = "rejection rate (%)";
  fig.y_label = "accuracy";
  fig.x_min = 0.0;
  fig.x_max = 99.0;
  for (const auto& v : report.variants) {
    if (!v.curve) continue;
    Series s;
    s.label = v.name;
    for (std::size_t r = 0; r < v.curve->accuracy.size(); ++r) {
      s.x.push_back(static_cast<double>(r));
      s.y.push_back(v.curve->accuracy[r]);
    }
    fig.series.push_back(std::move(s));
  }
  return fig;
}

HistogramFigure uncertainty_histogram(const EvalReport& report, std::size_t bins) {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> groups;
  for (const auto& v : report.variants) {
    std::vector<double> base, perturbed;
    for (std::size_t i = 0; i < v.scores.size(); ++i) {
      const SourceFlag flag = v.flags[i];
      const bool other = flag == SourceFlag::adversarial || flag == SourceFlag::noisy ||
                         flag == SourceFlag::out_of_distribution;
      (other ? perturbed : base).push_back(v.scores[i]);
    }
    if (v.name == "clean") {
      labels.push_back(report.task == TaskKind::semantic_shift ? "in-distribution" : "clean");
      groups.push_back(report.task == TaskKind::semantic_shift ? base : v.scores);
      if (report.task == TaskKind::semantic_shift) {
        labels.push_back("ood clean");
        groups.push_back(perturbed);
      }
    } else if (!perturbed.empty()) {
      labels.push_back(v.name);
      groups.push_back(std::move(perturbed));
    }
  }
  return make_histogram("Total uncertainty (" + to_string(report.task) + ")", "total uncertainty (nats)",
                        std::move(labels), groups, bins);
}

std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  if (!std::filesystem::exists(dir)) throw ArgumentError("no such directory: " + dir.string());
  std::vector<std::filesystem::path> reports;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "report.json") reports.push_back(e.path());
  }
  std::sort(reports.begin(), reports.end());
  for (const auto& path : reports) {
    std::ifstream in(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    const EvalReport report = report_from_json(j);
    const auto base = path.parent_path();
    const LineFigure curves = curve_figure(report);
    if (!curves.series.empty()) {
      write_svg(base / "curves.svg", curves);
      write_png(base / "curves.png", curves);
      written.push_back(base / "curves.svg");
      written.push_back(base / "curves.png");
    }
    const HistogramFigure hist = uncertainty_histogram(report);
    write_svg(base / "uncertainty_hist.svg", hist);
    write_png(base / "uncertainty_hist.png", hist);
    written.push_back(base / "uncertainty_hist.svg");
    written.push_back(base / "uncertainty_hist.png");
  }
  return written;
}

}  // namespace bnnr
