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

#ifndef BNNR_PLOT_HPP_
#define BNNR_PLOT_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include "bnnr/tasks.hpp"

namespace bnnr {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct LineFigure {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  double x_min = 0.0, x_max = 1.0;
  double y_min = 0.0, y_max = 1.0;
};

// Counts per group over one set of bin edges.
struct HistogramFigure {
  std::string title;
  std::string x_label;
  std::vector<double> edges;  // bins + 1 increasing values
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;
};

// `bins` equal-width bins spanning every value of every group.
std::vector<double> shared_bin_edges(const std::vector<std::vector<double>>& groups, std::size_t bins);

// Values outside [edges.front(), edges.back()] are clamped into the end bins.
std::vector<std::size_t> histogram_counts(const std::vector<double>& values, const std::vector<double>& edges);

HistogramFigure make_histogram(std::string title, std::string x_label, std::vector<std::string> labels,
                               const std::vector<std::vector<double>>& groups, std::size_t bins = 30);

void write_svg(const std::filesystem::path& path, const LineFigure& figure);
void write_svg(const std::filesystem::path& path, const HistogramFigure& figure);
void write_png(const std::filesystem::path& path, const LineFigure& figure);
void write_png(const std::filesystem::path& path, const HistogramFigure& figure);

// Selective-accuracy curves of every variant on shared axes.
LineFigure curve_figure(const EvalReport& report);

// Total uncertainty of perturbed vs unperturbed samples for every variant,
// all on one set of bin edges.
HistogramFigure uncertainty_histogram(const EvalReport& report, std::size_t bins = 30);

// For every report.json under `dir`: curves.{svg,png} and
// uncertainty_hist.{svg,png} next to it. Returns the files written.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& dir);

}  // namespace bnnr

#endif  // BNNR_PLOT_HPP_
