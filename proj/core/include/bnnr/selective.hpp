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

#ifndef BNNR_SELECTIVE_HPP_
#define BNNR_SELECTIVE_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"
#include "bnnr/uncertainty.hpp"

namespace bnnr {

// Rejection rates 0..99 percent.
inline constexpr std::size_t kRejectionGrid = 100;

struct SelectiveRecord {
  int predicted_class = 0;
  int true_label = 0;  // kOodLabel for out-of-distribution inputs
  bool correct = false;
  double nll = 0.0;    // -log p[true_label]; 0 and unused for OOD records
  double score = 0.0;  // higher is rejected first
  SourceFlag source_flag = SourceFlag::clean;
};

struct SelectiveCurve {
  std::vector<double> accuracy;        // kRejectionGrid entries
  std::vector<std::size_t> retained;   // kRejectionGrid entries
  // Mean NLL of retained in-distribution records; NaN where none is retained.
  std::vector<double> mean_nll;
  // A grid point retained nothing and reused the previous accuracy.
  bool had_empty_grid_point = false;
  std::size_t nll_excluded = 0;  // OOD records left out of mean_nll
};

struct MeanPrediction {
  std::vector<int> labels;
  std::vector<PredictiveEnsemble> ensembles;
};

// Argmax of the predictive mean over S draws, lowest index on ties.
MeanPrediction posterior_mean_predict(const Posterior& posterior, const Architecture& arch,
                                      const RowMatrix& x, std::size_t samples, std::uint64_t seed);

int argmax_lowest(std::span<const double> p);

// Fraction of labels equal to truth; kOodLabel truth never counts as correct.
double robust_accuracy(std::span<const int> labels, std::span<const int> truth);

// Records scored by total uncertainty of each ensemble.
std::vector<SelectiveRecord> make_records(const MeanPrediction& prediction, std::span<const int> truth,
                                          std::span<const SourceFlag> flags);

// For each r, rejects floor(N r / 100) records with the highest score; equal
// scores are rejected in input order.
SelectiveCurve selective_curve(std::span<const SelectiveRecord> records);

// Mean of the accuracy grid.
double asa(const SelectiveCurve& curve);

// Mean over the grid of retained in-distribution NLL; NaN with no such record.
double anll(const SelectiveCurve& curve);
double anll(std::span<const SelectiveRecord> records);

// Columns r, accuracy, retained, mean_nll.
void write_curve_csv(const std::filesystem::path& path, const SelectiveCurve& curve);

}  // namespace bnnr

#endif  // BNNR_SELECTIVE_HPP_
