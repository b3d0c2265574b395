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

#ifndef BNNR_UNCERTAINTY_HPP_
#define BNNR_UNCERTAINTY_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bnnr/common.hpp"
#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

// S x K class probabilities of one input, one row per posterior draw.
struct PredictiveEnsemble {
  RowMatrix probs;

  std::size_t samples() const { return static_cast<std::size_t>(probs.rows()); }
  std::size_t classes() const { return static_cast<std::size_t>(probs.cols()); }
  // Throws ConsistencyError unless S >= 1 and every row is on the simplex (1e-6).
  void validate() const;
};

// All entropies in nats. total == aleatoric + epistemic up to rounding.
struct UncertaintyReport {
  double total = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;
  std::vector<double> predictive_mean;
};

std::vector<double> predictive_mean(const PredictiveEnsemble& e);

// -sum p log p with probabilities clamped at 1e-12 inside the log.
double entropy(std::span<const double> p);

UncertaintyReport decompose(const PredictiveEnsemble& e);

// Runs S posterior draws over x (in chunks of `batch_size` rows) and returns
// one ensemble per input row.
std::vector<PredictiveEnsemble> predict_ensembles(const Posterior& posterior, const Architecture& arch,
                                                  const RowMatrix& x, std::size_t samples,
                                                  std::uint64_t seed, std::size_t batch_size = 256);

// Same, for an explicit list of draws.
std::vector<PredictiveEnsemble> predict_ensembles(std::span<const PosteriorDraw> draws,
                                                  const Architecture& arch, const RowMatrix& x,
                                                  std::size_t batch_size = 256);

struct UncertaintyRow {
  std::size_t sample_id = 0;
  double total = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;
  int predicted_class = 0;
  int true_label = 0;
  SourceFlag source_flag = SourceFlag::clean;
};

void write_uncertainty_csv(const std::filesystem::path& path, std::span<const UncertaintyRow> rows);

}  // namespace bnnr

#endif  // BNNR_UNCERTAINTY_HPP_
