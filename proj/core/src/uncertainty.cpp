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

#include "bnnr/uncertainty.hpp"

#include <cmath>
#include <fstream>

namespace bnnr {

void PredictiveEnsemble::validate() const {
  if (probs.rows() < 1 || probs.cols() < 1) throw ConsistencyError("ensemble needs S >= 1 rows");
  for (Eigen::Index s = 0; s < probs.rows(); ++s) {
    if ((probs.row(s).array() < 0.0).any()) throw ConsistencyError("ensemble row has negative entries");
    if (std::abs(probs.row(s).sum() - 1.0) > 1e-6) throw ConsistencyError("ensemble row is off the simplex");
  }
}

std::vector<double> predictive_mean(const PredictiveEnsemble& e) {
  std::vector<double> mean(e.classes(), 0.0);
  for (Eigen::Index s = 0; s < e.probs.rows(); ++s) {
    for (Eigen::Index k = 0; k < e.probs.cols(); ++k) mean[static_cast<std::size_t>(k)] += e.probs(s, k);
  }
  const double inv = 1.0 / static_cast<double>(e.samples());
  for (double& v : mean) v *= inv;
  return mean;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) h -= v * std::log(std::max(v, kProbFloor));
  return h;
}

UncertaintyReport decompose(const PredictiveEnsemble& e) {
  UncertaintyReport r;
  r.predictive_mean = predictive_mean(e);
  r.total = entropy(r.predictive_mean);
  double aleatoric = 0.0;
  for (Eigen::Index s = 0; s < e.probs.rows(); ++s) {
    aleatoric += entropy(std::span<const double>(e.probs.row(s).data(), e.classes()));
  }
  r.aleatoric = aleatoric / static_cast<double>(e.samples());
  r.epistemic = r.total - r.aleatoric;
  return r;
}

std::vector<PredictiveEnsemble> predict_ensembles(std::span<const PosteriorDraw> draws,
                                                  const Architecture& arch, const RowMatrix& x,
                                                  std::size_t batch_size) {
  if (draws.empty()) throw ArgumentError("predict_ensembles needs at least one draw");
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  const Eigen::Index n = x.rows();
  const Eigen::Index k = arch.num_classes;
  const auto s_count = static_cast<Eigen::Index>(draws.size());
  std::vector<PredictiveEnsemble> out(static_cast<std::size_t>(n));
  for (auto& e : out) e.probs.resize(s_count, k);
  const auto chunk = static_cast<Eigen::Index>(batch_size);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const PosteriorDraw& d = draws[static_cast<std::size_t>(s)];
    for (Eigen::Index start = 0; start < n; start += chunk) {
      const Eigen::Index rows = std::min(chunk, n - start);
      const RowMatrix xb = x.middleRows(start, rows);
      const RowMatrix p = forward_probs(arch, d.theta(), xb, d.mode,
                                        derive_seed(d.forward_seed, static_cast<std::uint64_t>(start)));
      for (Eigen::Index i = 0; i < rows; ++i) out[static_cast<std::size_t>(start + i)].probs.row(s) = p.row(i);
    }
  }
  return out;
}

std::vector<PredictiveEnsemble> predict_ensembles(const Posterior& posterior, const Architecture& arch,
                                                  const RowMatrix& x, std::size_t samples,
                                                  std::uint64_t seed, std::size_t batch_size) {
  if (samples == 0) throw ArgumentError("predict_ensembles needs S >= 1");
  const auto draws = posterior_draws(posterior, samples, seed);
  return predict_ensembles(draws, arch, x, batch_size);
}

void write_uncertainty_csv(const std::filesystem::path& path, std::span<const UncertaintyRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "sample_id,total,aleatoric,epistemic,predicted_class,true_label,source_flag\n";
  for (const auto& r : rows) {
    out << r.sample_id << ',' << r.total << ',' << r.aleatoric << ',' << r.epistemic << ','
        << r.predicted_class << ',' << r.true_label << ',' << to_string(r.source_flag) << '\n';
  }
}

}  // namespace bnnr
