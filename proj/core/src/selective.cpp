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

#include "bnnr/selective.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace bnnr {

int argmax_lowest(std::span<const double> p) {
  if (p.empty()) throw ArgumentError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c) {
    if (p[c] > p[best]) best = c;
  }
  return static_cast<int>(best);
}

MeanPrediction posterior_mean_predict(const Posterior& posterior, const Architecture& arch,
                                      const RowMatrix& x, std::size_t samples, std::uint64_t seed) {
  MeanPrediction out;
  out.ensembles = predict_ensembles(posterior, arch, x, samples, seed);
  out.labels.reserve(out.ensembles.size());
  for (const auto& e : out.ensembles) out.labels.push_back(argmax_lowest(predictive_mean(e)));
  return out;
}

double robust_accuracy(std::span<const int> labels, std::span<const int> truth) {
  if (labels.size() != truth.size()) throw ArgumentError("robust_accuracy: length mismatch");
  if (labels.empty()) throw ArgumentError("robust_accuracy of no samples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (truth[i] != kOodLabel && labels[i] == truth[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<SelectiveRecord> make_records(const MeanPrediction& prediction, std::span<const int> truth,
                                          std::span<const SourceFlag> flags) {
  const std::size_t n = prediction.labels.size();
  if (truth.size() != n || (!flags.empty() && flags.size() != n)) {
    throw ArgumentError("make_records: length mismatch");
  }
  std::vector<SelectiveRecord> records(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mean = predictive_mean(prediction.ensembles[i]);
    SelectiveRecord& r = records[i];
    r.predicted_class = prediction.labels[i];
    r.true_label = truth[i];
    r.correct = truth[i] != kOodLabel && r.predicted_class == truth[i];
    r.nll = truth[i] == kOodLabel
                ? 0.0
                : -std::log(std::max(mean[static_cast<std::size_t>(truth[i])], kProbFloor));
    r.score = entropy(mean);
    r.source_flag = flags.empty() ? SourceFlag::clean : flags[i];
  }
  return records;
}

SelectiveCurve selective_curve(std::span<const SelectiveRecord> records) {
  const std::size_t n = records.size();
  if (n == 0) throw ArgumentError("selective_curve of no records");
  // Rejection order: highest score first, earlier input first among equals.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].score > records[b].score; });
  // Suffix sums over the rejection order give the retained statistics.
  std::vector<std::size_t> correct_suffix(n + 1, 0), id_suffix(n + 1, 0);
  std::vector<double> nll_suffix(n + 1, 0.0);
  for (std::size_t j = n; j-- > 0;) {
    const SelectiveRecord& r = records[order[j]];
    const bool in_dist = r.true_label != kOodLabel;
    correct_suffix[j] = correct_suffix[j + 1] + (r.correct ? 1 : 0);
    id_suffix[j] = id_suffix[j + 1] + (in_dist ? 1 : 0);
    nll_suffix[j] = nll_suffix[j + 1] + (in_dist ? r.nll : 0.0);
  }
  SelectiveCurve c;
  c.accuracy.resize(kRejectionGrid);
  c.retained.resize(kRejectionGrid);
  c.mean_nll.resize(kRejectionGrid);
  c.nll_excluded = n - id_suffix[0];
  double last_accuracy = 0.0;
  for (std::size_t r = 0; r < kRejectionGrid; ++r) {
    const std::size_t rejected = n * r / 100;
    const std::size_t kept = n - rejected;
    c.retained[r] = kept;
    if (kept == 0) {
      c.accuracy[r] = last_accuracy;
      c.had_empty_grid_point = true;
    } else {
      c.accuracy[r] = static_cast<double>(correct_suffix[rejected]) / static_cast<double>(kept);
      last_accuracy = c.accuracy[r];
    }
    const std::size_t id_kept = id_suffix[rejected];
    c.mean_nll[r] = id_kept == 0 ? std::numeric_limits<double>::quiet_NaN()
                                 : nll_suffix[rejected] / static_cast<double>(id_kept);
  }
  return c;
}

double asa(const SelectiveCurve& curve) {
  if (curve.accuracy.empty()) throw ArgumentError("asa of an empty curve");
  return std::accumulate(curve.accuracy.begin(), curve.accuracy.end(), 0.0) /
         static_cast<double>(curve.accuracy.size());
}

double anll(const SelectiveCurve& curve) {
  double sum = 0.0;
  std::size_t count = 0;
  for (double v : curve.mean_nll) {
    if (std::isnan(v)) continue;
    sum += v;
    ++count;
  }
  return count == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(count);
}

double anll(std::span<const SelectiveRecord> records) { return anll(selective_curve(records)); }

void write_curve_csv(const std::filesystem::path& path, const SelectiveCurve& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "r,accuracy,retained,mean_nll\n";
  for (std::size_t r = 0; r < curve.accuracy.size(); ++r) {
    out << r << ',' << curve.accuracy[r] << ',' << curve.retained[r] << ',';
    if (std::isnan(curve.mean_nll[r])) {
      out << "nan";
    } else {
      out << curve.mean_nll[r];
    }
    out << '\n';
  }
}

}  // namespace bnnr
