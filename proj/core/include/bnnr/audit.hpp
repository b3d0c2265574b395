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

#ifndef BNNR_AUDIT_HPP_
#define BNNR_AUDIT_HPP_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnnr/attacks.hpp"
#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

enum class AuditCheck { double_softmax, vanishing_gradients, stochasticity_mode, loss_of_average, epsilon_sweep };
enum class Severity { pass, warn, fail };

std::string to_string(AuditCheck check);
std::string to_string(Severity severity);

struct AuditFinding {
  AuditCheck check = AuditCheck::double_softmax;
  Severity severity = Severity::pass;
  std::string summary;
  nlohmann::json evidence = nlohmann::json::object();
};

nlohmann::json to_json(const AuditFinding& finding);
// Worst severity; pass for an empty list.
Severity rollup(std::span<const AuditFinding> findings);

// Rows with |sum - 1| <= this count as probabilities.
inline constexpr double kSimplexTolerance = 1e-4;
inline constexpr std::size_t kSimplexProbeRows = 64;

// Fails when the outputs are already probabilities and the loss normalizes
// them again. Only the first 64 rows are inspected.
AuditFinding check_double_softmax(const RowMatrix& outputs, LossAdapter loss);

// Fails when more than 10% of the per-iteration, per-sample gradient
// infinity norms are below tol. Evidence is a log10 histogram.
AuditFinding check_vanishing_gradients(const AttackResult& result, double tol = 1e-12);

// Leg 1: draws with different seeds must change the output (skipped for
// point masses). Leg 2: one draw evaluated twice with the same seed must give
// bitwise-equal outputs.
AuditFinding check_stochasticity_mode(const Posterior& posterior, const Architecture& arch,
                                      const RowMatrix& probe, std::uint64_t seed = 0);

// Gradient of the attack loss wrt x for the given draws, as produced by the
// attack implementation under test.
using AttackGradientFn = std::function<RowMatrix(std::span<const PosteriorDraw> draws, const Architecture& arch,
                                                 const RowMatrix& x, std::span<const int> y)>;

AttackGradientFn eot_gradient_fn(LossAdapter loss, GradientEstimator estimator);

// Two 1-D logistic models mixed 50/50, and a probe point where the gradient of
// the loss of the average and the average of the losses have opposite signs.
struct LossOfAverageFixture {
  Architecture arch;  // Dense(1 -> 2): logits [0, w x + b]
  std::vector<double> theta_a;
  std::vector<double> theta_b;
  double x = 0.0;
  int label = 1;

  std::vector<PosteriorDraw> draws() const;
};

LossOfAverageFixture loss_of_average_fixture();

// d/dx of -log mean_s sigmoid(w_s x + b_s) and of mean_s -log sigmoid(...),
// in closed form, for label 1.
double logistic_loss_of_average_grad(std::span<const double> w, std::span<const double> b, double x);
double logistic_average_of_losses_grad(std::span<const double> w, std::span<const double> b, double x);

AuditFinding check_loss_of_average(const AttackGradientFn& attack_gradient);

struct SweepPoint {
  double epsilon = 0.0;
  double robust_accuracy = 0.0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  AuditFinding finding;
};

// Robust accuracy under `attack` (PGD with step epsilon/10 unless the template
// fixes it) for each radius. Warns when accuracy rises by more than 2 points
// between consecutive radii, or when the largest radius is not at least 2
// points below the smallest.
SweepReport epsilon_sweep(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                          std::span<const double> epsilons, const AttackConfig& attack,
                          std::size_t eval_samples = 100, std::uint64_t seed = 0);

// What the suite runs against.
struct AuditSubject {
  std::string name;
  Posterior posterior;
  Architecture arch;
  RowMatrix probe;
  std::vector<int> probe_labels;
  AttackConfig attack;
};

struct AuditOptions {
  std::size_t attack_steps = 10;
  std::uint64_t seed = 0;
};

// double_softmax, vanishing_gradients, stochasticity_mode and loss_of_average.
std::vector<AuditFinding> run_audit_suite(const AuditSubject& subject, const AuditOptions& options = {});

nlohmann::json audit_report_json(const std::string& subject, std::span<const AuditFinding> findings);

// Bundled subjects. The healthy one passes every check; each fault fixture
// fails exactly the check named after it.
namespace fixtures {

// Small dropout MLP on a random probe, labelled with its own predictions.
AuditSubject healthy(std::uint64_t seed = 0);
// Attack loss applies softmax to probabilities.
AuditSubject double_softmax(std::uint64_t seed = 0);
// Attack averages per-draw loss gradients.
AuditSubject averaged_gradients(std::uint64_t seed = 0);
// Pre-softmax scores multiplied by 1000.
AuditSubject saturated_logits(std::uint64_t seed = 0);
// Normalization layer that updates running statistics at evaluation time.
AuditSubject leaky_normalization(std::uint64_t seed = 0);

}  // namespace fixtures

}  // namespace bnnr

#endif  // BNNR_AUDIT_HPP_
