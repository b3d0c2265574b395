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

#ifndef BNNR_ATTACKS_HPP_
#define BNNR_ATTACKS_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnr/common.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

// The attack ascends the loss: accuracy_nll raises -log p[y],
// uncertainty_min raises -H(p), uncertainty_max raises H(p).
enum class AttackObjective { accuracy_nll, uncertainty_min, uncertainty_max };

// How probabilities enter the accuracy loss. softmax_then_nll renormalizes
// probabilities as if they were scores; it exists to exercise the audit.
enum class LossAdapter { probability_nll, softmax_then_nll };

// loss_of_average differentiates the loss of the averaged prediction;
// average_of_losses averages per-draw losses, kept as an audit fixture.
enum class GradientEstimator { loss_of_average, average_of_losses };

std::string to_string(AttackObjective objective);
AttackObjective attack_objective_from_string(const std::string& text);
std::string to_string(LossAdapter adapter);
std::string to_string(GradientEstimator estimator);

struct AttackConfig {
  double epsilon = 0.3;
  std::size_t steps = 40;
  // Defaults to epsilon / 10.
  std::optional<double> step_size;
  std::size_t mc_samples = 10;
  double lower = 0.0;
  double upper = 1.0;
  std::uint64_t seed = 0;
  AttackObjective objective = AttackObjective::accuracy_nll;
  // Rows per gradient evaluation.
  std::size_t batch_size = 32;
  LossAdapter loss = LossAdapter::probability_nll;
  GradientEstimator estimator = GradientEstimator::loss_of_average;
  // Draws for self-labels and the success mask; 0 skips the success mask.
  std::size_t label_samples = 100;

  double effective_step_size() const { return step_size.value_or(epsilon / 10.0); }
  void validate() const;
};

struct AttackResult {
  std::string method;
  RowMatrix adversarial;
  RowMatrix grad_inf_norms;  // iterations x N
  std::vector<int> labels_used;
  std::optional<RowMatrix> stage_trace;  // first-stage endpoint of two-stage attacks
  std::vector<bool> success_mask;        // empty when label_samples == 0
};

struct EotValue {
  std::vector<double> loss;  // per row
  RowMatrix grad;            // d loss / d x, shaped like x
};

// Loss of the expected prediction over `draws` and its input gradient.
EotValue eot_loss_and_grad(std::span<const PosteriorDraw> draws, const Architecture& arch,
                           const RowMatrix& x, std::span<const int> y, AttackObjective objective,
                           LossAdapter loss = LossAdapter::probability_nll,
                           GradientEstimator estimator = GradientEstimator::loss_of_average,
                           std::uint64_t batch_salt = 0);

// Draws S parameter settings with `seed` and evaluates the above.
EotValue eot_loss_and_grad(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                           std::span<const int> y, std::size_t samples, std::uint64_t seed,
                           AttackObjective objective);

// Clamp into [center - eps, center + eps], then into [lower, upper].
double project_linf(double center, double proposal, double epsilon, double lower, double upper);
RowMatrix project_linf(const RowMatrix& center, const RowMatrix& proposal, double epsilon,
                       double lower = 0.0, double upper = 1.0);

// sign with sign(0) = 0.
double sign0(double v);

// Single signed step of size epsilon; cfg.steps and cfg.step_size are ignored.
AttackResult fgsm(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                  std::span<const int> y, const AttackConfig& cfg);

// Projected signed-gradient ascent from x (no random start). Iteration t draws
// fresh parameters with seed derive_seed(cfg.seed, t).
AttackResult pgd(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                 std::span<const int> y, const AttackConfig& cfg);

// Stage 1: cfg.steps accuracy iterations against the posterior-mean label of
// the clean input. Stage 2: cfg.steps iterations lowering total uncertainty.
// Both stages project onto the ball around the original x.
AttackResult pgd_plus(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                      const AttackConfig& cfg);

// Phase 1 attacks the collapsed (stochasticity-off) network; phase 2 continues
// from its endpoint with uncertainty-lowering steps on the stochastic model.
AttackResult transfer_pgd_plus(const Posterior& posterior, const Architecture& arch,
                               const RowMatrix& x, const AttackConfig& cfg);

enum class OodAttackKind { fgsm, pgd };

// Lowers total uncertainty on out-of-distribution inputs. No labels needed.
AttackResult ood_uncertainty_attack(const Posterior& posterior, const Architecture& arch,
                                    const RowMatrix& x_ood, const AttackConfig& cfg,
                                    OodAttackKind kind = OodAttackKind::pgd);

// Posterior-mean class per row over S draws; ties go to the lowest index.
std::vector<int> posterior_mean_labels(const Posterior& posterior, const Architecture& arch,
                                       const RowMatrix& x, std::size_t samples, std::uint64_t seed);

}  // namespace bnnr

#endif  // BNNR_ATTACKS_HPP_
