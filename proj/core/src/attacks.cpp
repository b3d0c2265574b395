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

#include "bnnr/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "bnnr/uncertainty.hpp"

namespace bnnr {

namespace {

// Seed streams for the posterior-mean labelling passes, disjoint from the
// per-iteration streams 0..(2 * steps).
constexpr std::uint64_t kLabelStream = 0x4c41'4245'4cULL;
constexpr std::uint64_t kSuccessStream = 0x5355'4343ULL;

}  // namespace

std::string to_string(AttackObjective objective) {
  switch (objective) {
    case AttackObjective::accuracy_nll: return "accuracy_nll";
    case AttackObjective::uncertainty_min: return "uncertainty_min";
    case AttackObjective::uncertainty_max: return "uncertainty_max";
  }
  return "unknown";
}

AttackObjective attack_objective_from_string(const std::string& text) {
  if (text == "accuracy_nll") return AttackObjective::accuracy_nll;
  if (text == "uncertainty_min") return AttackObjective::uncertainty_min;
  if (text == "uncertainty_max") return AttackObjective::uncertainty_max;
  throw ArgumentError("unknown attack objective: " + text);
}

std::string to_string(LossAdapter adapter) {
  return adapter == LossAdapter::probability_nll ? "probability_nll" : "softmax_then_nll";
}

std::string to_string(GradientEstimator estimator) {
  return estimator == GradientEstimator::loss_of_average ? "loss_of_average" : "average_of_losses";
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ArgumentError("epsilon must be finite and >= 0");
  if (steps == 0) throw ArgumentError("attack needs at least one step");
  const double step = effective_step_size();
  if (!(step >= 0.0) || step > epsilon * (1.0 + 1e-12)) {
    throw ArgumentError("step size must lie in [0, epsilon]");
  }
  if (mc_samples == 0) throw ArgumentError("mc_samples must be >= 1");
  if (!(lower < upper)) throw ArgumentError("input bounds must satisfy lower < upper");
  if (batch_size == 0) throw ArgumentError("attack batch size must be positive");
}

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double project_linf(double center, double proposal, double epsilon, double lower, double upper) {
  const double in_ball = std::clamp(proposal, center - epsilon, center + epsilon);
  return std::clamp(in_ball, lower, upper);
}

RowMatrix project_linf(const RowMatrix& center, const RowMatrix& proposal, double epsilon,
                       double lower, double upper) {
  if (center.rows() != proposal.rows() || center.cols() != proposal.cols()) {
    throw ArgumentError("project_linf: shape mismatch");
  }
  RowMatrix out(proposal.rows(), proposal.cols());
  const double* c = center.data();
  const double* p = proposal.data();
  double* o = out.data();
  for (Eigen::Index i = 0; i < out.size(); ++i) o[i] = project_linf(c[i], p[i], epsilon, lower, upper);
  return out;
}

namespace {

// Writes d(loss)/d(z_s) = (1/S) p_s * (g - <g, p_s>) for a loss with gradient
// g with respect to a probability vector built from p_s.
void through_softmax(const double* p, const std::vector<double>& g, double scale, double* dz,
                     Eigen::Index k) {
  double dot = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) dot += g[static_cast<std::size_t>(c)] * p[c];
  for (Eigen::Index c = 0; c < k; ++c) dz[c] = scale * p[c] * (g[static_cast<std::size_t>(c)] - dot);
}

// Loss of a probability vector v and its gradient dl/dv. The accuracy branch
// is only reached for softmax_then_nll; probability_nll is handled in log space.
double vector_loss(const std::vector<double>& v, int y, AttackObjective objective, std::vector<double>& g) {
  const std::size_t k = v.size();
  g.assign(k, 0.0);
  if (objective == AttackObjective::accuracy_nll) {
    const double m = *std::max_element(v.begin(), v.end());
    double z = 0.0;
    for (double a : v) z += std::exp(a - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < k; ++c) g[c] = std::exp(v[c] - lse);
    g[static_cast<std::size_t>(y)] -= 1.0;
    return lse - v[static_cast<std::size_t>(y)];
  }
  const double sigma = objective == AttackObjective::uncertainty_max ? 1.0 : -1.0;
  double h = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double lv = std::log(std::max(v[c], kProbFloor));
    h -= v[c] * lv;
    g[c] = -sigma * (lv + 1.0);
  }
  return sigma * h;
}

}  // namespace

EotValue eot_loss_and_grad(std::span<const PosteriorDraw> draws, const Architecture& arch,
                           const RowMatrix& x, std::span<const int> y, AttackObjective objective,
                           LossAdapter loss, GradientEstimator estimator, std::uint64_t batch_salt) {
  if (draws.empty()) throw ArgumentError("EOT needs at least one posterior draw");
  const Eigen::Index n = x.rows();
  const Eigen::Index k = arch.num_classes;
  const std::size_t s_count = draws.size();
  const double inv_s = 1.0 / static_cast<double>(s_count);
  const bool accuracy = objective == AttackObjective::accuracy_nll;
  if (accuracy) {
    if (y.size() != static_cast<std::size_t>(n)) throw ArgumentError("EOT: one label per input row required");
    for (int label : y) {
      if (label < 0 || label >= k) throw ArgumentError("EOT: label outside [0, K)");
    }
  }

  std::vector<ForwardTrace> traces(s_count);
  std::vector<RowMatrix> logp(s_count);
  for (std::size_t s = 0; s < s_count; ++s) {
    const PosteriorDraw& d = draws[s];
    const RowMatrix logits =
        forward_logits(arch, d.theta(), x, d.mode, derive_seed(d.forward_seed, batch_salt), &traces[s]);
    logp[s] = log_softmax_rows(logits);
  }

  EotValue out;
  out.loss.assign(static_cast<std::size_t>(n), 0.0);
  std::vector<RowMatrix> dz(s_count, RowMatrix::Zero(n, k));
  std::vector<double> v(static_cast<std::size_t>(k)), g;
  std::vector<double> a(s_count);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (accuracy && loss == LossAdapter::probability_nll) {
      const int yi = y[static_cast<std::size_t>(i)];
      if (estimator == GradientEstimator::loss_of_average) {
        // -log mean_s p_s[y] in log space: weights w_s = softmax_s(log p_s[y]).
        for (std::size_t s = 0; s < s_count; ++s) a[s] = logp[s](i, yi);
        const double m = *std::max_element(a.begin(), a.end());
        double z = 0.0;
        for (double as : a) z += std::exp(as - m);
        const double lse = m + std::log(z);
        out.loss[static_cast<std::size_t>(i)] = std::log(static_cast<double>(s_count)) - lse;
        for (std::size_t s = 0; s < s_count; ++s) {
          const double w = std::exp(a[s] - lse);
          for (Eigen::Index c = 0; c < k; ++c) dz[s](i, c) = w * std::exp(logp[s](i, c));
          dz[s](i, yi) -= w;
        }
      } else {
        for (std::size_t s = 0; s < s_count; ++s) {
          out.loss[static_cast<std::size_t>(i)] -= inv_s * logp[s](i, yi);
          for (Eigen::Index c = 0; c < k; ++c) dz[s](i, c) = inv_s * std::exp(logp[s](i, c));
          dz[s](i, yi) -= inv_s;
        }
      }
      continue;
    }
    const int yi = accuracy ? y[static_cast<std::size_t>(i)] : 0;
    if (estimator == GradientEstimator::loss_of_average) {
      std::fill(v.begin(), v.end(), 0.0);
      for (std::size_t s = 0; s < s_count; ++s) {
        for (Eigen::Index c = 0; c < k; ++c) v[static_cast<std::size_t>(c)] += inv_s * std::exp(logp[s](i, c));
      }
      out.loss[static_cast<std::size_t>(i)] = vector_loss(v, yi, objective, g);
      for (std::size_t s = 0; s < s_count; ++s) {
        const RowMatrix p = logp[s].row(i).array().exp();
        through_softmax(p.data(), g, inv_s, &dz[s](i, 0), k);
      }
    } else {
      for (std::size_t s = 0; s < s_count; ++s) {
        const RowMatrix p = logp[s].row(i).array().exp();
        for (Eigen::Index c = 0; c < k; ++c) v[static_cast<std::size_t>(c)] = p(0, c);
        out.loss[static_cast<std::size_t>(i)] += inv_s * vector_loss(v, yi, objective, g);
        through_softmax(p.data(), g, inv_s, &dz[s](i, 0), k);
      }
    }
  }

  out.grad = RowMatrix::Zero(n, x.cols());
  RowMatrix gx;
  for (std::size_t s = 0; s < s_count; ++s) {
    backward(arch, draws[s].theta(), traces[s], dz[s], {}, &gx);
    out.grad += gx;
  }
  for (double l : out.loss) {
    if (!std::isfinite(l)) throw NumericError("eot", "non-finite attack loss");
  }
  if (!out.grad.allFinite()) throw NumericError("eot", "non-finite input gradient");
  return out;
}

EotValue eot_loss_and_grad(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                           std::span<const int> y, std::size_t samples, std::uint64_t seed,
                           AttackObjective objective) {
  if (samples == 0) throw ArgumentError("EOT needs S >= 1");
  const auto draws = posterior_draws(posterior, samples, seed);
  return eot_loss_and_grad(draws, arch, x, y, objective);
}

std::vector<int> posterior_mean_labels(const Posterior& posterior, const Architecture& arch,
                                       const RowMatrix& x, std::size_t samples, std::uint64_t seed) {
  const auto ensembles = predict_ensembles(posterior, arch, x, samples, seed);
  std::vector<int> labels(ensembles.size());
  for (std::size_t i = 0; i < ensembles.size(); ++i) {
    const auto mean = predictive_mean(ensembles[i]);
    std::size_t best = 0;
    for (std::size_t c = 1; c < mean.size(); ++c) {
      if (mean[c] > mean[best]) best = c;
    }
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

namespace {

using DrawSource = std::function<std::vector<PosteriorDraw>(std::size_t iteration)>;

DrawSource fresh_draws(const Posterior& posterior, const AttackConfig& cfg) {
  return [&posterior, &cfg](std::size_t t) {
    return posterior_draws(posterior, cfg.mc_samples, derive_seed(cfg.seed, t));
  };
}

// Iterations [first, first + steps) of projected signed-gradient ascent.
// Updates x in place and fills rows of `norms`.
void run_iterations(const Architecture& arch, const DrawSource& draws_for, const RowMatrix& center,
                    RowMatrix& x, std::span<const int> y, const AttackConfig& cfg,
                    AttackObjective objective, std::size_t first, std::size_t steps, double step,
                    RowMatrix& norms, std::size_t norm_row) {
  const Eigen::Index n = x.rows();
  const auto chunk = static_cast<Eigen::Index>(cfg.batch_size);
  const bool needs_labels = objective == AttackObjective::accuracy_nll;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto draws = draws_for(first + t);
    for (Eigen::Index start = 0; start < n; start += chunk) {
      const Eigen::Index rows = std::min(chunk, n - start);
      const RowMatrix xb = x.middleRows(start, rows);
      const std::span<const int> yb =
          needs_labels ? y.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(rows))
                       : std::span<const int>{};
      const EotValue v = eot_loss_and_grad(draws, arch, xb, yb, objective, cfg.loss, cfg.estimator,
                                           static_cast<std::uint64_t>(start));
      RowMatrix proposal = xb;
      for (Eigen::Index i = 0; i < rows; ++i) {
        norms(static_cast<Eigen::Index>(norm_row + t), start + i) = v.grad.row(i).cwiseAbs().maxCoeff();
        for (Eigen::Index j = 0; j < xb.cols(); ++j) proposal(i, j) += step * sign0(v.grad(i, j));
      }
      x.middleRows(start, rows) =
          project_linf(center.middleRows(start, rows), proposal, cfg.epsilon, cfg.lower, cfg.upper);
    }
  }
}

std::vector<int> self_labels(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                             const AttackConfig& cfg) {
  const std::size_t s = cfg.label_samples > 0 ? cfg.label_samples : cfg.mc_samples;
  return posterior_mean_labels(posterior, arch, x, s, derive_seed(cfg.seed, kLabelStream));
}

// Success: misclassified under the posterior mean for accuracy attacks, total
// uncertainty moved in the objective's direction otherwise.
void fill_success(AttackResult& r, const Posterior& posterior, const Architecture& arch,
                  const RowMatrix& x, const AttackConfig& cfg, AttackObjective objective) {
  if (cfg.label_samples == 0) return;
  const std::uint64_t seed = derive_seed(cfg.seed, kSuccessStream);
  const auto n = static_cast<std::size_t>(x.rows());
  r.success_mask.assign(n, false);
  if (objective == AttackObjective::accuracy_nll) {
    const auto pred = posterior_mean_labels(posterior, arch, r.adversarial, cfg.label_samples, seed);
    for (std::size_t i = 0; i < n; ++i) r.success_mask[i] = pred[i] != r.labels_used[i];
    return;
  }
  const auto draws = posterior_draws(posterior, cfg.label_samples, seed);
  const auto clean = predict_ensembles(draws, arch, x);
  const auto adv = predict_ensembles(draws, arch, r.adversarial);
  for (std::size_t i = 0; i < n; ++i) {
    const double before = entropy(predictive_mean(clean[i]));
    const double after = entropy(predictive_mean(adv[i]));
    r.success_mask[i] = objective == AttackObjective::uncertainty_min ? after < before : after > before;
  }
}

AttackResult single_stage(const std::string& method, const Posterior& posterior, const Architecture& arch,
                          const RowMatrix& x, std::span<const int> y, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult r;
  r.method = method;
  r.adversarial = x;
  r.grad_inf_norms = RowMatrix::Zero(static_cast<Eigen::Index>(cfg.steps), x.rows());
  if (cfg.objective == AttackObjective::accuracy_nll) {
    r.labels_used.assign(y.begin(), y.end());
  } else {
    r.labels_used.assign(static_cast<std::size_t>(x.rows()), kOodLabel);
  }
  run_iterations(arch, fresh_draws(posterior, cfg), x, r.adversarial, y, cfg, cfg.objective, 0, cfg.steps,
                 cfg.effective_step_size(), r.grad_inf_norms, 0);
  fill_success(r, posterior, arch, x, cfg, cfg.objective);
  return r;
}

}  // namespace

AttackResult fgsm(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                  std::span<const int> y, const AttackConfig& cfg) {
  AttackConfig one = cfg;
  one.steps = 1;
  one.step_size = cfg.epsilon;
  return single_stage("fgsm", posterior, arch, x, y, one);
}

AttackResult pgd(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                 std::span<const int> y, const AttackConfig& cfg) {
  return single_stage("pgd", posterior, arch, x, y, cfg);
}

AttackResult pgd_plus(const Posterior& posterior, const Architecture& arch, const RowMatrix& x,
                      const AttackConfig& cfg) {
  cfg.validate();
  AttackResult r;
  r.method = "pgd+";
  r.labels_used = self_labels(posterior, arch, x, cfg);
  r.adversarial = x;
  r.grad_inf_norms = RowMatrix::Zero(static_cast<Eigen::Index>(2 * cfg.steps), x.rows());
  const DrawSource draws = fresh_draws(posterior, cfg);
  const double step = cfg.effective_step_size();
  run_iterations(arch, draws, x, r.adversarial, r.labels_used, cfg, AttackObjective::accuracy_nll, 0,
                 cfg.steps, step, r.grad_inf_norms, 0);
  r.stage_trace = r.adversarial;
  run_iterations(arch, draws, x, r.adversarial, {}, cfg, AttackObjective::uncertainty_min, cfg.steps,
                 cfg.steps, step, r.grad_inf_norms, cfg.steps);
  fill_success(r, posterior, arch, x, cfg, AttackObjective::accuracy_nll);
  return r;
}

AttackResult transfer_pgd_plus(const Posterior& posterior, const Architecture& arch,
                               const RowMatrix& x, const AttackConfig& cfg) {
  cfg.validate();
  AttackResult r;
  r.method = "transfer-pgd+";
  r.labels_used = self_labels(posterior, arch, x, cfg);
  r.adversarial = x;
  r.grad_inf_norms = RowMatrix::Zero(static_cast<Eigen::Index>(2 * cfg.steps), x.rows());
  const PosteriorDraw collapsed = posterior.collapse();
  const DrawSource deterministic = [&collapsed](std::size_t) { return std::vector<PosteriorDraw>{collapsed}; };
  const double step = cfg.effective_step_size();
  run_iterations(arch, deterministic, x, r.adversarial, r.labels_used, cfg, AttackObjective::accuracy_nll, 0,
                 cfg.steps, step, r.grad_inf_norms, 0);
  r.stage_trace = r.adversarial;
  run_iterations(arch, fresh_draws(posterior, cfg), x, r.adversarial, {}, cfg,
                 AttackObjective::uncertainty_min, cfg.steps, cfg.steps, step, r.grad_inf_norms, cfg.steps);
  fill_success(r, posterior, arch, x, cfg, AttackObjective::accuracy_nll);
  return r;
}

AttackResult ood_uncertainty_attack(const Posterior& posterior, const Architecture& arch,
                                    const RowMatrix& x_ood, const AttackConfig& cfg, OodAttackKind kind) {
  AttackConfig c = cfg;
  c.objective = AttackObjective::uncertainty_min;
  if (kind == OodAttackKind::fgsm) {
    c.steps = 1;
    c.step_size = cfg.epsilon;
  }
  return single_stage(kind == OodAttackKind::fgsm ? "ood-fgsm" : "ood-pgd", posterior, arch, x_ood, {}, c);
}

}  // namespace bnnr
