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

#include "bnnr/audit.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "bnnr/selective.hpp"

namespace bnnr {

std::string to_string(AuditCheck check) {
  switch (check) {
    case AuditCheck::double_softmax: return "double_softmax";
    case AuditCheck::vanishing_gradients: return "vanishing_gradients";
    case AuditCheck::stochasticity_mode: return "stochasticity_mode";
    case AuditCheck::loss_of_average: return "loss_of_average";
    case AuditCheck::epsilon_sweep: return "epsilon_sweep";
  }
  return "unknown";
}

std::string to_string(Severity severity) {
  switch (severity) {
    case Severity::pass: return "pass";
    case Severity::warn: return "warn";
    case Severity::fail: return "fail";
  }
  return "unknown";
}

nlohmann::json to_json(const AuditFinding& f) {
  return {{"check", to_string(f.check)},
          {"severity", to_string(f.severity)},
          {"summary", f.summary},
          {"evidence", f.evidence}};
}

Severity rollup(std::span<const AuditFinding> findings) {
  Severity worst = Severity::pass;
  for (const auto& f : findings) worst = std::max(worst, f.severity);
  return worst;
}

AuditFinding check_double_softmax(const RowMatrix& outputs, LossAdapter loss) {
  AuditFinding f;
  f.check = AuditCheck::double_softmax;
  const Eigen::Index rows = std::min<Eigen::Index>(outputs.rows(), kSimplexProbeRows);
  double max_dev = 0.0;
  bool in_unit = true;
  for (Eigen::Index i = 0; i < rows; ++i) {
    max_dev = std::max(max_dev, std::abs(outputs.row(i).sum() - 1.0));
    in_unit = in_unit && (outputs.row(i).array() >= 0.0).all() && (outputs.row(i).array() <= 1.0).all();
  }
  const bool simplex = rows > 0 && in_unit && max_dev <= kSimplexTolerance;
  f.evidence = {{"rows_inspected", rows},
                {"max_row_sum_deviation", max_dev},
                {"entries_in_unit_interval", in_unit},
                {"outputs_are_probabilities", simplex},
                {"loss", to_string(loss)}};
  if (simplex && loss == LossAdapter::softmax_then_nll) {
    f.severity = Severity::fail;
    f.summary = "attack loss applies softmax to outputs that are already probabilities";
  } else {
    f.summary = simplex ? "loss consumes probabilities directly" : "outputs are unnormalized scores";
  }
  return f;
}

AuditFinding check_vanishing_gradients(const AttackResult& result, double tol) {
  AuditFinding f;
  f.check = AuditCheck::vanishing_gradients;
  const auto count = static_cast<std::size_t>(result.grad_inf_norms.size());
  // Bins: exact zero, then log10 decades starting at 1e-16 (first bin also
  // takes anything smaller) up to 1e2 (last bin takes anything larger).
  constexpr int kLo = -16;
  constexpr int kHi = 2;
  std::vector<std::size_t> hist(static_cast<std::size_t>(kHi - kLo + 2), 0);
  std::size_t below = 0;
  const double* d = result.grad_inf_norms.data();
  for (std::size_t i = 0; i < count; ++i) {
    const double v = d[i];
    if (v < tol) ++below;
    if (v <= 0.0) {
      ++hist[0];
      continue;
    }
    const int decade = static_cast<int>(std::floor(std::log10(v)));
    ++hist[static_cast<std::size_t>(std::clamp(decade, kLo, kHi) - kLo + 1)];
  }
  const double frac = count == 0 ? 1.0 : static_cast<double>(below) / static_cast<double>(count);
  std::vector<std::string> labels{"0"};
  for (int e = kLo; e <= kHi; ++e) labels.push_back("1e" + std::to_string(e));
  f.evidence = {{"tolerance", tol},
                {"fraction_below_tolerance", frac},
                {"norm_count", count},
                {"histogram_bin_lower_edges", labels},
                {"histogram_counts", hist}};
  if (count == 0 || frac > 0.10) {
    f.severity = Severity::fail;
    f.summary = "input gradients vanish for " + std::to_string(below) + " of " + std::to_string(count) +
                " attack iterations";
  } else {
    f.summary = "input gradients are non-vanishing";
  }
  return f;
}

namespace {

bool bitwise_equal(const RowMatrix& a, const RowMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data(), a.data() + a.size(), b.data());
}

}  // namespace

AuditFinding check_stochasticity_mode(const Posterior& posterior, const Architecture& arch,
                                      const RowMatrix& probe, std::uint64_t seed) {
  AuditFinding f;
  f.check = AuditCheck::stochasticity_mode;
  const RowMatrix x = probe.topRows(std::min<Eigen::Index>(probe.rows(), kSimplexProbeRows));
  bool stochastic_ok = true;
  std::string skipped;
  if (posterior.kind() == PosteriorKind::point_mass) {
    skipped = "point mass";
  } else {
    // Several draws, since chain entries can repeat after rejected proposals.
    const auto draws = posterior_draws(posterior, 8, derive_seed(seed, 1));
    const RowMatrix first = forward_probs(arch, draws[0].theta(), x, ForwardMode::eval_stochastic,
                                          draws[0].forward_seed);
    stochastic_ok = false;
    for (std::size_t i = 1; i < draws.size() && !stochastic_ok; ++i) {
      const RowMatrix other = forward_probs(arch, draws[i].theta(), x, ForwardMode::eval_stochastic,
                                            draws[i].forward_seed);
      stochastic_ok = !bitwise_equal(first, other);
    }
  }
  const PosteriorDraw d = posterior.draw(derive_seed(seed, 2));
  const RowMatrix a = forward_probs(arch, d.theta(), x, ForwardMode::eval_stochastic, d.forward_seed);
  const RowMatrix b = forward_probs(arch, d.theta(), x, ForwardMode::eval_stochastic, d.forward_seed);
  const bool repeatable = bitwise_equal(a, b);
  f.evidence = {{"posterior_kind", to_string(posterior.kind())},
                {"draws_differ", stochastic_ok},
                {"same_seed_repeatable", repeatable},
                {"max_repeat_difference", (a - b).cwiseAbs().maxCoeff()}};
  if (!skipped.empty()) f.evidence["draws_differ_skipped"] = skipped;
  if (!repeatable) {
    f.severity = Severity::fail;
    f.summary = "same draw and seed gave different outputs: hidden state changes between passes";
  } else if (!stochastic_ok) {
    f.severity = Severity::fail;
    f.summary = "distinct posterior draws gave identical outputs: stochasticity is disabled";
  } else {
    f.summary = "stochastic components active and normalization frozen";
  }
  return f;
}

AttackGradientFn eot_gradient_fn(LossAdapter loss, GradientEstimator estimator) {
  return [loss, estimator](std::span<const PosteriorDraw> draws, const Architecture& arch, const RowMatrix& x,
                           std::span<const int> y) {
    return eot_loss_and_grad(draws, arch, x, y, AttackObjective::accuracy_nll, loss, estimator).grad;
  };
}

std::vector<PosteriorDraw> LossOfAverageFixture::draws() const {
  auto a = std::make_shared<const std::vector<double>>(theta_a);
  auto b = std::make_shared<const std::vector<double>>(theta_b);
  return {PosteriorDraw{a, ForwardMode::eval_frozen, 0}, PosteriorDraw{b, ForwardMode::eval_frozen, 0}};
}

LossOfAverageFixture loss_of_average_fixture() {
  LossOfAverageFixture fx;
  fx.arch = build_mlp({1}, {}, 2);
  // Dense weight rows are per class: logits = [0, w x + b].
  // Model a: w = 1, b = -5.5 (z = -5 at the probe); model b: w = -1, b = 0.5 (z = 0).
  fx.theta_a = {0.0, 1.0, 0.0, -5.5};
  fx.theta_b = {0.0, -1.0, 0.0, 0.5};
  fx.x = 0.5;
  fx.label = 1;
  return fx;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

double logistic_loss_of_average_grad(std::span<const double> w, std::span<const double> b, double x) {
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < w.size(); ++s) {
    const double p = sigmoid(w[s] * x + b[s]);
    num += p * (1.0 - p) * w[s];
    den += p;
  }
  return -num / den;
}

double logistic_average_of_losses_grad(std::span<const double> w, std::span<const double> b, double x) {
  double g = 0.0;
  for (std::size_t s = 0; s < w.size(); ++s) g -= (1.0 - sigmoid(w[s] * x + b[s])) * w[s];
  return g / static_cast<double>(w.size());
}

AuditFinding check_loss_of_average(const AttackGradientFn& attack_gradient) {
  AuditFinding f;
  f.check = AuditCheck::loss_of_average;
  const LossOfAverageFixture fx = loss_of_average_fixture();
  const double w[2] = {fx.theta_a[1], fx.theta_b[1]};
  const double b[2] = {fx.theta_a[3], fx.theta_b[3]};
  const double right = logistic_loss_of_average_grad(w, b, fx.x);
  const double wrong = logistic_average_of_losses_grad(w, b, fx.x);
  RowMatrix x(1, 1);
  x(0, 0) = fx.x;
  const std::vector<int> y{fx.label};
  const auto draws = fx.draws();
  const RowMatrix g = attack_gradient(draws, fx.arch, x, y);
  const double produced = g(0, 0);
  f.evidence = {{"probe_x", fx.x},
                {"loss_of_average_grad", right},
                {"average_of_losses_grad", wrong},
                {"produced_grad", produced}};
  if (sign0(produced) == sign0(right) && sign0(right) != 0.0) {
    f.summary = "attack step follows the gradient of the loss of the averaged prediction";
  } else {
    f.severity = Severity::fail;
    f.summary = sign0(produced) == sign0(wrong) ? "attack step follows the average of per-draw gradients"
                                                : "attack step matches neither reference gradient";
  }
  return f;
}

SweepReport epsilon_sweep(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                          std::span<const double> epsilons, const AttackConfig& attack, std::size_t eval_samples,
                          std::uint64_t seed) {
  if (epsilons.empty()) throw ArgumentError("epsilon sweep needs at least one radius");
  SweepReport rep;
  const std::uint64_t eval_seed = derive_seed(seed, 20);
  for (double eps : epsilons) {
    RowMatrix inputs = test.inputs;
    if (eps > 0.0) {
      AttackConfig cfg = attack;
      cfg.epsilon = eps;
      if (attack.step_size && *attack.step_size > eps) cfg.step_size.reset();
      cfg.label_samples = 0;
      inputs = pgd(posterior, arch, test.inputs, test.labels, cfg).adversarial;
    }
    const MeanPrediction pred = posterior_mean_predict(posterior, arch, inputs, eval_samples, eval_seed);
    rep.points.push_back({eps, robust_accuracy(pred.labels, test.labels)});
  }
  AuditFinding& f = rep.finding;
  f.check = AuditCheck::epsilon_sweep;
  constexpr double kBand = 0.02;
  nlohmann::json pts = nlohmann::json::array();
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < rep.points.size(); ++i) {
    pts.push_back({{"epsilon", rep.points[i].epsilon}, {"robust_accuracy", rep.points[i].robust_accuracy}});
    if (i > 0 && rep.points[i].robust_accuracy > rep.points[i - 1].robust_accuracy + kBand) {
      problems.push_back("accuracy rises between eps=" + std::to_string(rep.points[i - 1].epsilon) +
                         " and eps=" + std::to_string(rep.points[i].epsilon));
    }
  }
  if (rep.points.size() > 1 && rep.points.back().robust_accuracy > rep.points.front().robust_accuracy - kBand) {
    problems.push_back("accuracy at the largest radius is not below the smallest");
  }
  f.evidence = {{"points", pts}, {"noise_band", kBand}, {"problems", problems}};
  if (problems.empty()) {
    f.summary = "robust accuracy decreases with the radius";
  } else {
    f.severity = Severity::warn;
    f.summary = "robust accuracy does not decrease with the radius (possible gradient masking)";
  }
  return rep;
}

std::vector<AuditFinding> run_audit_suite(const AuditSubject& subject, const AuditOptions& options) {
  std::vector<AuditFinding> out;
  const RowMatrix probe = subject.probe.topRows(std::min<Eigen::Index>(subject.probe.rows(), kSimplexProbeRows));
  const PosteriorDraw d = subject.posterior.draw(derive_seed(options.seed, 3));
  out.push_back(check_double_softmax(
      forward_probs(subject.arch, d.theta(), probe, ForwardMode::eval_stochastic, d.forward_seed),
      subject.attack.loss));

  AttackConfig cfg = subject.attack;
  cfg.steps = options.attack_steps;
  cfg.label_samples = 0;
  cfg.seed = derive_seed(options.seed, 4);
  const std::span<const int> labels(subject.probe_labels.data(), static_cast<std::size_t>(probe.rows()));
  try {
    out.push_back(check_vanishing_gradients(pgd(subject.posterior, subject.arch, probe, labels, cfg)));
  } catch (const NumericError& e) {
    AuditFinding f;
    f.check = AuditCheck::vanishing_gradients;
    f.severity = Severity::fail;
    f.summary = std::string("attack produced non-finite values: ") + e.what();
    f.evidence = {{"layer", e.where()}};
    out.push_back(std::move(f));
  }
  out.push_back(check_stochasticity_mode(subject.posterior, subject.arch, probe, options.seed));
  out.push_back(check_loss_of_average(eot_gradient_fn(subject.attack.loss, subject.attack.estimator)));
  return out;
}

nlohmann::json audit_report_json(const std::string& subject, std::span<const AuditFinding> findings) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : findings) list.push_back(to_json(f));
  return {{"subject", subject}, {"rollup", to_string(rollup(findings))}, {"findings", list}};
}

namespace fixtures {

namespace {

const SampleShape kProbeShape = {1, 8, 8};
constexpr int kProbeClasses = 4;

RowMatrix random_probe(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RowMatrix x(static_cast<Eigen::Index>(kSimplexProbeRows), static_cast<Eigen::Index>(shape_size(kProbeShape)));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

// Last dense layer scaled up so predictions are confident.
std::vector<double> confident_init(const Architecture& arch, std::uint64_t seed) {
  ParameterVector p = init_parameters(arch, seed);
  const auto& slices = arch.layout->slices();
  for (auto it = slices.rbegin(); it != slices.rend(); ++it) {
    if (it->name.ends_with(".weight")) {
      for (double& v : p.view(it->name)) v *= 8.0;
      break;
    }
  }
  return p.values;
}

AuditSubject finish(std::string name, Posterior posterior, Architecture arch, std::uint64_t seed) {
  AuditSubject s{std::move(name), std::move(posterior), std::move(arch), random_probe(derive_seed(seed, 7)), {}, {}};
  s.probe_labels = posterior_mean_labels(s.posterior, s.arch, s.probe, 20, derive_seed(seed, 8));
  s.attack.epsilon = 0.3;
  s.attack.mc_samples = 4;
  s.attack.batch_size = 64;
  s.attack.seed = derive_seed(seed, 9);
  return s;
}

}  // namespace

AuditSubject healthy(std::uint64_t seed) {
  Architecture arch = build_mlp(kProbeShape, {32}, kProbeClasses, 0.1);
  auto weights = std::make_shared<const std::vector<double>>(confident_init(arch, seed));
  return finish("healthy", Posterior(DropoutPosterior{weights, 0.1, 1e-4}), std::move(arch), seed);
}

AuditSubject double_softmax(std::uint64_t seed) {
  AuditSubject s = healthy(seed);
  s.name = "double_softmax";
  s.attack.loss = LossAdapter::softmax_then_nll;
  return s;
}

AuditSubject averaged_gradients(std::uint64_t seed) {
  AuditSubject s = healthy(seed);
  s.name = "averaged_gradients";
  s.attack.estimator = GradientEstimator::average_of_losses;
  return s;
}

AuditSubject saturated_logits(std::uint64_t seed) {
  AuditSubject s = healthy(seed);
  s.name = "saturated_logits";
  s.arch = with_logit_scale(s.arch, 1000.0);
  return s;
}

AuditSubject leaky_normalization(std::uint64_t seed) {
  Architecture a;
  a.id = "leaky_norm_probe";
  a.input_shape = kProbeShape;
  a.num_classes = kProbeClasses;
  a.layers = {Conv2d{1, 4, 3}, BatchNorm{4, 0.1, 1e-5, true, nullptr}, Relu{}, Flatten{},
              Dense{4 * 8 * 8, static_cast<std::size_t>(kProbeClasses)}};
  Architecture arch = finalize(std::move(a));
  std::vector<double> theta = confident_init(arch, seed);
  return finish("leaky_normalization", Posterior::point_mass(std::move(theta)), std::move(arch), seed);
}

}  // namespace fixtures

}  // namespace bnnr
