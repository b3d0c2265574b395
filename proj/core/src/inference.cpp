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

#include "bnnr/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bnnr {

std::string to_string(PosteriorKind kind) {
  switch (kind) {
    case PosteriorKind::mean_field: return "mean_field";
    case PosteriorKind::dropout: return "dropout";
    case PosteriorKind::hmc_chain: return "hmc_chain";
    case PosteriorKind::point_mass: return "point_mass";
  }
  return "unknown";
}

PosteriorKind posterior_kind_from_string(const std::string& text) {
  if (text == "mean_field" || text == "psvi") return PosteriorKind::mean_field;
  if (text == "dropout" || text == "mcd") return PosteriorKind::dropout;
  if (text == "hmc_chain" || text == "hmc") return PosteriorKind::hmc_chain;
  if (text == "point_mass" || text == "map") return PosteriorKind::point_mass;
  throw ArgumentError("unknown posterior kind: " + text);
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw ArgumentError("inverse_softplus needs a positive argument");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::shared_ptr<const std::vector<double>> share(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

std::vector<double> standard_normal(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(n);
  for (double& v : z) v = normal(rng);
  return z;
}

std::vector<double> chain_mean(const HmcChain& chain) {
  if (chain.samples.empty()) throw ConsistencyError("HMC chain has no samples");
  std::vector<double> mean(chain.samples.front()->size(), 0.0);
  for (const auto& s : chain.samples) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (*s)[i];
  }
  const double inv = 1.0 / static_cast<double>(chain.samples.size());
  for (double& v : mean) v *= inv;
  return mean;
}

}  // namespace

std::vector<double> MeanFieldPosterior::sigma() const {
  std::vector<double> s(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) s[i] = softplus(rho[i]);
  return s;
}

Posterior::Posterior(Payload payload) : payload_(std::move(payload)) {
  std::visit(
      [this](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, MeanFieldPosterior>) {
          if (p.mu.size() != p.rho.size()) throw ConsistencyError("mean-field mu/rho size mismatch");
          collapsed_ = share(p.mu);
        } else if constexpr (std::is_same_v<T, DropoutPosterior>) {
          if (!p.weights) throw ConsistencyError("dropout posterior without weights");
          collapsed_ = p.weights;
        } else if constexpr (std::is_same_v<T, HmcChain>) {
          collapsed_ = share(chain_mean(p));
        } else {
          if (!p.params) throw ConsistencyError("point mass without parameters");
          collapsed_ = p.params;
        }
      },
      payload_);
}

Posterior Posterior::point_mass(std::vector<double> params) {
  return Posterior(PointMass{share(std::move(params))});
}

PosteriorKind Posterior::kind() const {
  return static_cast<PosteriorKind>(payload_.index());
}

std::size_t Posterior::parameter_count() const { return collapsed_->size(); }

PosteriorDraw Posterior::draw(std::uint64_t seed) const {
  return posterior_draws(*this, 1, seed).front();
}

PosteriorDraw Posterior::collapse() const {
  return PosteriorDraw{collapsed_, ForwardMode::eval_frozen, 0};
}

std::vector<PosteriorDraw> posterior_draws(const Posterior& posterior, std::size_t n,
                                           std::uint64_t seed) {
  std::vector<PosteriorDraw> draws;
  draws.reserve(n);
  const auto& payload = posterior.payload();
  switch (posterior.kind()) {
    case PosteriorKind::mean_field: {
      const auto& q = std::get<MeanFieldPosterior>(payload);
      const auto sigma = q.sigma();
      for (std::size_t i = 0; i < n; ++i) {
        auto theta = standard_normal(q.mu.size(), derive_seed(seed, i, 0));
        for (std::size_t j = 0; j < theta.size(); ++j) theta[j] = q.mu[j] + sigma[j] * theta[j];
        draws.push_back({share(std::move(theta)), ForwardMode::eval_stochastic, derive_seed(seed, i, 1)});
      }
      break;
    }
    case PosteriorKind::dropout: {
      const auto& d = std::get<DropoutPosterior>(payload);
      for (std::size_t i = 0; i < n; ++i) {
        draws.push_back({d.weights, ForwardMode::eval_stochastic, derive_seed(seed, i, 1)});
      }
      break;
    }
    case PosteriorKind::hmc_chain: {
      const auto& chain = std::get<HmcChain>(payload);
      const std::size_t m = chain.samples.size();
      if (m == 0) throw ConsistencyError("HMC chain has no samples");
      std::mt19937_64 rng(seed);
      std::vector<std::size_t> picks;
      if (n <= m) {
        std::vector<std::size_t> order(m);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, m - 1);
          std::swap(order[i], order[pick(rng)]);
        }
        picks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, m - 1);
        for (std::size_t i = 0; i < n; ++i) picks.push_back(pick(rng));
      }
      for (std::size_t i = 0; i < n; ++i) {
        draws.push_back({chain.samples[picks[i]], ForwardMode::eval_stochastic, derive_seed(seed, i, 1)});
      }
      break;
    }
    case PosteriorKind::point_mass: {
      const auto& p = std::get<PointMass>(payload);
      for (std::size_t i = 0; i < n; ++i) {
        draws.push_back({p.params, ForwardMode::eval_stochastic, derive_seed(seed, i, 1)});
      }
      break;
    }
  }
  return draws;
}

double kl_diag_gaussians(std::span<const double> mu1, std::span<const double> sigma1,
                         std::span<const double> mu2, std::span<const double> sigma2) {
  const std::size_t n = mu1.size();
  if (sigma1.size() != n || mu2.size() != n || sigma2.size() != n) {
    throw ArgumentError("kl_diag_gaussians: size mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sigma1[i] > 0.0) || !(sigma2[i] > 0.0)) {
      throw ArgumentError("kl_diag_gaussians: standard deviations must be positive");
    }
    const double d = mu1[i] - mu2[i];
    kl += std::log(sigma2[i] / sigma1[i]) +
          (sigma1[i] * sigma1[i] + d * d) / (2.0 * sigma2[i] * sigma2[i]) - 0.5;
  }
  return kl;
}

double kl_to_prior(const MeanFieldPosterior& q) {
  const std::size_t n = q.mu.size();
  const double s2 = std::sqrt(q.prior.variance);
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s1 = softplus(q.rho[i]);
    if (!(s1 > 0.0)) throw NumericError("kl", "posterior standard deviation underflowed");
    const double d = q.mu[i] - q.prior.mean;
    kl += std::log(s2 / s1) + (s1 * s1 + d * d) / (2.0 * q.prior.variance) - 0.5;
  }
  return kl;
}

namespace {

// Sum over rows of log softmax(logits)[y]; dlogits = d(sum)/dlogits if given.
double sum_log_likelihood(const RowMatrix& logits, std::span<const int> y, RowMatrix* dlogits,
                          std::size_t* correct) {
  const RowMatrix logp = log_softmax_rows(logits);
  double total = 0.0;
  if (dlogits) *dlogits = -logp.array().exp().matrix();
  for (Eigen::Index i = 0; i < logp.rows(); ++i) {
    total += logp(i, y[static_cast<std::size_t>(i)]);
    if (dlogits) (*dlogits)(i, y[static_cast<std::size_t>(i)]) += 1.0;
    if (correct) {
      Eigen::Index arg = 0;
      logp.row(i).maxCoeff(&arg);
      if (arg == y[static_cast<std::size_t>(i)]) ++*correct;
    }
  }
  return total;
}

RowMatrix gather_rows(const RowMatrix& x, std::span<const std::size_t> idx) {
  RowMatrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

// Heavy-ball SGD: v <- m v + g; theta <- theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum(std::size_t n, double lr, double momentum) : velocity_(n, 0.0), lr_(lr), m_(momentum) {}
  void step(std::vector<double>& theta, std::span<const double> grad) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      velocity_[i] = m_ * velocity_[i] + grad[i];
      theta[i] -= lr_ * velocity_[i];
    }
  }

 private:
  std::vector<double> velocity_;
  double lr_;
  double m_;
};

void check_training_inputs(const Dataset& data, const Architecture& arch, const SgdConfig& sgd) {
  data.validate();
  if (data.size() == 0) throw ArgumentError("training set is empty");
  if (shape_size(data.sample_shape) != shape_size(arch.input_shape)) {
    throw ConsistencyError("dataset sample shape " + shape_string(data.sample_shape) +
                           " does not match architecture input " + shape_string(arch.input_shape));
  }
  if (data.num_classes > arch.num_classes) {
    throw ConsistencyError("dataset has more classes than the architecture outputs");
  }
  if (sgd.batch_size == 0 || sgd.epochs == 0) throw ArgumentError("batch size and epochs must be positive");
}

// Shuffled mini-batch index lists for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                    std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

// Shared loop for the deterministic-weight trainers: minimizes mean batch
// cross-entropy plus precision * |theta|^2 / (2 N).
TrainingCurve train_l2(const Dataset& data, const Architecture& arch, const SgdConfig& sgd,
                       double precision, std::vector<double>& theta,
                       const std::function<Posterior(std::vector<double>)>& wrap) {
  const std::size_t n = data.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  SgdMomentum opt(theta.size(), sgd.learning_rate, sgd.momentum);
  TrainingCurve curve;
  std::vector<double> grad(theta.size());
  std::vector<double> last_finite = theta;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < sgd.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto batches = epoch_batches(n, sgd.batch_size, derive_seed(sgd.seed, 1, epoch));
    for (const auto& idx : batches) {
      const RowMatrix xb = gather_rows(data.inputs, idx);
      std::vector<int> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.labels[idx[i]];
      ForwardTrace trace;
      RowMatrix dlogits;
      double ll = 0.0;
      try {
        const RowMatrix logits =
            forward_logits(arch, theta, xb, ForwardMode::train, derive_seed(sgd.seed, 2, step), &trace);
        ll = sum_log_likelihood(logits, yb, &dlogits, &correct);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged at epoch ") + std::to_string(epoch) +
                                ": " + e.what(),
                            wrap(last_finite));
      }
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double sq = 0.0;
      for (double t : theta) sq += t * t;
      const double loss = -ll * inv_b + precision * sq * 0.5 * inv_n;
      if (!std::isfinite(loss)) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch), wrap(last_finite));
      }
      // d(-mean ll)/dlogits
      dlogits *= -inv_b;
      std::fill(grad.begin(), grad.end(), 0.0);
      backward(arch, theta, trace, dlogits, grad, nullptr);
      for (std::size_t i = 0; i < theta.size(); ++i) grad[i] += precision * theta[i] * inv_n;
      if (!all_finite(grad)) {
        throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch), wrap(last_finite));
      }
      last_finite = theta;
      opt.step(theta, grad);
      loss_sum += loss * static_cast<double>(idx.size());
      ++step;
    }
    curve.objective.push_back(-loss_sum * inv_n);
    curve.accuracy.push_back(static_cast<double>(correct) * inv_n);
  }
  if (!all_finite(theta)) throw TrainingError("non-finite parameters after training", wrap(last_finite));
  return curve;
}

}  // namespace

ElboEstimate elbo(const MeanFieldPosterior& q, const Architecture& arch, const RowMatrix& x,
                  std::span<const int> y, std::size_t dataset_size, std::size_t mc_samples,
                  std::uint64_t seed, bool with_gradient) {
  if (mc_samples == 0) throw ArgumentError("elbo needs at least one Monte Carlo sample");
  if (static_cast<std::size_t>(x.rows()) != y.size() || y.empty()) {
    throw ArgumentError("elbo: batch inputs and labels disagree");
  }
  const std::size_t p = q.mu.size();
  const double scale = static_cast<double>(dataset_size) / static_cast<double>(y.size());
  const auto sigma = q.sigma();
  ElboEstimate est;
  if (with_gradient) {
    est.grad_mu.assign(p, 0.0);
    est.grad_rho.assign(p, 0.0);
  }
  std::vector<double> g(with_gradient ? p : 0);
  double ll_sum = 0.0;
  for (std::size_t m = 0; m < mc_samples; ++m) {
    const auto z = standard_normal(p, derive_seed(seed, m, 0));
    std::vector<double> theta(p);
    for (std::size_t j = 0; j < p; ++j) theta[j] = q.mu[j] + sigma[j] * z[j];
    ForwardTrace trace;
    RowMatrix dlogits;
    const RowMatrix logits = forward_logits(arch, theta, x, ForwardMode::train, derive_seed(seed, m, 1),
                                            with_gradient ? &trace : nullptr);
    ll_sum += sum_log_likelihood(logits, y, with_gradient ? &dlogits : nullptr, nullptr);
    if (with_gradient) {
      std::fill(g.begin(), g.end(), 0.0);
      backward(arch, theta, trace, dlogits, g, nullptr);
      for (std::size_t j = 0; j < p; ++j) {
        est.grad_mu[j] += g[j];
        est.grad_rho[j] += g[j] * z[j];
      }
    }
  }
  const double inv_m = 1.0 / static_cast<double>(mc_samples);
  est.expected_log_likelihood = scale * ll_sum * inv_m;
  est.kl = kl_to_prior(q);
  est.value = est.expected_log_likelihood - est.kl;
  if (with_gradient) {
    const double v = q.prior.variance;
    for (std::size_t j = 0; j < p; ++j) {
      const double s = sigma[j];
      est.grad_mu[j] = scale * inv_m * est.grad_mu[j] - (q.mu[j] - q.prior.mean) / v;
      est.grad_rho[j] = (scale * inv_m * est.grad_rho[j] - (-1.0 / s + s / v)) * sigmoid(q.rho[j]);
    }
  }
  return est;
}

TrainResult train_psvi(const Dataset& data, const Architecture& arch, const PsviConfig& config) {
  check_training_inputs(data, arch, config.sgd);
  if (!(config.prior.variance > 0.0)) throw ArgumentError("prior variance must be positive");
  if (config.mc_samples == 0) throw ArgumentError("mc_samples must be positive");
  const std::size_t n = data.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  MeanFieldPosterior q;
  q.prior = config.prior;
  q.mu = init_parameters(arch, config.sgd.seed).values;
  const double rho0 = inverse_softplus(config.init_sigma_scale * std::sqrt(config.prior.variance));
  q.rho.assign(q.mu.size(), rho0);

  SgdMomentum opt_mu(q.mu.size(), config.sgd.learning_rate, config.sgd.momentum);
  SgdMomentum opt_rho(q.rho.size(), config.sgd.learning_rate, config.sgd.momentum);
  MeanFieldPosterior last_finite = q;
  TrainingCurve curve;
  std::vector<double> grad(q.mu.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.sgd.epochs; ++epoch) {
    double elbo_sum = 0.0;
    std::size_t batches_seen = 0;
    std::size_t correct = 0;
    const auto batches = epoch_batches(n, config.sgd.batch_size, derive_seed(config.sgd.seed, 1, epoch));
    for (const auto& idx : batches) {
      const RowMatrix xb = gather_rows(data.inputs, idx);
      std::vector<int> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.labels[idx[i]];
      ElboEstimate est;
      try {
        est = elbo(q, arch, xb, yb, n, config.mc_samples, derive_seed(config.sgd.seed, 2, step), true);
      } catch (const NumericError& e) {
        throw TrainingError("variational training diverged at epoch " + std::to_string(epoch) + ": " +
                                e.what(),
                            Posterior(last_finite));
      }
      if (!std::isfinite(est.value) || !all_finite(est.grad_mu) || !all_finite(est.grad_rho)) {
        throw TrainingError("variational training diverged at epoch " + std::to_string(epoch),
                            Posterior(last_finite));
      }
      // Training accuracy of the mean network on this batch.
      const RowMatrix logits = forward_logits(arch, q.mu, xb, ForwardMode::eval_frozen, 0);
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (arg == yb[static_cast<std::size_t>(i)]) ++correct;
      }
      last_finite = q;
      // Minimize -ELBO / N.
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = -est.grad_mu[j] * inv_n;
      opt_mu.step(q.mu, grad);
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = -est.grad_rho[j] * inv_n;
      opt_rho.step(q.rho, grad);
      elbo_sum += est.value;
      ++batches_seen;
      ++step;
    }
    curve.objective.push_back(elbo_sum / static_cast<double>(batches_seen));
    curve.accuracy.push_back(static_cast<double>(correct) * inv_n);
  }
  return {Posterior(std::move(q)), std::move(curve)};
}

TrainResult train_mcd(const Dataset& data, const Architecture& arch, const McdConfig& config) {
  check_training_inputs(data, arch, config.sgd);
  if (!arch.has_dropout()) throw ConsistencyError("dropout training needs an architecture with dropout");
  std::vector<double> theta = init_parameters(arch, config.sgd.seed).values;
  const double rate = arch.dropout_rate();
  const double prec = config.prior_precision;
  auto wrap = [rate, prec](std::vector<double> w) {
    return Posterior(DropoutPosterior{share(std::move(w)), rate, prec});
  };
  TrainingCurve curve = train_l2(data, arch, config.sgd, prec, theta, wrap);
  return {wrap(std::move(theta)), std::move(curve)};
}

TrainResult train_map(const Dataset& data, const Architecture& arch, const MapConfig& config) {
  check_training_inputs(data, arch, config.sgd);
  std::vector<double> theta = init_parameters(arch, config.sgd.seed).values;
  auto wrap = [](std::vector<double> w) { return Posterior::point_mass(std::move(w)); };
  TrainingCurve curve = train_l2(data, arch, config.sgd, config.prior_precision, theta, wrap);
  return {wrap(std::move(theta)), std::move(curve)};
}

}  // namespace bnnr
