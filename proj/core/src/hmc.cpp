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

#include "bnnr/hmc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace bnnr {

double leapfrog(const LogDensityFn& log_density, std::vector<double>& position,
                std::vector<double>& momentum, std::vector<double>& grad, double step_size,
                std::size_t steps) {
  const std::size_t n = position.size();
  double logp = 0.0;
  for (std::size_t l = 0; l < steps; ++l) {
    for (std::size_t i = 0; i < n; ++i) momentum[i] += 0.5 * step_size * grad[i];
    for (std::size_t i = 0; i < n; ++i) position[i] += step_size * momentum[i];
    std::fill(grad.begin(), grad.end(), 0.0);
    logp = log_density(position, grad);
    for (std::size_t i = 0; i < n; ++i) momentum[i] += 0.5 * step_size * grad[i];
  }
  return logp;
}

double metropolis_accept_probability(double delta_h) {
  if (!std::isfinite(delta_h)) return 0.0;
  return delta_h <= 0.0 ? 1.0 : std::exp(-delta_h);
}

namespace {

double kinetic(const std::vector<double>& p) {
  double k = 0.0;
  for (double v : p) k += v * v;
  return 0.5 * k;
}

}  // namespace

HmcChain hmc_sample(const LogDensityFn& log_density, std::vector<double> initial,
                    const HmcConfig& config) {
  if (config.num_samples == 0) throw ArgumentError("HMC needs at least one sample");
  if (!(config.step_size > 0.0) || config.leapfrog_steps == 0) {
    throw ArgumentError("HMC step size and leapfrog steps must be positive");
  }
  const std::size_t n = initial.size();
  std::vector<double> q = std::move(initial);
  std::vector<double> grad(n, 0.0);
  double logp = log_density(q, grad);
  if (!std::isfinite(logp)) throw NumericError("hmc", "initial log density is not finite");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  HmcChain chain;
  chain.burn_in = config.burn_in;
  chain.leapfrog_steps = config.leapfrog_steps;
  chain.step_size = config.step_size;
  std::size_t accepted = 0;
  const std::size_t total = config.burn_in + config.num_samples;
  std::vector<double> q_new(n), p(n), grad_new(n);
  for (std::size_t it = 0; it < total; ++it) {
    for (double& v : p) v = normal(rng);
    const double h0 = -logp + kinetic(p);
    q_new = q;
    grad_new = grad;
    double logp_new = -std::numeric_limits<double>::infinity();
    try {
      logp_new = leapfrog(log_density, q_new, p, grad_new, config.step_size, config.leapfrog_steps);
    } catch (const NumericError&) {
      logp_new = -std::numeric_limits<double>::infinity();
    }
    const double h1 = -logp_new + kinetic(p);
    const double u = uniform(rng);
    if (!std::isfinite(h1)) {
      ++chain.non_finite_rejections;
    } else if (u < metropolis_accept_probability(h1 - h0)) {
      q.swap(q_new);
      grad.swap(grad_new);
      logp = logp_new;
      ++accepted;
    }
    if (it >= config.burn_in) chain.samples.push_back(std::make_shared<const std::vector<double>>(q));
  }
  chain.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(total);
  return chain;
}

LogDensityFn network_log_posterior(const Dataset& data, const Architecture& arch, PriorSpec prior) {
  if (!(prior.variance > 0.0)) throw ArgumentError("prior variance must be positive");
  data.validate();
  return [&data, &arch, prior](std::span<const double> theta, std::span<double> grad) {
    constexpr Eigen::Index kChunk = 1000;
    const Eigen::Index n = data.inputs.rows();
    double logp = 0.0;
    for (Eigen::Index start = 0; start < n; start += kChunk) {
      const Eigen::Index rows = std::min(kChunk, n - start);
      const RowMatrix xb = data.inputs.middleRows(start, rows);
      ForwardTrace trace;
      const RowMatrix logits = forward_logits(arch, theta, xb, ForwardMode::eval_frozen, 0, &trace);
      const RowMatrix lp = log_softmax_rows(logits);
      RowMatrix dlogits = -lp.array().exp().matrix();
      for (Eigen::Index i = 0; i < rows; ++i) {
        const int y = data.labels[static_cast<std::size_t>(start + i)];
        logp += lp(i, y);
        dlogits(i, y) += 1.0;
      }
      backward(arch, theta, trace, dlogits, grad, nullptr);
    }
    const double inv_v = 1.0 / prior.variance;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double d = theta[i] - prior.mean;
      logp -= 0.5 * d * d * inv_v;
      grad[i] -= d * inv_v;
    }
    if (!std::isfinite(logp)) throw NumericError("log_posterior", "non-finite log density");
    return logp;
  };
}

TrainResult train_hmc(const Dataset& data, const Architecture& arch, const HmcTrainConfig& config) {
  std::vector<double> init;
  TrainingCurve curve;
  if (config.init_from_map) {
    MapConfig map = config.map;
    map.prior_precision = 1.0 / config.prior.variance;
    TrainResult start = train_map(data, arch, map);
    curve = start.curve;
    init = *std::get<PointMass>(start.posterior.payload()).params;
  } else {
    init = init_parameters(arch, config.hmc.seed).values;
  }
  const LogDensityFn logp = network_log_posterior(data, arch, config.prior);
  HmcChain chain = hmc_sample(logp, std::move(init), config.hmc);
  return {Posterior(std::move(chain)), std::move(curve)};
}

}  // namespace bnnr
