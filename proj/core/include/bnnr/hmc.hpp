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

#ifndef BNNR_HMC_HPP_
#define BNNR_HMC_HPP_

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

struct HmcConfig {
  double step_size = 0.001;
  std::size_t leapfrog_steps = 20;
  std::size_t num_samples = 100;
  std::size_t burn_in = 100;
  std::uint64_t seed = 0;
};

// Returns log p(theta) up to a constant and writes its gradient into grad.
// May throw NumericError; the sampler treats that as an infinite energy.
using LogDensityFn = std::function<double(std::span<const double> theta, std::span<double> grad)>;

// In-place leapfrog integration of Hamiltonian dynamics with unit mass.
// Returns log p at the final position; `grad` holds its gradient on entry
// (at the initial position) and on exit (at the final one).
double leapfrog(const LogDensityFn& log_density, std::vector<double>& position,
                std::vector<double>& momentum, std::vector<double>& grad, double step_size,
                std::size_t steps);

// min(1, exp(-delta_h)); 0 when delta_h is not finite.
double metropolis_accept_probability(double delta_h);

// Metropolis-corrected HMC. The first burn_in iterations are discarded.
HmcChain hmc_sample(const LogDensityFn& log_density, std::vector<double> initial,
                    const HmcConfig& config);

// Full-batch log posterior of a network: sum_i log p(y_i | x_i, theta) plus
// an isotropic Gaussian prior.
LogDensityFn network_log_posterior(const Dataset& data, const Architecture& arch, PriorSpec prior);

struct HmcTrainConfig {
  HmcConfig hmc;
  PriorSpec prior;
  // Start the chain at a MAP estimate trained with these settings.
  bool init_from_map = true;
  MapConfig map;
};

TrainResult train_hmc(const Dataset& data, const Architecture& arch, const HmcTrainConfig& config);

}  // namespace bnnr

#endif  // BNNR_HMC_HPP_
