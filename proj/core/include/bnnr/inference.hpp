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

#ifndef BNNR_INFERENCE_HPP_
#define BNNR_INFERENCE_HPP_

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bnnr/common.hpp"
#include "bnnr/data.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

enum class PosteriorKind { mean_field, dropout, hmc_chain, point_mass };

std::string to_string(PosteriorKind kind);
PosteriorKind posterior_kind_from_string(const std::string& text);

// Isotropic Gaussian prior over every parameter.
struct PriorSpec {
  double mean = 0.0;
  double variance = 1.0;
};

// q(theta) = N(mu, diag(softplus(rho))^2).
struct MeanFieldPosterior {
  std::vector<double> mu;
  std::vector<double> rho;
  PriorSpec prior;

  std::vector<double> sigma() const;
};

struct DropoutPosterior {
  std::shared_ptr<const std::vector<double>> weights;
  double dropout_rate = 0.1;
  double prior_precision = 1e-4;
};

// Post-burn-in samples of an HMC run.
struct HmcChain {
  std::vector<std::shared_ptr<const std::vector<double>>> samples;
  std::size_t burn_in = 0;
  std::size_t leapfrog_steps = 0;
  double step_size = 0.0;
  double acceptance_rate = 0.0;
  std::size_t non_finite_rejections = 0;
};

struct PointMass {
  std::shared_ptr<const std::vector<double>> params;
};

// One parameter setting plus how to run the network with it. Dropout
// posteriors share weights across draws and differ in forward_seed.
struct PosteriorDraw {
  std::shared_ptr<const std::vector<double>> params;
  ForwardMode mode = ForwardMode::eval_stochastic;
  std::uint64_t forward_seed = 0;

  std::span<const double> theta() const { return *params; }
};

class Posterior {
 public:
  using Payload = std::variant<MeanFieldPosterior, DropoutPosterior, HmcChain, PointMass>;

  explicit Posterior(Payload payload);

  static Posterior point_mass(std::vector<double> params);

  PosteriorKind kind() const;
  const Payload& payload() const { return payload_; }
  std::size_t parameter_count() const;

  // Deterministic in seed; point masses ignore it.
  PosteriorDraw draw(std::uint64_t seed) const;

  // The network with stochasticity removed: dropout off, mean-field mean,
  // chain mean, or the point itself.
  PosteriorDraw collapse() const;

 private:
  Payload payload_;
  std::shared_ptr<const std::vector<double>> collapsed_;
};

// n draws. mean_field: mu + sigma * z; dropout: n mask seeds; hmc: uniform
// without replacement when n <= chain length, with replacement otherwise;
// point_mass: n copies.
std::vector<PosteriorDraw> posterior_draws(const Posterior& posterior, std::size_t n,
                                           std::uint64_t seed);

// sum_i log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2.
double kl_diag_gaussians(std::span<const double> mu1, std::span<const double> sigma1,
                         std::span<const double> mu2, std::span<const double> sigma2);
double kl_to_prior(const MeanFieldPosterior& q);

double softplus(double x);
double inverse_softplus(double y);

struct ElboEstimate {
  double value = 0.0;
  double expected_log_likelihood = 0.0;  // rescaled by N/|batch|
  double kl = 0.0;
  std::vector<double> grad_mu;   // filled when requested
  std::vector<double> grad_rho;
};

// Reparameterized Monte Carlo estimate of the variational objective on one
// mini-batch, likelihood term scaled to a dataset of `dataset_size`.
ElboEstimate elbo(const MeanFieldPosterior& q, const Architecture& arch, const RowMatrix& x,
                  std::span<const int> y, std::size_t dataset_size, std::size_t mc_samples,
                  std::uint64_t seed, bool with_gradient = false);

struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
};

struct TrainingCurve {
  std::vector<double> objective;  // per epoch: ELBO for PSVI, -loss otherwise
  std::vector<double> accuracy;   // per epoch, on the training mini-batches
};

struct PsviConfig {
  SgdConfig sgd;
  PriorSpec prior;
  std::size_t mc_samples = 1;
  // Initial sigma as a fraction of the prior standard deviation.
  double init_sigma_scale = 1e-3;
  // Carried for manifest compatibility; not used by this method.
  double alpha = 0.05;
  double reg_scale = 1.0;
};

struct McdConfig {
  SgdConfig sgd;
  double dropout_rate = 0.1;
  double prior_precision = 1e-4;
  double alpha = 0.05;
  double reg_scale = 1.0;
};

struct MapConfig {
  SgdConfig sgd;
  double prior_precision = 1.0;
};

struct TrainResult {
  Posterior posterior;
  TrainingCurve curve;
};

// Non-finite objective during training; keeps the last finite state.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, Posterior last_finite)
      : Error(what), last_finite_(std::move(last_finite)) {}
  const Posterior& last_finite_state() const { return last_finite_; }

 private:
  Posterior last_finite_;
};

TrainResult train_psvi(const Dataset& data, const Architecture& arch, const PsviConfig& config);
// `arch` must contain dropout layers.
TrainResult train_mcd(const Dataset& data, const Architecture& arch, const McdConfig& config);
// Deterministic weights with an L2 penalty prior_precision * |theta|^2 / 2.
TrainResult train_map(const Dataset& data, const Architecture& arch, const MapConfig& config);

}  // namespace bnnr

#endif  // BNNR_INFERENCE_HPP_
