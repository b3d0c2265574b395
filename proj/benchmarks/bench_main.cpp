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

#include <benchmark/benchmark.h>

#include <random>

#include "bnnr/attacks.hpp"
#include "bnnr/selective.hpp"

namespace {

using namespace bnnr;

RowMatrix random_images(Eigen::Index rows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RowMatrix x(rows, 784);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

void BM_CnnForward(benchmark::State& state) {
  const Architecture arch = build_cnn(10);
  const ParameterVector p = init_parameters(arch, 1);
  const RowMatrix x = random_images(state.range(0), 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_logits(arch, p.values, x, ForwardMode::eval_frozen, 0));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CnnForward)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_CnnForwardBackward(benchmark::State& state) {
  const Architecture arch = build_cnn(10);
  const ParameterVector p = init_parameters(arch, 1);
  const RowMatrix x = random_images(state.range(0), 2);
  std::vector<double> grad(p.values.size());
  for (auto _ : state) {
    ForwardTrace trace;
    const RowMatrix logits = forward_logits(arch, p.values, x, ForwardMode::train, 0, &trace);
    backward(arch, p.values, trace, softmax_rows(logits), grad, nullptr);
    benchmark::DoNotOptimize(grad.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CnnForwardBackward)->Arg(32)->Unit(benchmark::kMillisecond);

// Input gradient of the expected-prediction loss over S mean-field draws.
void BM_EotGradient(benchmark::State& state) {
  const Architecture arch = build_cnn(10);
  const ParameterVector p = init_parameters(arch, 1);
  MeanFieldPosterior q;
  q.mu = p.values;
  q.rho.assign(p.values.size(), inverse_softplus(1e-3));
  const Posterior posterior{q};
  const RowMatrix x = random_images(8, 3);
  const std::vector<int> y(8, 3);
  const auto samples = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        eot_loss_and_grad(posterior, arch, x, y, samples, 7, AttackObjective::accuracy_nll).grad.data());
  }
}
BENCHMARK(BM_EotGradient)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_SelectiveCurve(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SelectiveRecord> records(static_cast<std::size_t>(state.range(0)));
  for (auto& r : records) {
    r.score = u(rng);
    r.correct = u(rng) < 1.0 - r.score;
    r.nll = -std::log(1.0 - 0.5 * r.score);
  }
  for (auto _ : state) benchmark::DoNotOptimize(selective_curve(records).accuracy.data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SelectiveCurve)->Arg(1000)->Arg(100000);

}  // namespace

BENCHMARK_MAIN();
