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

#include "bnnr/autodiff.hpp"

#include <cmath>

namespace bnnr::ad {

double Var::value() const { return tape_->value(index_); }

Var Tape::variable(double value) {
  nodes_.push_back({value, {0, 0}, {0.0, 0.0}, 0});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(double value, std::size_t a, double da, std::size_t b, double db) {
  nodes_.push_back({value, {a, b}, {da, db}, 2});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(double value, std::size_t a, double da) {
  nodes_.push_back({value, {a, 0}, {da, 0.0}, 1});
  return Var(this, nodes_.size() - 1);
}

std::vector<double> Tape::gradient(const Var& output) const {
  std::vector<double> adj(nodes_.size(), 0.0);
  adj[output.index()] = 1.0;
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    for (int k = 0; k < n.arity; ++k) adj[n.parent[k]] += adj[i] * n.partial[k];
  }
  return adj;
}

namespace {

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ArgumentError("variables from different tapes");
  return *a.tape();
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  return tape_of(a, b).push(a.value() + b.value(), a.index(), 1.0, b.index(), 1.0);
}
Var operator-(const Var& a, const Var& b) {
  return tape_of(a, b).push(a.value() - b.value(), a.index(), 1.0, b.index(), -1.0);
}
Var operator*(const Var& a, const Var& b) {
  return tape_of(a, b).push(a.value() * b.value(), a.index(), b.value(), b.index(), a.value());
}
Var operator/(const Var& a, const Var& b) {
  const double inv = 1.0 / b.value();
  return tape_of(a, b).push(a.value() * inv, a.index(), inv, b.index(), -a.value() * inv * inv);
}
Var operator-(const Var& a) { return a.tape()->push(-a.value(), a.index(), -1.0); }
Var operator+(const Var& a, double b) { return a.tape()->push(a.value() + b, a.index(), 1.0); }
Var operator+(double a, const Var& b) { return b + a; }
Var operator-(const Var& a, double b) { return a.tape()->push(a.value() - b, a.index(), 1.0); }
Var operator-(double a, const Var& b) { return b.tape()->push(a - b.value(), b.index(), -1.0); }
Var operator*(const Var& a, double b) { return a.tape()->push(a.value() * b, a.index(), b); }
Var operator*(double a, const Var& b) { return b * a; }
Var operator/(const Var& a, double b) { return a * (1.0 / b); }

Var exp(const Var& a) {
  const double e = std::exp(a.value());
  return a.tape()->push(e, a.index(), e);
}

Var log(const Var& a) {
  const double v = std::max(a.value(), kProbFloor);
  return a.tape()->push(std::log(v), a.index(), 1.0 / v);
}

Var relu(const Var& a) {
  return a.tape()->push(std::max(a.value(), 0.0), a.index(), a.value() > 0.0 ? 1.0 : 0.0);
}

Var sum(std::span<const Var> values) {
  if (values.empty()) throw ArgumentError("sum of no variables");
  Var acc = values[0];
  for (std::size_t i = 1; i < values.size(); ++i) acc = acc + values[i];
  return acc;
}

}  // namespace bnnr::ad

namespace bnnr {

std::vector<double> grad_wrt_input(const ScalarLossFn& loss, std::span<const double> x) {
  ad::Tape tape;
  std::vector<ad::Var> inputs;
  inputs.reserve(x.size());
  for (double v : x) inputs.push_back(tape.variable(v));
  const ad::Var out = loss(inputs);
  if (!std::isfinite(out.value())) throw NumericError("loss", "non-finite loss value");
  const auto adj = tape.gradient(out);
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad[i] = adj[inputs[i].index()];
    if (!std::isfinite(grad[i])) throw NumericError("loss", "non-finite input gradient");
  }
  return grad;
}

}  // namespace bnnr
