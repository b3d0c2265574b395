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

#ifndef BNNR_AUTODIFF_HPP_
#define BNNR_AUTODIFF_HPP_

#include <functional>
#include <span>
#include <vector>

#include "bnnr/common.hpp"

namespace bnnr::ad {

class Tape;

// Scalar recorded on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  double value() const;
  std::size_t index() const { return index_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  Var variable(double value);
  Var constant(double value) { return variable(value); }
  // Node with up to two parents and their local partial derivatives.
  Var push(double value, std::size_t a, double da, std::size_t b, double db);
  Var push(double value, std::size_t a, double da);
  // d(output)/d(node) for every node.
  std::vector<double> gradient(const Var& output) const;
  double value(std::size_t index) const { return nodes_[index].value; }

 private:
  struct Node {
    double value;
    std::size_t parent[2];
    double partial[2];
    int arity;
  };
  std::vector<Node> nodes_;
};

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
Var sum(std::span<const Var> values);

}  // namespace bnnr::ad

namespace bnnr {

using ScalarLossFn = std::function<ad::Var(std::span<const ad::Var>)>;

// Gradient of a scalar loss with respect to its inputs, by reverse-mode
// differentiation. Throws NumericError on non-finite loss or gradient.
std::vector<double> grad_wrt_input(const ScalarLossFn& loss, std::span<const double> x);

}  // namespace bnnr

#endif  // BNNR_AUTODIFF_HPP_
