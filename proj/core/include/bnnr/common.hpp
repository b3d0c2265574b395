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

#ifndef BNNR_COMMON_HPP_
#define BNNR_COMMON_HPP_

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace bnnr {

// Batches are stored one sample per row; image samples are flattened C*H*W.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Per-sample shape, e.g. {1, 28, 28} for images or {2} for flat features.
using SampleShape = std::vector<std::size_t>;

std::size_t shape_size(const SampleShape& shape);
std::string shape_string(const SampleShape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Two inputs that must agree do not (counts, shapes).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Non-finite values. `where` names the layer or stage that produced them.
class NumericError : public Error {
 public:
  NumericError(std::string where, const std::string& what)
      : Error(what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

// Seeds for independent random streams derived from a parent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream);

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

// Probabilities are clamped to this floor before any logarithm.
inline constexpr double kProbFloor = 1e-12;

}  // namespace bnnr

#endif  // BNNR_COMMON_HPP_
