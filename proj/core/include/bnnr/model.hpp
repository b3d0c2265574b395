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

#ifndef BNNR_MODEL_HPP_
#define BNNR_MODEL_HPP_

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bnnr/common.hpp"

namespace bnnr {

// train: dropout sampled, normalization uses and updates batch statistics.
// eval_stochastic: dropout sampled, normalization frozen.
// eval_frozen: no stochasticity at all.
enum class ForwardMode { train, eval_stochastic, eval_frozen };

std::string to_string(ForwardMode mode);

struct ParameterSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::vector<std::size_t> shape;
};

class ParameterLayout {
 public:
  void add(std::string name, std::vector<std::size_t> shape);
  const std::vector<ParameterSlice>& slices() const { return slices_; }
  const ParameterSlice& find(const std::string& name) const;
  std::size_t size() const { return size_; }

 private:
  std::vector<ParameterSlice> slices_;
  std::size_t size_ = 0;
};

// Flat parameter vector plus the registry of named layer slices.
struct ParameterVector {
  std::vector<double> values;
  std::shared_ptr<const ParameterLayout> layout;

  std::size_t size() const { return values.size(); }
  std::span<const double> view(const std::string& name) const;
  std::span<double> view(const std::string& name);
};

std::map<std::string, std::vector<double>> unflatten(const ParameterVector& params);
ParameterVector flatten(std::shared_ptr<const ParameterLayout> layout,
                        const std::map<std::string, std::vector<double>>& named);

// Layers. Convolutions use SAME padding with stride 1; pooling is VALID.
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
};
struct MaxPool2d {
  std::size_t window = 2;
};
struct Relu {};
struct Flatten {};
struct Dense {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};
struct Dropout {
  double rate = 0.0;
};

// Running statistics of a normalization layer. Updated in train mode only,
// unless the layer is built with leak_batch_statistics, which also updates
// them in eval modes (a known-bad setup kept for audit fixtures).
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> variance;
};

struct BatchNorm {
  std::size_t channels = 0;
  double momentum = 0.1;
  double epsilon = 1e-5;
  bool leak_batch_statistics = false;
  std::shared_ptr<NormalizationStats> stats;
};

// Multiplies the pre-softmax scores by a constant.
struct LogitScale {
  double factor = 1.0;
};

using Layer = std::variant<Conv2d, MaxPool2d, Relu, Flatten, Dense, Dropout, BatchNorm, LogitScale>;

struct Architecture {
  std::string id;
  SampleShape input_shape;
  int num_classes = 0;
  std::vector<Layer> layers;
  // Filled by finalize().
  std::vector<SampleShape> layer_inputs;
  SampleShape output_shape;
  std::shared_ptr<const ParameterLayout> layout;

  bool has_dropout() const;
  // Rate of the first dropout layer, 0 when there is none.
  double dropout_rate() const;
  bool has_normalization_layers() const;
  std::size_t parameter_count() const { return layout ? layout->size() : 0; }
  std::string layer_name(std::size_t index) const;
};

// Validates the layer stack, propagates shapes and builds the parameter layout.
Architecture finalize(Architecture arch);

// conv(32,3x3) relu pool conv(64,3x3) relu pool flatten dense(256) relu dense(K).
// With a dropout rate, dropout follows every activation.
Architecture build_cnn(int num_classes, SampleShape input_shape = {1, 28, 28},
                       std::optional<double> dropout_rate = std::nullopt);

Architecture build_mlp(SampleShape input_shape, const std::vector<std::size_t>& hidden,
                       int num_classes, std::optional<double> dropout_rate = std::nullopt);

// Lookup by id: "cnn", "cnn_dropout", "mlp", "mlp_dropout".
Architecture build_architecture(const std::string& id, int num_classes, SampleShape input_shape,
                                double dropout_rate = 0.1);

// Copy of `arch` with a LogitScale layer appended; parameters are unchanged.
Architecture with_logit_scale(const Architecture& arch, double factor);

// He-normal weights, zero biases, unit normalization scale.
ParameterVector init_parameters(const Architecture& arch, std::uint64_t seed);

RowMatrix softmax_rows(const RowMatrix& logits);
RowMatrix log_softmax_rows(const RowMatrix& logits);

// Activations kept for the backward pass.
struct ForwardTrace {
  std::vector<RowMatrix> inputs;                 // input of every layer
  std::vector<std::vector<std::uint8_t>> masks;  // dropout keep masks
  std::vector<std::vector<std::int32_t>> argmax; // pooling winners
  std::vector<RowMatrix> normalized;             // batch-norm x-hat
  std::vector<std::vector<double>> inv_std;      // batch-norm 1/sqrt(var+eps)
  std::vector<bool> batch_statistics;            // batch-norm used batch stats
  RowMatrix logits;
};

// Runs the network on a batch (one sample per row) and returns pre-softmax
// scores. With a trace, everything needed by backward() is kept.
RowMatrix forward_logits(const Architecture& arch, std::span<const double> theta,
                         const RowMatrix& x, ForwardMode mode, std::uint64_t seed,
                         ForwardTrace* trace = nullptr);

// Class probabilities: rows on the simplex.
RowMatrix forward_probs(const Architecture& arch, std::span<const double> theta,
                        const RowMatrix& x, ForwardMode mode, std::uint64_t seed);

// Backpropagates dL/dlogits. Either output may be skipped: pass an empty span
// for param_grad (accumulated into, not overwritten) or nullptr for input_grad.
void backward(const Architecture& arch, std::span<const double> theta, const ForwardTrace& trace,
              const RowMatrix& dlogits, std::span<double> param_grad, RowMatrix* input_grad);

}  // namespace bnnr

#endif  // BNNR_MODEL_HPP_
