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

#ifndef BNNR_DATA_HPP_
#define BNNR_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bnnr/common.hpp"

namespace bnnr {

enum class Split { train, validation, test };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

// Label carried by out-of-distribution samples. Evaluation never counts it
// as correct.
inline constexpr int kOodLabel = -1;

// Labeled inputs in [0,1]; one sample per row of `inputs`.
struct Dataset {
  RowMatrix inputs;
  std::vector<int> labels;
  SampleShape sample_shape;
  int num_classes = 0;
  std::string name;
  Split split = Split::train;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_count() const { return shape_size(sample_shape); }
  std::vector<std::size_t> class_counts() const;

  // Throws ConsistencyError when any invariant is broken.
  void validate() const;
};

enum class SourceFlag { clean, adversarial, in_distribution, out_of_distribution, noisy };

std::string to_string(SourceFlag flag);

struct TaskMixture {
  RowMatrix inputs;
  std::vector<int> labels;
  std::vector<SourceFlag> source_flags;
  SampleShape sample_shape;
  int num_classes = 0;
  // Fraction of samples drawn from the clean / in-distribution side.
  double mixing_ratio = 0.0;

  std::size_t size() const { return labels.size(); }
};

struct NoiseSpec {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// Reads an IDX image/label file pair (MNIST distribution format). Pixels are
// scaled by 1/255 and a single channel dimension is added.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

// Writes the IDX pair for a single-channel dataset; inverse of load_idx up to
// byte quantization.
void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// Loads `name` ("mnist", "fashion_mnist") from `<root>/<name>/`.
Dataset load_named_dataset(const std::filesystem::path& root, const std::string& name,
                           Split split);

// Data root from BNNR_DATA_ROOT, falling back to `fallback`.
std::filesystem::path data_root(const std::filesystem::path& fallback = "data");

// Zero-mean Gaussian draws with standard deviation sigma.
std::vector<double> gaussian_noise(std::size_t count, double sigma, std::uint64_t seed);

// x' = clip(x + g, 0, 1), g ~ N(0, sigma^2).
Dataset make_noisy(const Dataset& dataset, const NoiseSpec& spec);

// Mixes `clean` and `other` and shuffles under `seed`. `flags` names the
// provenance of each side; out_of_distribution samples get kOodLabel. The
// clean side may be larger by one sample.
TaskMixture make_mixture(const Dataset& clean, const Dataset& other,
                         std::pair<SourceFlag, SourceFlag> flags, std::uint64_t seed);

// `n` samples without replacement. Class counts go into metadata.
Dataset subsample(const Dataset& dataset, std::size_t n, std::uint64_t seed);

// Rows [begin, end) in order.
Dataset slice(const Dataset& dataset, std::size_t begin, std::size_t end);

// K isotropic unit-variance 2-D Gaussian clusters with centers on a circle of
// radius `separation`, min-max scaled into [0,1]^2.
Dataset synth_blobs(std::size_t n, int num_classes, double separation, std::uint64_t seed);

// {name, split, sha256, count, shape}.
struct DatasetManifest {
  std::string name;
  std::string split;
  std::string sha256;
  std::size_t count = 0;
  SampleShape shape;
};

DatasetManifest dataset_manifest(const Dataset& dataset);

// Default semantic-shift partner: MNIST -> FashionMNIST and back.
std::string default_ood_pair(const std::string& dataset_name);

// Standard l_inf radius for a dataset (MNIST 0.3, FashionMNIST 0.1).
double default_epsilon(const std::string& dataset_name);

}  // namespace bnnr

#endif  // BNNR_DATA_HPP_
