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

#include "bnnr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>

namespace bnnr {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw FormatError("truncated IDX header in " + path.string());
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

void assert_unit_interval(const RowMatrix& inputs, const char* stage) {
  if (inputs.size() == 0) return;
  if (inputs.minCoeff() < 0.0 || inputs.maxCoeff() > 1.0) {
    throw ConsistencyError(std::string(stage) + " produced inputs outside [0,1]");
  }
}

Dataset take_rows(const Dataset& d, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), d.inputs.cols());
  out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) =
        d.inputs.row(static_cast<Eigen::Index>(rows[i]));
    out.labels[i] = d.labels[rows[i]];
  }
  out.sample_shape = d.sample_shape;
  out.num_classes = d.num_classes;
  out.name = d.name;
  out.split = d.split;
  out.metadata = d.metadata;
  return out;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "unknown";
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "validation") return Split::validation;
  if (text == "test") return Split::test;
  throw ArgumentError("unknown split '" + text + "'");
}

std::string to_string(SourceFlag flag) {
  switch (flag) {
    case SourceFlag::clean: return "clean";
    case SourceFlag::adversarial: return "adversarial";
    case SourceFlag::in_distribution: return "in_distribution";
    case SourceFlag::out_of_distribution: return "out_of_distribution";
    case SourceFlag::noisy: return "noisy";
  }
  return "unknown";
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int y : labels) {
    if (y >= 0 && y < num_classes) ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

void Dataset::validate() const {
  if (num_classes < 1) throw ConsistencyError(name + ": num_classes must be positive");
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) {
    throw ConsistencyError(name + ": " + std::to_string(inputs.rows()) + " inputs but " +
                           std::to_string(labels.size()) + " labels");
  }
  if (static_cast<std::size_t>(inputs.cols()) != feature_count()) {
    throw ConsistencyError(name + ": input width does not match shape " +
                           shape_string(sample_shape));
  }
  for (int y : labels) {
    if (y != kOodLabel && (y < 0 || y >= num_classes)) {
      throw ConsistencyError(name + ": label " + std::to_string(y) + " out of range");
    }
  }
  assert_unit_interval(inputs, name.c_str());
}

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw FormatError("cannot open " + images_path.string());
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw FormatError("cannot open " + labels_path.string());

  if (read_be32(images, images_path) != kImageMagic) {
    throw FormatError("bad IDX image magic in " + images_path.string());
  }
  const std::uint32_t n = read_be32(images, images_path);
  const std::uint32_t h = read_be32(images, images_path);
  const std::uint32_t w = read_be32(images, images_path);

  if (read_be32(labels, labels_path) != kLabelMagic) {
    throw FormatError("bad IDX label magic in " + labels_path.string());
  }
  const std::uint32_t n_labels = read_be32(labels, labels_path);
  if (n_labels != n) {
    throw ConsistencyError(images_path.string() + " has " + std::to_string(n) +
                           " images but " + labels_path.string() + " has " +
                           std::to_string(n_labels) + " labels");
  }

  const std::size_t pixels = std::size_t{h} * w;
  std::vector<unsigned char> raw(std::size_t{n} * pixels);
  if (!images.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("truncated pixel data in " + images_path.string());
  }
  std::vector<unsigned char> raw_labels(n);
  if (!labels.read(reinterpret_cast<char*>(raw_labels.data()), n)) {
    throw FormatError("truncated label data in " + labels_path.string());
  }

  Dataset d;
  d.inputs.resize(n, static_cast<Eigen::Index>(pixels));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    d.inputs.data()[i] = raw[i] / 255.0;
  }
  d.labels.assign(raw_labels.begin(), raw_labels.end());
  d.sample_shape = {1, h, w};
  d.num_classes = raw_labels.empty() ? 1 : 1 + *std::max_element(raw_labels.begin(), raw_labels.end());
  d.name = images_path.parent_path().filename().string();
  d.metadata["images_path"] = images_path.string();
  d.validate();
  return d;
}

void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (dataset.sample_shape.size() != 3 || dataset.sample_shape[0] != 1) {
    throw ArgumentError("write_idx needs single-channel image data");
  }
  std::ofstream images(images_path, std::ios::binary);
  write_be32(images, kImageMagic);
  write_be32(images, static_cast<std::uint32_t>(dataset.size()));
  write_be32(images, static_cast<std::uint32_t>(dataset.sample_shape[1]));
  write_be32(images, static_cast<std::uint32_t>(dataset.sample_shape[2]));
  for (Eigen::Index i = 0; i < dataset.inputs.size(); ++i) {
    const auto byte = static_cast<unsigned char>(std::lround(dataset.inputs.data()[i] * 255.0));
    images.put(static_cast<char>(byte));
  }
  std::ofstream labels(labels_path, std::ios::binary);
  write_be32(labels, kLabelMagic);
  write_be32(labels, static_cast<std::uint32_t>(dataset.size()));
  for (int y : dataset.labels) labels.put(static_cast<char>(y));
}

Dataset load_named_dataset(const std::filesystem::path& root, const std::string& name,
                           Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  const auto dir = root / name;
  Dataset d = load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
  d.name = name;
  d.split = split;
  d.num_classes = 10;
  return d;
}

std::filesystem::path data_root(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("BNNR_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return fallback;
}

std::vector<double> gaussian_noise(std::size_t count, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ArgumentError("noise sigma must be >= 0");
  std::vector<double> out(count, 0.0);
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (double& v : out) v = normal(rng);
  return out;
}

Dataset make_noisy(const Dataset& dataset, const NoiseSpec& spec) {
  dataset.validate();
  Dataset out = dataset;
  const auto noise = gaussian_noise(static_cast<std::size_t>(out.inputs.size()), spec.sigma, spec.seed);
  for (Eigen::Index i = 0; i < out.inputs.size(); ++i) {
    out.inputs.data()[i] = std::clamp(out.inputs.data()[i] + noise[static_cast<std::size_t>(i)], 0.0, 1.0);
  }
  out.metadata["noise_sigma"] = std::to_string(spec.sigma);
  assert_unit_interval(out.inputs, "make_noisy");
  return out;
}

TaskMixture make_mixture(const Dataset& clean, const Dataset& other,
                         std::pair<SourceFlag, SourceFlag> flags, std::uint64_t seed) {
  if (clean.sample_shape != other.sample_shape) {
    throw ConsistencyError("mixture halves have shapes " + shape_string(clean.sample_shape) +
                           " and " + shape_string(other.sample_shape));
  }
  if (clean.size() != other.size() && clean.size() != other.size() + 1) {
    throw ConsistencyError("mixture halves must have equal size (clean side may be one larger)");
  }
  const std::size_t n = clean.size() + other.size();

  // Interleave, then shuffle.
  std::vector<std::pair<bool, std::size_t>> order;
  order.reserve(n);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    order.emplace_back(true, i);
    if (i < other.size()) order.emplace_back(false, i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  TaskMixture m;
  m.inputs.resize(static_cast<Eigen::Index>(n), clean.inputs.cols());
  m.labels.resize(n);
  m.source_flags.resize(n);
  m.sample_shape = clean.sample_shape;
  m.num_classes = clean.num_classes;
  for (std::size_t k = 0; k < n; ++k) {
    const auto [from_clean, i] = order[k];
    const Dataset& src = from_clean ? clean : other;
    const SourceFlag flag = from_clean ? flags.first : flags.second;
    m.inputs.row(static_cast<Eigen::Index>(k)) = src.inputs.row(static_cast<Eigen::Index>(i));
    m.labels[k] = flag == SourceFlag::out_of_distribution ? kOodLabel : src.labels[i];
    m.source_flags[k] = flag;
  }
  m.mixing_ratio = n ? static_cast<double>(clean.size()) / static_cast<double>(n) : 0.0;
  return m;
}

Dataset subsample(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  if (n > dataset.size()) {
    throw ArgumentError("subsample of " + std::to_string(n) + " from " +
                        std::to_string(dataset.size()) + " samples");
  }
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first n entries are a uniform draw without replacement.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  Dataset out = take_rows(dataset, idx);
  std::string counts;
  for (std::size_t c : out.class_counts()) {
    if (!counts.empty()) counts += ",";
    counts += std::to_string(c);
  }
  out.metadata["class_counts"] = counts;
  out.metadata["subsample_seed"] = std::to_string(seed);
  return out;
}

Dataset slice(const Dataset& dataset, std::size_t begin, std::size_t end) {
  if (begin > end || end > dataset.size()) throw ArgumentError("slice out of range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return take_rows(dataset, idx);
}

Dataset synth_blobs(std::size_t n, int num_classes, double separation, std::uint64_t seed) {
  if (num_classes < 1 || n < static_cast<std::size_t>(num_classes)) {
    throw ArgumentError("synth_blobs needs n >= K >= 1");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);
  constexpr double kTwoPi = 6.283185307179586;
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    const double angle = kTwoPi * k / num_classes;
    const double cx = num_classes == 1 ? 0.0 : separation * std::cos(angle);
    const double cy = num_classes == 1 ? 0.0 : separation * std::sin(angle);
    d.inputs(static_cast<Eigen::Index>(i), 0) = cx + normal(rng);
    d.inputs(static_cast<Eigen::Index>(i), 1) = cy + normal(rng);
    d.labels[i] = k;
  }
  for (Eigen::Index c = 0; c < 2; ++c) {
    const double lo = d.inputs.col(c).minCoeff();
    const double hi = d.inputs.col(c).maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    d.inputs.col(c) = ((d.inputs.col(c).array() - lo) / span).max(0.0).min(1.0);
  }
  d.sample_shape = {2};
  d.num_classes = num_classes;
  d.name = "blobs";
  d.validate();
  return d;
}

DatasetManifest dataset_manifest(const Dataset& dataset) {
  DatasetManifest m;
  m.name = dataset.name;
  m.split = to_string(dataset.split);
  m.count = dataset.size();
  m.shape = dataset.sample_shape;
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(dataset.inputs.size()) + dataset.size());
  for (Eigen::Index i = 0; i < dataset.inputs.size(); ++i) {
    bytes.push_back(static_cast<unsigned char>(std::lround(dataset.inputs.data()[i] * 255.0)));
  }
  for (int y : dataset.labels) bytes.push_back(static_cast<unsigned char>(y));
  m.sha256 = sha256_hex(bytes);
  return m;
}

std::string default_ood_pair(const std::string& dataset_name) {
  if (dataset_name == "mnist") return "fashion_mnist";
  if (dataset_name == "fashion_mnist") return "mnist";
  throw ArgumentError("no default semantic-shift partner for '" + dataset_name + "'");
}

double default_epsilon(const std::string& dataset_name) {
  if (dataset_name == "mnist") return 0.3;
  if (dataset_name == "fashion_mnist") return 0.1;
  if (dataset_name == "cifar10") return 8.0 / 255.0;
  throw ArgumentError("no standard epsilon for '" + dataset_name + "'");
}

}  // namespace bnnr
