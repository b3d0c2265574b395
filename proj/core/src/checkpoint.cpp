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

#include "bnnr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace bnnr {

namespace {

constexpr char kMagic[8] = {'B', 'N', 'N', 'R', 'P', 'O', 'S', 'T'};
constexpr std::uint32_t kVersion = 1;

std::filesystem::path strip(const std::filesystem::path& stem) {
  const auto ext = stem.extension();
  if (ext == ".bin" || ext == ".json") {
    auto p = stem;
    p.replace_extension();
    return p;
  }
  return stem;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<double> vec() {
    const auto n = get<std::uint64_t>();
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw FormatError(file_ + ": truncated vector");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(file_ + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

std::vector<std::shared_ptr<const std::vector<double>>> vectors_of(const Posterior& p) {
  return std::visit(
      [](const auto& payload) -> std::vector<std::shared_ptr<const std::vector<double>>> {
        using T = std::decay_t<decltype(payload)>;
        if constexpr (std::is_same_v<T, MeanFieldPosterior>) {
          return {std::make_shared<const std::vector<double>>(payload.mu),
                  std::make_shared<const std::vector<double>>(payload.rho)};
        } else if constexpr (std::is_same_v<T, DropoutPosterior>) {
          return {payload.weights};
        } else if constexpr (std::is_same_v<T, HmcChain>) {
          return payload.samples;
        } else {
          return {payload.params};
        }
      },
      p.payload());
}

nlohmann::json kind_fields(const Posterior& p) {
  nlohmann::json j = nlohmann::json::object();
  std::visit(
      [&j](const auto& payload) {
        using T = std::decay_t<decltype(payload)>;
        if constexpr (std::is_same_v<T, MeanFieldPosterior>) {
          j["prior_mean"] = payload.prior.mean;
          j["prior_variance"] = payload.prior.variance;
        } else if constexpr (std::is_same_v<T, DropoutPosterior>) {
          j["dropout_rate"] = payload.dropout_rate;
          j["prior_precision"] = payload.prior_precision;
        } else if constexpr (std::is_same_v<T, HmcChain>) {
          j["burn_in"] = payload.burn_in;
          j["leapfrog_steps"] = payload.leapfrog_steps;
          j["step_size"] = payload.step_size;
          j["acceptance_rate"] = payload.acceptance_rate;
          j["non_finite_rejections"] = payload.non_finite_rejections;
        }
      },
      p.payload());
  return j;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

nlohmann::json to_json(const CheckpointMeta& meta) {
  return {{"architecture", meta.architecture_id},
          {"num_classes", meta.num_classes},
          {"input_shape", meta.input_shape},
          {"dropout_rate", meta.dropout_rate},
          {"logit_scale", meta.logit_scale},
          {"seed", meta.seed},
          {"hyperparameters", meta.hyperparameters},
          {"training_curve", {{"objective", meta.curve.objective}, {"accuracy", meta.curve.accuracy}}},
          {"dataset_manifest_hash", meta.dataset_manifest_hash}};
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  try {
    m.architecture_id = j.at("architecture").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.input_shape = j.at("input_shape").get<SampleShape>();
    m.dropout_rate = j.value("dropout_rate", 0.1);
    m.logit_scale = j.value("logit_scale", 1.0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.hyperparameters = j.value("hyperparameters", nlohmann::json::object());
    if (j.contains("training_curve")) {
      m.curve.objective = j["training_curve"].value("objective", std::vector<double>{});
      m.curve.accuracy = j["training_curve"].value("accuracy", std::vector<double>{});
    }
    m.dataset_manifest_hash = j.value("dataset_manifest_hash", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint sidecar: ") + e.what());
  }
  return m;
}

Architecture architecture_from_meta(const CheckpointMeta& meta) {
  Architecture arch = build_architecture(meta.architecture_id, meta.num_classes, meta.input_shape,
                                         meta.dropout_rate);
  if (meta.logit_scale != 1.0) arch = with_logit_scale(arch, meta.logit_scale);
  return arch;
}

void save_posterior(const std::filesystem::path& stem_in, const Posterior& posterior,
                    const CheckpointMeta& meta) {
  const auto stem = strip(stem_in);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const auto vecs = vectors_of(posterior);
  std::string blob(kMagic, sizeof(kMagic));
  put<std::uint32_t>(blob, kVersion);
  put<std::uint32_t>(blob, static_cast<std::uint32_t>(posterior.kind()));
  put<std::uint64_t>(blob, vecs.size());
  for (const auto& v : vecs) {
    put<std::uint64_t>(blob, v->size());
    blob.append(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(double));
  }
  {
    std::ofstream out(with_suffix(stem, ".bin"), std::ios::binary);
    if (!out) throw Error("cannot write " + with_suffix(stem, ".bin").string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  nlohmann::json side = to_json(meta);
  side["kind"] = to_string(posterior.kind());
  side["posterior"] = kind_fields(posterior);
  side["parameter_count"] = posterior.parameter_count();
  side["payload_sha256"] = sha256_hex(blob);
  std::ofstream out(with_suffix(stem, ".json"));
  if (!out) throw Error("cannot write " + with_suffix(stem, ".json").string());
  out << side.dump(2) << '\n';
}

LoadedPosterior load_posterior(const std::filesystem::path& stem_in) {
  const auto stem = strip(stem_in);
  const auto bin_path = with_suffix(stem, ".bin");
  const auto json_path = with_suffix(stem, ".json");
  const std::string blob = read_file(bin_path);
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(json_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  const std::string digest = sha256_hex(blob);
  if (side.value("payload_sha256", std::string{}) != digest) {
    throw FormatError(bin_path.string() + ": checksum does not match sidecar");
  }
  Reader r(blob, bin_path.string());
  char magic[8];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError(bin_path.string() + ": bad magic");
  if (r.get<std::uint32_t>() != kVersion) throw FormatError(bin_path.string() + ": unsupported version");
  const auto kind_index = r.get<std::uint32_t>();
  if (kind_index > 3) throw FormatError(bin_path.string() + ": unknown posterior kind");
  const auto kind = static_cast<PosteriorKind>(kind_index);
  const auto count = r.get<std::uint64_t>();
  std::vector<std::vector<double>> vecs;
  for (std::uint64_t i = 0; i < count; ++i) vecs.push_back(r.vec());
  if (!r.done()) throw FormatError(bin_path.string() + ": trailing bytes");

  CheckpointMeta meta = meta_from_json(side);
  const nlohmann::json fields = side.value("posterior", nlohmann::json::object());
  auto require = [&](std::size_t n) {
    if (vecs.size() != n) throw FormatError(bin_path.string() + ": wrong number of vectors");
  };
  std::optional<Posterior> posterior;
  switch (kind) {
    case PosteriorKind::mean_field: {
      require(2);
      MeanFieldPosterior q;
      q.mu = std::move(vecs[0]);
      q.rho = std::move(vecs[1]);
      q.prior = {fields.value("prior_mean", 0.0), fields.value("prior_variance", 1.0)};
      posterior.emplace(std::move(q));
      break;
    }
    case PosteriorKind::dropout: {
      require(1);
      posterior.emplace(DropoutPosterior{std::make_shared<const std::vector<double>>(std::move(vecs[0])),
                                         fields.value("dropout_rate", 0.1),
                                         fields.value("prior_precision", 1e-4)});
      break;
    }
    case PosteriorKind::hmc_chain: {
      if (vecs.empty()) throw FormatError(bin_path.string() + ": empty chain");
      HmcChain chain;
      for (auto& v : vecs) chain.samples.push_back(std::make_shared<const std::vector<double>>(std::move(v)));
      chain.burn_in = fields.value("burn_in", std::size_t{0});
      chain.leapfrog_steps = fields.value("leapfrog_steps", std::size_t{0});
      chain.step_size = fields.value("step_size", 0.0);
      chain.acceptance_rate = fields.value("acceptance_rate", 0.0);
      chain.non_finite_rejections = fields.value("non_finite_rejections", std::size_t{0});
      posterior.emplace(std::move(chain));
      break;
    }
    case PosteriorKind::point_mass: {
      require(1);
      posterior.emplace(Posterior::point_mass(std::move(vecs[0])));
      break;
    }
  }
  Architecture arch = architecture_from_meta(meta);
  if (posterior->parameter_count() != arch.parameter_count()) {
    throw ConsistencyError(bin_path.string() + ": parameter count does not match architecture " +
                           meta.architecture_id);
  }
  return {std::move(*posterior), std::move(arch), std::move(meta), digest};
}

}  // namespace bnnr
