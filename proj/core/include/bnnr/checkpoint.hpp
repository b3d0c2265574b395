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

#ifndef BNNR_CHECKPOINT_HPP_
#define BNNR_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "bnnr/inference.hpp"
#include "bnnr/model.hpp"

namespace bnnr {

// Everything needed to rebuild the network a posterior belongs to, plus
// provenance. Serialized as the JSON sidecar of a checkpoint.
struct CheckpointMeta {
  std::string architecture_id;
  int num_classes = 0;
  SampleShape input_shape;
  double dropout_rate = 0.1;
  double logit_scale = 1.0;  // != 1 appends a LogitScale layer
  std::uint64_t seed = 0;
  nlohmann::json hyperparameters = nlohmann::json::object();
  TrainingCurve curve;
  std::string dataset_manifest_hash;
};

struct LoadedPosterior {
  Posterior posterior;
  Architecture arch;
  CheckpointMeta meta;
  std::string payload_sha256;
};

// Writes <stem>.bin (parameter vectors) and <stem>.json (sidecar). A stem that
// already ends in .bin or .json is stripped first.
void save_posterior(const std::filesystem::path& stem, const Posterior& posterior,
                    const CheckpointMeta& meta);

// Throws FormatError on a malformed blob or a checksum mismatch.
LoadedPosterior load_posterior(const std::filesystem::path& stem);

Architecture architecture_from_meta(const CheckpointMeta& meta);

nlohmann::json to_json(const CheckpointMeta& meta);
CheckpointMeta meta_from_json(const nlohmann::json& j);

}  // namespace bnnr

#endif  // BNNR_CHECKPOINT_HPP_
