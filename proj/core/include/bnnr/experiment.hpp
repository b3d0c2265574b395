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

#ifndef BNNR_EXPERIMENT_HPP_
#define BNNR_EXPERIMENT_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnnr/attacks.hpp"
#include "bnnr/audit.hpp"
#include "bnnr/checkpoint.hpp"
#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/tasks.hpp"

namespace bnnr {

// Everything a run needs. Serialized as JSON; the loader also accepts
// comments, so hand-written manifests can be annotated.
struct ExperimentManifest {
  std::string id = "experiment";
  std::string dataset = "mnist";
  std::string ood_dataset;  // empty: the dataset's default partner
  // 0 keeps the whole split.
  std::size_t train_subsample = 10000;
  std::size_t test_subsample = 500;
  std::string method = "psvi";
  std::string architecture;  // empty: cnn, or mlp for hmc
  // Method settings; unknown keys are rejected. See method_hyperparameters().
  nlohmann::json hyperparameters = nlohmann::json::object();
  // "desk" or "full"; full raises epochs and uses the whole training split.
  std::string profile = "desk";
  // Template for every attack. A missing epsilon takes the dataset default.
  nlohmann::json attack = nlohmann::json::object();
  std::vector<std::string> attacks = {"fgsm", "pgd", "pgd+"};
  std::vector<TaskKind> tasks = {TaskKind::robust_accuracy, TaskKind::ae_detection, TaskKind::semantic_shift};
  std::size_t eval_samples = 100;
  bool include_noisy = true;
  bool audit = true;
  std::vector<double> sweep_epsilons;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path output_dir = "runs";
  // Checkpoint to evaluate instead of training; its payload hash is pinned.
  std::optional<std::filesystem::path> checkpoint;
  std::string checkpoint_sha256;

  std::filesystem::path run_dir() const { return output_dir / id; }
};

nlohmann::json to_json(const ExperimentManifest& manifest);
// Fills defaults and validates. Throws ArgumentError.
ExperimentManifest manifest_from_json(const nlohmann::json& j);
ExperimentManifest load_manifest(const std::filesystem::path& path);
// SHA-256 of the canonical JSON form.
std::string manifest_hash(const ExperimentManifest& manifest);

// Effective method settings: defaults for the method and profile, overridden
// by `overrides`. Throws ArgumentError on an unknown key.
nlohmann::json method_hyperparameters(const std::string& method, const nlohmann::json& overrides,
                                      const std::string& profile = "desk");

Architecture method_architecture(const std::string& method, const std::string& architecture_id,
                                 const Dataset& data, const nlohmann::json& hyperparameters);

TrainResult train_method(const std::string& method, const Architecture& arch, const Dataset& data,
                         const nlohmann::json& hyperparameters, std::uint64_t seed);

// Keys: epsilon, steps, step_size, mc_samples, batch_size, label_samples,
// objective, seed. Epsilon defaults to default_epsilon(dataset).
AttackConfig attack_config_from_json(const nlohmann::json& j, const std::string& dataset);
nlohmann::json to_json(const AttackConfig& cfg);

// Attack output: <stem>.bin holds the adversarial rows, <stem>.json the
// config, posterior hash, per-sample success and gradient-norm summary.
void save_attack(const std::filesystem::path& stem, const AttackResult& result, const nlohmann::json& info);
RowMatrix load_tensor(const std::filesystem::path& path);

// A stage failed; its marker is left in place and a rerun resumes there.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentResult {
  std::filesystem::path dir;
  nlohmann::json summary;
  Severity audit = Severity::pass;
};

using ProgressFn = std::function<void(const std::string&)>;

// train -> attack/eval -> audit for every seed, then the summary. Completed
// stages whose marker matches the manifest hash are skipped.
ExperimentResult run_experiment(const ExperimentManifest& manifest, const ProgressFn& progress = {});

// Table columns for a task, in display order.
std::vector<std::string> summary_columns(TaskKind task);

// Per task, per row (dataset/method), per column: values over seeds and their
// mean, plus stderr when there are at least three.
nlohmann::json summarize_reports(const std::vector<EvalReport>& reports);
std::string summary_markdown(const nlohmann::json& summary);

// Markdown tables for every report.json under dir.
std::string report_summary(const std::filesystem::path& dir);

}  // namespace bnnr

#endif  // BNNR_EXPERIMENT_HPP_
