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

#ifndef BNNR_TASKS_HPP_
#define BNNR_TASKS_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnnr/attacks.hpp"
#include "bnnr/data.hpp"
#include "bnnr/inference.hpp"
#include "bnnr/selective.hpp"

namespace bnnr {

enum class TaskKind { robust_accuracy, ae_detection, semantic_shift };

std::string to_string(TaskKind task);
TaskKind task_kind_from_string(const std::string& text);

// One column of a task table: the clean set, a noisy control, or an attack.
struct VariantResult {
  std::string name;
  double accuracy = 0.0;  // accuracy[0] of the curve for selective tasks
  std::optional<SelectiveCurve> curve;
  std::optional<double> asa;
  std::optional<double> anll;
  // Total uncertainty and flag per evaluated sample, in mixture order.
  std::vector<double> scores;
  std::vector<SourceFlag> flags;
  std::map<std::string, double> median_score_by_flag;
};

struct EvalReport {
  TaskKind task = TaskKind::robust_accuracy;
  std::vector<VariantResult> variants;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  nlohmann::json metadata = nlohmann::json::object();

  const VariantResult& variant(const std::string& name) const;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// report.json plus one curve CSV per selective variant.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

struct TaskOptions {
  // Template for every attack; epsilon is the dataset's standard radius.
  AttackConfig attack;
  // Attack variants to run: any of "fgsm", "pgd", "pgd+", "transfer-pgd+".
  std::vector<std::string> attacks = {"fgsm", "pgd", "pgd+"};
  bool include_noisy = true;
  // Posterior draws for the mean prediction of every variant.
  std::size_t eval_samples = 100;
  std::uint64_t seed = 0;
};

// Clean accuracy plus robust accuracy under each attack in options.attacks.
EvalReport task_robust_accuracy(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                                const TaskOptions& options);

// The test set is split into a clean half and an attacked half; each variant
// mixes the two 50/50 and rejects by total uncertainty. The "clean" variant
// uses the unperturbed second half, so it is the epsilon = 0 attack.
EvalReport task_ae_detection(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                             const TaskOptions& options);

// 50/50 mixture of id_test and ood_test (equal sizes); only OOD samples are
// perturbed, by noise or by uncertainty-lowering attacks ("fgsm", "pgd").
// OOD samples are excluded from ANLL.
EvalReport task_semantic_shift(const Posterior& posterior, const Architecture& arch, const Dataset& id_test,
                               const Dataset& ood_test, const TaskOptions& options);

}  // namespace bnnr

#endif  // BNNR_TASKS_HPP_
