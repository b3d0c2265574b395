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

#include "bnnr/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace bnnr {

std::string to_string(TaskKind task) {
  switch (task) {
    case TaskKind::robust_accuracy: return "robust_accuracy";
    case TaskKind::ae_detection: return "ae_detection";
    case TaskKind::semantic_shift: return "semantic_shift";
  }
  return "unknown";
}

TaskKind task_kind_from_string(const std::string& text) {
  if (text == "robust_accuracy") return TaskKind::robust_accuracy;
  if (text == "ae_detection") return TaskKind::ae_detection;
  if (text == "semantic_shift") return TaskKind::semantic_shift;
  throw ArgumentError("unknown task: " + text);
}

const VariantResult& EvalReport::variant(const std::string& name) const {
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  throw ArgumentError("report has no variant '" + name + "'");
}

namespace {

constexpr std::uint64_t kMixStream = 10;
constexpr std::uint64_t kEvalStream = 20;
constexpr std::uint64_t kNoiseStream = 30;

std::uint64_t attack_stream(const std::string& name) {
  if (name == "fgsm") return 1;
  if (name == "pgd") return 2;
  if (name == "pgd+") return 3;
  if (name == "transfer-pgd+") return 4;
  throw ArgumentError("unknown attack variant '" + name + "'");
}

nlohmann::json nan_to_null(const std::vector<double>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (double x : v) out.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return out;
}

std::vector<double> null_to_nan(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Dataset replace_inputs(const Dataset& d, RowMatrix inputs) {
  Dataset out = d;
  out.inputs = std::move(inputs);
  return out;
}

VariantResult evaluate(const std::string& name, const Posterior& posterior, const Architecture& arch,
                       const RowMatrix& inputs, std::span<const int> labels, std::span<const SourceFlag> flags,
                       const TaskOptions& options, bool selective) {
  const MeanPrediction pred = posterior_mean_predict(posterior, arch, inputs, options.eval_samples,
                                                     derive_seed(options.seed, kEvalStream));
  const auto records = make_records(pred, labels, flags);
  VariantResult v;
  v.name = name;
  std::map<std::string, std::vector<double>> by_flag;
  for (const auto& r : records) {
    v.scores.push_back(r.score);
    v.flags.push_back(r.source_flag);
    by_flag[to_string(r.source_flag)].push_back(r.score);
  }
  for (auto& [flag, scores] : by_flag) v.median_score_by_flag[flag] = median(std::move(scores));
  v.accuracy = robust_accuracy(pred.labels, labels);
  if (selective) {
    v.curve = selective_curve(records);
    v.asa = asa(*v.curve);
    v.anll = anll(*v.curve);
  }
  return v;
}

AttackResult run_named_attack(const std::string& name, const Posterior& posterior, const Architecture& arch,
                              const Dataset& target, const TaskOptions& options) {
  AttackConfig cfg = options.attack;
  cfg.seed = derive_seed(options.attack.seed, attack_stream(name));
  cfg.label_samples = 0;
  if (name == "fgsm") return fgsm(posterior, arch, target.inputs, target.labels, cfg);
  if (name == "pgd") return pgd(posterior, arch, target.inputs, target.labels, cfg);
  cfg.label_samples = options.eval_samples;
  if (name == "pgd+") return pgd_plus(posterior, arch, target.inputs, cfg);
  return transfer_pgd_plus(posterior, arch, target.inputs, cfg);
}

nlohmann::json config_echo(const TaskOptions& o) {
  return {{"epsilon", o.attack.epsilon},
          {"steps", o.attack.steps},
          {"step_size", o.attack.effective_step_size()},
          {"mc_samples", o.attack.mc_samples},
          {"attack_seed", o.attack.seed},
          {"attacks", o.attacks},
          {"include_noisy", o.include_noisy},
          {"eval_samples", o.eval_samples},
          {"loss", to_string(o.attack.loss)},
          {"estimator", to_string(o.attack.estimator)}};
}

nlohmann::json gradient_summary(const AttackResult& r) {
  const double* d = r.grad_inf_norms.data();
  const auto n = r.grad_inf_norms.size();
  std::size_t tiny = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d[i] < 1e-12) ++tiny;
  }
  return {{"min", n ? r.grad_inf_norms.minCoeff() : 0.0},
          {"max", n ? r.grad_inf_norms.maxCoeff() : 0.0},
          {"fraction_below_1e-12", n ? static_cast<double>(tiny) / static_cast<double>(n) : 0.0}};
}

}  // namespace

EvalReport task_robust_accuracy(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                                const TaskOptions& options) {
  test.validate();
  EvalReport report;
  report.task = TaskKind::robust_accuracy;
  report.config = config_echo(options);
  report.seeds = {options.seed, options.attack.seed};
  const std::vector<SourceFlag> clean_flags(test.size(), SourceFlag::clean);
  report.variants.push_back(
      evaluate("clean", posterior, arch, test.inputs, test.labels, clean_flags, options, false));
  const std::vector<SourceFlag> adv_flags(test.size(), SourceFlag::adversarial);
  for (const auto& name : options.attacks) {
    const AttackResult r = run_named_attack(name, posterior, arch, test, options);
    report.variants.push_back(evaluate(name, posterior, arch, r.adversarial, test.labels, adv_flags, options, false));
    report.metadata["gradients"][name] = gradient_summary(r);
  }
  return report;
}

EvalReport task_ae_detection(const Posterior& posterior, const Architecture& arch, const Dataset& test,
                             const TaskOptions& options) {
  test.validate();
  if (test.size() < 2) throw ArgumentError("AE detection needs at least two test samples");
  EvalReport report;
  report.task = TaskKind::ae_detection;
  report.config = config_echo(options);
  report.seeds = {options.seed, options.attack.seed};
  // Odd sizes keep the extra sample on the clean side.
  const std::size_t half = (test.size() + 1) / 2;
  const Dataset clean_half = slice(test, 0, half);
  const Dataset other_half = slice(test, half, test.size());
  const std::uint64_t mix_seed = derive_seed(options.seed, kMixStream);
  auto add = [&](const std::string& name, const Dataset& second, SourceFlag flag) {
    const TaskMixture m = make_mixture(clean_half, second, {SourceFlag::clean, flag}, mix_seed);
    report.variants.push_back(evaluate(name, posterior, arch, m.inputs, m.labels, m.source_flags, options, true));
  };
  add("clean", other_half, SourceFlag::clean);
  if (options.include_noisy) {
    add("noisy", make_noisy(other_half, {options.attack.epsilon, derive_seed(options.seed, kNoiseStream)}),
        SourceFlag::noisy);
  }
  for (const auto& name : options.attacks) {
    const AttackResult r = run_named_attack(name, posterior, arch, other_half, options);
    add(name, replace_inputs(other_half, r.adversarial), SourceFlag::adversarial);
    report.metadata["gradients"][name] = gradient_summary(r);
  }
  report.metadata["clean_side"] = half;
  report.metadata["perturbed_side"] = test.size() - half;
  return report;
}

EvalReport task_semantic_shift(const Posterior& posterior, const Architecture& arch, const Dataset& id_test,
                               const Dataset& ood_test, const TaskOptions& options) {
  id_test.validate();
  ood_test.validate();
  EvalReport report;
  report.task = TaskKind::semantic_shift;
  report.config = config_echo(options);
  report.seeds = {options.seed, options.attack.seed};
  const std::uint64_t mix_seed = derive_seed(options.seed, kMixStream);
  auto add = [&](const std::string& name, const Dataset& ood) {
    const TaskMixture m =
        make_mixture(id_test, ood, {SourceFlag::in_distribution, SourceFlag::out_of_distribution}, mix_seed);
    report.variants.push_back(evaluate(name, posterior, arch, m.inputs, m.labels, m.source_flags, options, true));
  };
  add("clean", ood_test);
  if (options.include_noisy) {
    add("noisy", make_noisy(ood_test, {options.attack.epsilon, derive_seed(options.seed, kNoiseStream)}));
  }
  for (const auto& name : options.attacks) {
    if (name != "fgsm" && name != "pgd") continue;
    AttackConfig cfg = options.attack;
    cfg.seed = derive_seed(options.attack.seed, attack_stream(name));
    cfg.label_samples = 0;
    const AttackResult r = ood_uncertainty_attack(posterior, arch, ood_test.inputs, cfg,
                                                  name == "fgsm" ? OodAttackKind::fgsm : OodAttackKind::pgd);
    add(name, replace_inputs(ood_test, r.adversarial));
    report.metadata["gradients"][name] = gradient_summary(r);
  }
  report.metadata["anll_excludes_ood"] = true;
  return report;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : report.variants) {
    nlohmann::json j = {{"name", v.name}, {"accuracy", v.accuracy}, {"median_score_by_flag", v.median_score_by_flag}};
    if (v.curve) {
      j["curve"] = {{"accuracy", v.curve->accuracy},
                    {"retained", v.curve->retained},
                    {"mean_nll", nan_to_null(v.curve->mean_nll)},
                    {"had_empty_grid_point", v.curve->had_empty_grid_point},
                    {"nll_excluded", v.curve->nll_excluded}};
    }
    if (v.asa) j["asa"] = *v.asa;
    if (v.anll) j["anll"] = std::isnan(*v.anll) ? nlohmann::json(nullptr) : nlohmann::json(*v.anll);
    j["scores"] = v.scores;
    nlohmann::json flags = nlohmann::json::array();
    for (auto f : v.flags) flags.push_back(to_string(f));
    j["flags"] = flags;
    variants.push_back(std::move(j));
  }
  return {{"task", to_string(report.task)},
          {"variants", variants},
          {"config", report.config},
          {"seeds", report.seeds},
          {"metadata", report.metadata}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.task = task_kind_from_string(j.at("task").get<std::string>());
    r.config = j.value("config", nlohmann::json::object());
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    r.metadata = j.value("metadata", nlohmann::json::object());
    for (const auto& jv : j.at("variants")) {
      VariantResult v;
      v.name = jv.at("name").get<std::string>();
      v.accuracy = jv.at("accuracy").get<double>();
      v.median_score_by_flag = jv.value("median_score_by_flag", std::map<std::string, double>{});
      if (jv.contains("curve")) {
        SelectiveCurve c;
        c.accuracy = jv["curve"].at("accuracy").get<std::vector<double>>();
        c.retained = jv["curve"].at("retained").get<std::vector<std::size_t>>();
        c.mean_nll = null_to_nan(jv["curve"].at("mean_nll"));
        c.had_empty_grid_point = jv["curve"].value("had_empty_grid_point", false);
        c.nll_excluded = jv["curve"].value("nll_excluded", std::size_t{0});
        v.curve = std::move(c);
      }
      if (jv.contains("asa")) v.asa = jv["asa"].get<double>();
      if (jv.contains("anll")) {
        v.anll = jv["anll"].is_null() ? std::numeric_limits<double>::quiet_NaN() : jv["anll"].get<double>();
      }
      v.scores = jv.value("scores", std::vector<double>{});
      for (const auto& f : jv.value("flags", std::vector<std::string>{})) {
        static const std::map<std::string, SourceFlag> kFlags = {
            {"clean", SourceFlag::clean},
            {"adversarial", SourceFlag::adversarial},
            {"in_distribution", SourceFlag::in_distribution},
            {"out_of_distribution", SourceFlag::out_of_distribution},
            {"noisy", SourceFlag::noisy}};
        const auto it = kFlags.find(f);
        if (it == kFlags.end()) throw FormatError("unknown source flag '" + f + "'");
        v.flags.push_back(it->second);
      }
      r.variants.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  return r;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw Error("cannot write " + (dir / "report.json").string());
    out << to_json(report).dump(2) << '\n';
  }
  for (const auto& v : report.variants) {
    if (v.curve) write_curve_csv(dir / ("curve_" + v.name + ".csv"), *v.curve);
  }
}

}  // namespace bnnr
