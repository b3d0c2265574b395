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

#include "bnnr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "bnnr/hmc.hpp"
#include "bnnr/plot.hpp"

namespace bnnr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kTrainDataStream = 40;
constexpr std::uint64_t kTestDataStream = 41;
constexpr std::uint64_t kOodDataStream = 42;
constexpr std::uint64_t kTrainStream = 43;
constexpr std::uint64_t kAttackSeedStream = 44;
constexpr std::uint64_t kAuditStream = 45;

constexpr char kTensorMagic[8] = {'B', 'N', 'N', 'R', 'T', 'E', 'N', 'S'};

const std::set<std::string> kMethods = {"psvi", "mcd", "hmc", "map"};
const std::set<std::string> kAttackNames = {"fgsm", "pgd", "pgd+", "transfer-pgd+"};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot read " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void apply_overrides(json& base, const json& overrides, const std::string& method) {
  if (!overrides.is_object()) throw ArgumentError("hyperparameters must be an object");
  for (const auto& [key, value] : overrides.items()) {
    if (!base.contains(key)) throw ArgumentError("unknown " + method + " hyperparameter '" + key + "'");
    if (!value.is_number() && !value.is_boolean()) {
      throw ArgumentError("hyperparameter '" + key + "' must be a number or boolean");
    }
    base[key] = value;
  }
}

SgdConfig sgd_from(const json& h, std::uint64_t seed, const std::string& prefix = "") {
  SgdConfig s;
  s.learning_rate = h.at(prefix + "learning_rate").get<double>();
  s.momentum = h.at(prefix + "momentum").get<double>();
  s.batch_size = h.at(prefix + "batch_size").get<std::size_t>();
  s.epochs = h.at(prefix + "epochs").get<std::size_t>();
  s.seed = seed;
  return s;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Resumable stage bookkeeping under <dir>/.stages.
class StageBook {
 public:
  StageBook(fs::path dir, std::string hash) : dir_(std::move(dir)), hash_(std::move(hash)) {}

  bool done(const std::string& stage) const {
    const fs::path p = dir_ / (stage + ".done");
    if (!fs::exists(p)) return false;
    std::ifstream in(p);
    std::string h;
    in >> h;
    return h == hash_;
  }

  template <typename Fn>
  void run(const std::string& stage, const ProgressFn& progress, Fn&& fn) {
    if (done(stage)) {
      if (progress) progress("skip " + stage + " (done)");
      return;
    }
    if (progress) progress("stage " + stage);
    fs::create_directories(dir_);
    try {
      fn();
    } catch (const std::exception& e) {
      write_json(dir_ / (stage + ".failed"), {{"stage", stage}, {"error", e.what()}, {"manifest_hash", hash_}});
      throw StageError(stage, stage + ": " + e.what());
    }
    fs::remove(dir_ / (stage + ".failed"));
    std::ofstream(dir_ / (stage + ".done")) << hash_ << '\n';
  }

 private:
  fs::path dir_;
  std::string hash_;
};

std::string column_for_variant(const std::string& name) {
  if (name == "clean") return "Clean";
  if (name == "noisy") return "Noisy";
  if (name == "fgsm") return "FGSM";
  if (name == "pgd") return "PGD";
  if (name == "pgd+") return "PGD+";
  if (name == "transfer-pgd+") return "TransferPGD+";
  return name;
}

std::string row_label(const EvalReport& r) {
  const json& e = r.metadata.contains("experiment") ? r.metadata["experiment"] : json::object();
  const std::string dataset = e.value("dataset", std::string("?"));
  const std::string method = e.value("method", std::string("?"));
  return dataset + "/" + method;
}

std::string format_cell(const json& cell, bool percent) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(percent ? 2 : 3);
  const double scale = percent ? 100.0 : 1.0;
  if (cell.at("mean").is_null()) return "n/a";
  ss << scale * cell.at("mean").get<double>();
  if (cell.contains("stderr")) ss << " ± " << scale * cell.at("stderr").get<double>();
  return ss.str();
}

}  // namespace

json to_json(const ExperimentManifest& m) {
  json tasks = json::array();
  for (auto t : m.tasks) tasks.push_back(to_string(t));
  json j = {{"id", m.id},
            {"dataset", m.dataset},
            {"ood_dataset", m.ood_dataset},
            {"train_subsample", m.train_subsample},
            {"test_subsample", m.test_subsample},
            {"method", m.method},
            {"architecture", m.architecture},
            {"hyperparameters", m.hyperparameters},
            {"profile", m.profile},
            {"attack", m.attack},
            {"attacks", m.attacks},
            {"tasks", tasks},
            {"eval_samples", m.eval_samples},
            {"include_noisy", m.include_noisy},
            {"audit", m.audit},
            {"sweep_epsilons", m.sweep_epsilons},
            {"seeds", m.seeds},
            {"output_dir", m.output_dir.string()}};
  if (m.checkpoint) {
    j["checkpoint"] = m.checkpoint->string();
    j["checkpoint_sha256"] = m.checkpoint_sha256;
  }
  return j;
}

ExperimentManifest manifest_from_json(const json& j) {
  if (!j.is_object()) throw ArgumentError("manifest must be a JSON object");
  static const std::set<std::string> known = {
      "id",     "dataset", "ood_dataset", "train_subsample", "test_subsample", "method",     "architecture",
      "hyperparameters", "profile", "attack", "attacks", "tasks", "eval_samples", "include_noisy", "audit",
      "sweep_epsilons", "seeds", "output_dir", "checkpoint", "checkpoint_sha256", "manifest_hash"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ArgumentError("unknown manifest key '" + key + "'");
  }
  ExperimentManifest m;
  try {
    m.id = j.value("id", m.id);
    m.dataset = j.value("dataset", m.dataset);
    m.profile = j.value("profile", m.profile);
    if (m.profile != "desk" && m.profile != "full") throw ArgumentError("profile must be 'desk' or 'full'");
    m.ood_dataset = j.value("ood_dataset", std::string());
    if (m.ood_dataset.empty()) m.ood_dataset = default_ood_pair(m.dataset);
    m.method = j.value("method", m.method);
    if (!kMethods.count(m.method)) throw ArgumentError("unknown method '" + m.method + "'");
    const std::size_t default_train = m.profile == "full" && m.method != "hmc" ? 0 : m.train_subsample;
    m.train_subsample = j.value("train_subsample", default_train);
    m.test_subsample = j.value("test_subsample", m.test_subsample);
    m.architecture = j.value("architecture", std::string());
    m.hyperparameters = j.value("hyperparameters", json::object());
    method_hyperparameters(m.method, m.hyperparameters, m.profile);
    m.attack = j.value("attack", json::object());
    attack_config_from_json(m.attack, m.dataset).validate();
    m.attacks = j.value("attacks", m.attacks);
    for (const auto& a : m.attacks) {
      if (!kAttackNames.count(a)) throw ArgumentError("unknown attack '" + a + "'");
    }
    if (j.contains("tasks")) {
      m.tasks.clear();
      for (const auto& t : j.at("tasks")) m.tasks.push_back(task_kind_from_string(t.get<std::string>()));
    }
    m.eval_samples = j.value("eval_samples", m.eval_samples);
    m.include_noisy = j.value("include_noisy", m.include_noisy);
    m.audit = j.value("audit", m.audit);
    m.sweep_epsilons = j.value("sweep_epsilons", m.sweep_epsilons);
    m.seeds = j.value("seeds", m.seeds);
    m.output_dir = j.value("output_dir", m.output_dir.string());
    if (j.contains("checkpoint")) m.checkpoint = j.at("checkpoint").get<std::string>();
    m.checkpoint_sha256 = j.value("checkpoint_sha256", std::string());
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("manifest: ") + e.what());
  }
  if (m.id.empty() || m.id.find('/') != std::string::npos) throw ArgumentError("manifest id must be a plain name");
  if (m.tasks.empty()) throw ArgumentError("manifest lists no tasks");
  if (m.seeds.empty()) throw ArgumentError("manifest lists no seeds");
  if (m.test_subsample < 2) throw ArgumentError("test_subsample must be at least 2");
  if (m.eval_samples == 0) throw ArgumentError("eval_samples must be positive");
  return m;
}

ExperimentManifest load_manifest(const fs::path& path) { return manifest_from_json(read_json(path)); }

std::string manifest_hash(const ExperimentManifest& m) {
  json j = to_json(m);
  // A run directory stays valid when moved.
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

json method_hyperparameters(const std::string& method, const json& overrides, const std::string& profile) {
  const std::size_t epochs = profile == "full" ? 200 : 20;
  json h = {{"epochs", epochs}, {"learning_rate", 0.05}, {"momentum", 0.9}, {"batch_size", 128}};
  if (method == "psvi") {
    h.update({{"prior_mean", 0.0},
              {"prior_variance", 1.0},
              {"mc_samples", 1},
              {"init_sigma_scale", 1e-3},
              {"alpha", 0.05},
              {"reg_scale", 1.0}});
  } else if (method == "mcd") {
    h.update({{"dropout_rate", 0.1}, {"prior_precision", 1e-4}, {"alpha", 0.05}, {"reg_scale", 1.0}});
  } else if (method == "map") {
    h.update({{"prior_precision", 1.0}});
  } else if (method == "hmc") {
    h = {{"step_size", 0.001},
         {"leapfrog_steps", 20},
         {"num_samples", 100},
         {"burn_in", 100},
         {"prior_mean", 0.0},
         {"prior_variance", 1.0},
         {"init_from_map", true},
         {"map_epochs", 5},
         {"map_learning_rate", 0.05},
         {"map_momentum", 0.9},
         {"map_batch_size", 128}};
  } else {
    throw ArgumentError("unknown method '" + method + "'");
  }
  apply_overrides(h, overrides, method);
  return h;
}

Architecture method_architecture(const std::string& method, const std::string& architecture_id,
                                 const Dataset& data, const json& h) {
  std::string id = architecture_id.empty() ? (method == "hmc" ? "mlp" : "cnn") : architecture_id;
  double rate = 0.1;
  if (method == "mcd") {
    rate = h.at("dropout_rate").get<double>();
    if (id.find("_dropout") == std::string::npos) id += "_dropout";
  }
  return build_architecture(id, data.num_classes, data.sample_shape, rate);
}

TrainResult train_method(const std::string& method, const Architecture& arch, const Dataset& data, const json& h,
                         std::uint64_t seed) {
  if (method == "psvi") {
    PsviConfig c;
    c.sgd = sgd_from(h, seed);
    c.prior = {h.at("prior_mean").get<double>(), h.at("prior_variance").get<double>()};
    c.mc_samples = h.at("mc_samples").get<std::size_t>();
    c.init_sigma_scale = h.at("init_sigma_scale").get<double>();
    c.alpha = h.at("alpha").get<double>();
    c.reg_scale = h.at("reg_scale").get<double>();
    return train_psvi(data, arch, c);
  }
  if (method == "mcd") {
    McdConfig c;
    c.sgd = sgd_from(h, seed);
    c.dropout_rate = h.at("dropout_rate").get<double>();
    c.prior_precision = h.at("prior_precision").get<double>();
    c.alpha = h.at("alpha").get<double>();
    c.reg_scale = h.at("reg_scale").get<double>();
    return train_mcd(data, arch, c);
  }
  if (method == "map") {
    MapConfig c;
    c.sgd = sgd_from(h, seed);
    c.prior_precision = h.at("prior_precision").get<double>();
    return train_map(data, arch, c);
  }
  if (method == "hmc") {
    HmcTrainConfig c;
    c.hmc.step_size = h.at("step_size").get<double>();
    c.hmc.leapfrog_steps = h.at("leapfrog_steps").get<std::size_t>();
    c.hmc.num_samples = h.at("num_samples").get<std::size_t>();
    c.hmc.burn_in = h.at("burn_in").get<std::size_t>();
    c.hmc.seed = seed;
    c.prior = {h.at("prior_mean").get<double>(), h.at("prior_variance").get<double>()};
    c.init_from_map = h.at("init_from_map").get<bool>();
    c.map.sgd = sgd_from(h, derive_seed(seed, 1), "map_");
    c.map.prior_precision = 1.0 / c.prior.variance;
    return train_hmc(data, arch, c);
  }
  throw ArgumentError("unknown method '" + method + "'");
}

AttackConfig attack_config_from_json(const json& j, const std::string& dataset) {
  if (!j.is_object()) throw ArgumentError("attack config must be an object");
  static const std::set<std::string> known = {"epsilon",    "steps",         "step_size", "mc_samples",
                                              "batch_size", "label_samples", "objective", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ArgumentError("unknown attack key '" + key + "'");
  }
  AttackConfig c;
  try {
    c.epsilon = j.contains("epsilon") ? j.at("epsilon").get<double>() : default_epsilon(dataset);
    c.steps = j.value("steps", c.steps);
    if (j.contains("step_size") && !j.at("step_size").is_null()) c.step_size = j.at("step_size").get<double>();
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.label_samples = j.value("label_samples", c.label_samples);
    if (j.contains("objective")) c.objective = attack_objective_from_string(j.at("objective").get<std::string>());
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("attack config: ") + e.what());
  }
  return c;
}

json to_json(const AttackConfig& c) {
  return {{"epsilon", c.epsilon},
          {"steps", c.steps},
          {"step_size", c.effective_step_size()},
          {"mc_samples", c.mc_samples},
          {"batch_size", c.batch_size},
          {"label_samples", c.label_samples},
          {"objective", to_string(c.objective)},
          {"seed", c.seed},
          {"loss", to_string(c.loss)},
          {"estimator", to_string(c.estimator)}};
}

void save_attack(const fs::path& stem_in, const AttackResult& result, const json& info) {
  fs::path stem = stem_in;
  if (stem.extension() == ".bin" || stem.extension() == ".json") stem.replace_extension();
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  const RowMatrix& a = result.adversarial;
  std::vector<unsigned char> blob(sizeof(kTensorMagic));
  std::memcpy(blob.data(), kTensorMagic, sizeof(kTensorMagic));
  auto put = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    blob.insert(blob.end(), b, b + n);
  };
  const std::uint64_t rows = static_cast<std::uint64_t>(a.rows());
  const std::uint64_t cols = static_cast<std::uint64_t>(a.cols());
  put(&rows, sizeof(rows));
  put(&cols, sizeof(cols));
  put(a.data(), sizeof(double) * static_cast<std::size_t>(a.size()));
  {
    std::ofstream out(fs::path(stem.string() + ".bin"), std::ios::binary);
    if (!out) throw Error("cannot write " + stem.string() + ".bin");
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }
  const auto& g = result.grad_inf_norms;
  std::size_t tiny = 0;
  for (Eigen::Index i = 0; i < g.size(); ++i) tiny += g.data()[i] < 1e-12;
  json sidecar = info;
  sidecar["method"] = result.method;
  sidecar["rows"] = rows;
  sidecar["cols"] = cols;
  sidecar["payload_sha256"] = sha256_hex(blob);
  sidecar["success"] = result.success_mask;
  sidecar["success_rate"] =
      result.success_mask.empty()
          ? json(nullptr)
          : json(static_cast<double>(std::count(result.success_mask.begin(), result.success_mask.end(), true)) /
                 static_cast<double>(result.success_mask.size()));
  sidecar["gradient_norms"] = {{"min", g.size() ? g.minCoeff() : 0.0},
                               {"max", g.size() ? g.maxCoeff() : 0.0},
                               {"mean", g.size() ? g.mean() : 0.0},
                               {"fraction_below_1e-12", g.size() ? static_cast<double>(tiny) / g.size() : 0.0}};
  write_json(stem.string() + ".json", sidecar);
}

RowMatrix load_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot read " + path.string());
  char magic[8];
  std::uint64_t rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
  if (!in || std::memcmp(magic, kTensorMagic, 8) != 0) throw FormatError(path.string() + ": not a tensor blob");
  if (rows > (1ull << 32) || cols > (1ull << 32)) throw FormatError(path.string() + ": implausible shape");
  RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw FormatError(path.string() + ": truncated payload");
  return m;
}

std::vector<std::string> summary_columns(TaskKind task) {
  switch (task) {
    case TaskKind::robust_accuracy: return {"Clean", "FGSM", "PGD"};
    case TaskKind::ae_detection: return {"Clean", "Noisy", "FGSM", "PGD", "PGD+", "TransferPGD+"};
    case TaskKind::semantic_shift: return {"Clean", "Noisy", "FGSM", "PGD"};
  }
  return {};
}

json summarize_reports(const std::vector<EvalReport>& reports_in) {
  std::vector<const EvalReport*> reports;
  for (const auto& r : reports_in) reports.push_back(&r);
  auto seed_of = [](const EvalReport* r) {
    return r->metadata.contains("experiment") ? r->metadata["experiment"].value("seed", std::uint64_t{0})
                                              : (r->seeds.empty() ? 0 : r->seeds.front());
  };
  std::stable_sort(reports.begin(), reports.end(),
                   [&](const EvalReport* a, const EvalReport* b) { return seed_of(a) < seed_of(b); });

  json tables = json::array();
  for (TaskKind task : {TaskKind::robust_accuracy, TaskKind::ae_detection, TaskKind::semantic_shift}) {
    const std::vector<std::string> metrics =
        task == TaskKind::robust_accuracy ? std::vector<std::string>{"accuracy"}
                                          : std::vector<std::string>{"asa", "anll"};
    for (const auto& metric : metrics) {
      const auto all_columns = summary_columns(task);
      // row -> column -> values over seeds
      std::map<std::string, std::map<std::string, std::vector<double>>> cells;
      std::set<std::string> present;
      for (const EvalReport* r : reports) {
        if (r->task != task) continue;
        auto& row = cells[row_label(*r)];
        for (const auto& v : r->variants) {
          const std::string col = column_for_variant(v.name);
          if (std::find(all_columns.begin(), all_columns.end(), col) == all_columns.end()) continue;
          std::optional<double> value;
          if (metric == "accuracy") value = v.accuracy;
          if (metric == "asa") value = v.asa;
          if (metric == "anll") value = v.anll;
          if (!value) continue;
          row[col].push_back(*value);
          present.insert(col);
        }
      }
      if (cells.empty()) continue;
      json columns = json::array();
      for (const auto& c : all_columns) {
        if (task == TaskKind::robust_accuracy || present.count(c)) columns.push_back(c);
      }
      json rows = json::array();
      for (const auto& [label, by_col] : cells) {
        json jr = {{"row", label}, {"cells", json::object()}};
        for (const auto& [col, values] : by_col) {
          std::vector<double> finite;
          for (double x : values) {
            if (std::isfinite(x)) finite.push_back(x);
          }
          json cell = {{"values", values}, {"n", finite.size()}};
          cell["mean"] = finite.empty() ? json(nullptr) : json(mean_of(finite));
          if (finite.size() >= 3) {
            const double m = mean_of(finite);
            double ss = 0.0;
            for (double x : finite) ss += (x - m) * (x - m);
            const double n = static_cast<double>(finite.size());
            cell["stderr"] = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
          }
          jr["cells"][col] = cell;
        }
        rows.push_back(std::move(jr));
      }
      tables.push_back({{"task", to_string(task)}, {"metric", metric}, {"columns", columns}, {"rows", rows}});
    }
  }
  return {{"tables", tables}};
}

std::string summary_markdown(const json& summary) {
  std::ostringstream out;
  for (const auto& t : summary.at("tables")) {
    const std::string metric = t.at("metric").get<std::string>();
    const bool percent = metric != "anll";
    out << "### " << t.at("task").get<std::string>() << " (" << metric << (percent ? ", %" : "") << ")\n\n";
    out << "| Model |";
    for (const auto& c : t.at("columns")) out << ' ' << c.get<std::string>() << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < t.at("columns").size(); ++i) out << "---|";
    out << '\n';
    for (const auto& r : t.at("rows")) {
      out << "| " << r.at("row").get<std::string>() << " |";
      for (const auto& c : t.at("columns")) {
        const std::string col = c.get<std::string>();
        out << ' ' << (r.at("cells").contains(col) ? format_cell(r["cells"][col], percent) : "n/a") << " |";
      }
      out << '\n';
    }
    out << '\n';
  }
  return out.str();
}

std::string report_summary(const fs::path& dir) {
  if (!fs::exists(dir)) throw ArgumentError("no such directory: " + dir.string());
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "report.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<EvalReport> reports;
  for (const auto& p : paths) reports.push_back(report_from_json(read_json(p)));
  return summary_markdown(summarize_reports(reports));
}

ExperimentResult run_experiment(const ExperimentManifest& manifest, const ProgressFn& progress) {
  const std::string hash = manifest_hash(manifest);
  const fs::path dir = manifest.run_dir();
  fs::create_directories(dir);
  {
    json mj = to_json(manifest);
    mj["manifest_hash"] = hash;
    write_json(dir / "manifest.json", mj);
  }
  const json hyper = method_hyperparameters(manifest.method, manifest.hyperparameters, manifest.profile);
  const fs::path root = data_root();
  const json experiment_tag = {{"id", manifest.id},
                               {"dataset", manifest.dataset},
                               {"ood_dataset", manifest.ood_dataset},
                               {"method", manifest.method},
                               {"manifest_hash", hash}};

  // Loaded on first use so resumed runs skip what they do not need.
  std::optional<Dataset> train_full, test_full, ood_full;
  auto load = [&](std::optional<Dataset>& slot, const std::string& name, Split split) -> const Dataset& {
    if (!slot) {
      try {
        slot = load_named_dataset(root, name, split);
      } catch (const std::exception& e) {
        throw StageError("data", std::string("data: ") + e.what());
      }
    }
    return *slot;
  };
  auto maybe_subsample = [](const Dataset& d, std::size_t n, std::uint64_t seed) {
    return n == 0 || n >= d.size() ? d : subsample(d, n, seed);
  };

  Severity audit_severity = Severity::pass;
  for (std::uint64_t seed : manifest.seeds) {
    const fs::path seed_dir = dir / ("seed_" + std::to_string(seed));
    StageBook book(seed_dir / ".stages", hash);
    json tag = experiment_tag;
    tag["seed"] = seed;

    fs::path ckpt = seed_dir / "checkpoint" / "posterior";
    if (manifest.checkpoint) {
      ckpt = *manifest.checkpoint;
      book.run("train", progress, [&] {
        const LoadedPosterior lp = load_posterior(ckpt);
        if (!manifest.checkpoint_sha256.empty() && lp.payload_sha256 != manifest.checkpoint_sha256) {
          throw ConsistencyError("checkpoint hash " + lp.payload_sha256 + " does not match the manifest");
        }
      });
    } else {
      book.run("train", progress, [&] {
        const Dataset train = maybe_subsample(load(train_full, manifest.dataset, Split::train),
                                              manifest.train_subsample, derive_seed(seed, kTrainDataStream));
        const Architecture arch = method_architecture(manifest.method, manifest.architecture, train, hyper);
        TrainResult result = train_method(manifest.method, arch, train, hyper, derive_seed(seed, kTrainStream));
        CheckpointMeta meta;
        meta.architecture_id = arch.id;
        meta.num_classes = arch.num_classes;
        meta.input_shape = arch.input_shape;
        meta.dropout_rate = arch.has_dropout() ? arch.dropout_rate() : 0.1;
        meta.seed = seed;
        meta.hyperparameters = hyper;
        meta.hyperparameters["method"] = manifest.method;
        meta.hyperparameters["manifest_hash"] = hash;
        meta.curve = result.curve;
        const DatasetManifest dm = dataset_manifest(train);
        meta.dataset_manifest_hash =
            sha256_hex(json{{"name", dm.name}, {"split", dm.split}, {"sha256", dm.sha256}, {"count", dm.count},
                            {"shape", dm.shape}}
                           .dump());
        save_posterior(ckpt, result.posterior, meta);
      });
    }
    const LoadedPosterior lp = load_posterior(ckpt);

    AttackConfig attack = attack_config_from_json(manifest.attack, manifest.dataset);
    attack.seed = derive_seed(seed, kAttackSeedStream);
    TaskOptions options;
    options.attack = attack;
    options.include_noisy = manifest.include_noisy;
    options.eval_samples = manifest.eval_samples;
    options.seed = seed;

    auto test_set = [&] {
      return maybe_subsample(load(test_full, manifest.dataset, Split::test), manifest.test_subsample,
                             derive_seed(seed, kTestDataStream));
    };

    for (TaskKind task : manifest.tasks) {
      const std::string name = to_string(task);
      book.run(name, progress, [&] {
        const Dataset test = test_set();
        TaskOptions o = options;
        EvalReport report;
        if (task == TaskKind::robust_accuracy) {
          o.attacks.clear();
          for (const auto& a : manifest.attacks) {
            if (a == "fgsm" || a == "pgd") o.attacks.push_back(a);
          }
          report = task_robust_accuracy(lp.posterior, lp.arch, test, o);
        } else if (task == TaskKind::ae_detection) {
          o.attacks = manifest.attacks;
          report = task_ae_detection(lp.posterior, lp.arch, test, o);
        } else {
          o.attacks = manifest.attacks;
          const Dataset ood = maybe_subsample(load(ood_full, manifest.ood_dataset, Split::test),
                                              manifest.test_subsample, derive_seed(seed, kOodDataStream));
          report = task_semantic_shift(lp.posterior, lp.arch, test, ood, o);
        }
        report.metadata["experiment"] = tag;
        report.metadata["manifest_hash"] = hash;
        report.metadata["posterior_sha256"] = lp.payload_sha256;
        write_report(seed_dir / name, report);
        emit_plots(seed_dir / name);
      });
    }

    if (manifest.audit) {
      book.run("audit", progress, [&] {
        const Dataset test = test_set();
        const std::size_t n = std::min<std::size_t>(kSimplexProbeRows, test.size());
        AuditSubject subject{manifest.id, lp.posterior, lp.arch, test.inputs.topRows(static_cast<Eigen::Index>(n)),
                             std::vector<int>(test.labels.begin(), test.labels.begin() + static_cast<long>(n)),
                             attack};
        AuditOptions ao;
        ao.seed = derive_seed(seed, kAuditStream);
        std::vector<AuditFinding> findings = run_audit_suite(subject, ao);
        json sweep = nullptr;
        if (!manifest.sweep_epsilons.empty()) {
          const SweepReport s =
              epsilon_sweep(lp.posterior, lp.arch, test, manifest.sweep_epsilons, attack, manifest.eval_samples, seed);
          findings.push_back(s.finding);
          sweep = json::array();
          for (const auto& p : s.points) sweep.push_back({{"epsilon", p.epsilon}, {"robust_accuracy", p.robust_accuracy}});
        }
        json report = audit_report_json(manifest.id, findings);
        report["manifest_hash"] = hash;
        report["sweep"] = sweep;
        write_json(seed_dir / "audit" / "findings.json", report);
      });
      const json findings = read_json(seed_dir / "audit" / "findings.json");
      const std::string sev = findings.value("rollup", std::string("pass"));
      const Severity s = sev == "fail" ? Severity::fail : sev == "warn" ? Severity::warn : Severity::pass;
      audit_severity = std::max(audit_severity, s);
    }
  }

  std::vector<EvalReport> reports;
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "report.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) reports.push_back(report_from_json(read_json(p)));
  json summary = summarize_reports(reports);
  summary["experiment"] = experiment_tag;
  summary["seeds"] = manifest.seeds;
  summary["audit"] = to_string(audit_severity);
  write_json(dir / "summary.json", summary);
  {
    std::ofstream md(dir / "summary.md");
    md << "# " << manifest.id << "\n\nmanifest " << hash << "\n\n" << summary_markdown(summary);
  }

  // Index of every artifact with its checksum, tagged with the manifest hash.
  json index = {{"manifest_hash", hash}, {"files", json::object()}};
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "artifacts.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    index["files"][fs::relative(f, dir).generic_string()] = sha256_hex(bytes);
  }
  write_json(dir / "artifacts.json", index);
  return {dir, summary, audit_severity};
}

}  // namespace bnnr
