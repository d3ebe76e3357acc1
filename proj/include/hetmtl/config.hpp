#pragma once

// JSON run configuration and dataset manifest.
//
// Run config (every section and key optional, unknown keys rejected):
//   {
//     "schema_version": 1,
//     "hyperparams": {"depth_s": 3, "width_s": 32, "q": 8, "depth_c": 3, "width_c": 32,
//                     "p": 8, "lambda_s": 1, "lambda_c": 1, "lambda_o": 0, "batch": 16,
//                     "learning_rate": 0.01, "epochs": 2000},
//     "budget": {"max_epochs": 2000, "patience": 200, "lr_decay": 0.95,
//                "inner_steps": 1, "stale_beta": false},
//     "dgp": {"setting": "1", "tasks": 2, "samples": [200], "dim": 20, "shared_dim": 10,
//             "sigma_e": 0.05, "sigma_c": 10, "sigma_task": [1], "linear": false},
//     "sweep": {"seeds": 10, "search_trials": 0}
//   }
// "budget.max_epochs" may be null for no cap.
//
// Dataset manifest (manifest.json, written by `simulate`):
//   {"schema_version": 1, "seed": 7, "setting": "1", "dgp": {...resolved...},
//    "files": [{"task": 1, "split": "train", "path": "task_1_train.csv", "rows": 200}, ...]}

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hetmtl/data.hpp"
#include "hetmtl/dgp.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/harness.hpp"
#include "hetmtl/io.hpp"

namespace hetmtl::config {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                           const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw SchemaError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
  }
}

inline void check_version(const json& doc, const std::string& where) {
  const auto it = doc.find("schema_version");
  if (it == doc.end()) return;
  if (!it->is_number_integer() || it->get<int>() != kSchemaVersion) {
    throw SchemaError(where + ": unsupported schema_version " + it->dump() + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
}

}  // namespace detail

inline json to_json(const HyperParams& hp) {
  return {{"depth_s", hp.depth_s},     {"width_s", hp.width_s},   {"q", hp.q},
          {"depth_c", hp.depth_c},     {"width_c", hp.width_c},   {"p", hp.p},
          {"lambda_s", hp.lambda_s},   {"lambda_c", hp.lambda_c}, {"lambda_o", hp.lambda_o},
          {"batch", hp.batch},         {"learning_rate", hp.learning_rate},
          {"epochs", hp.epochs}};
}

inline void apply(const json& j, HyperParams& hp, const std::string& where = "hyperparams") {
  detail::reject_unknown(j,
                         {"depth_s", "width_s", "q", "depth_c", "width_c", "p", "lambda_s",
                          "lambda_c", "lambda_o", "batch", "learning_rate", "epochs"},
                         where);
  detail::read(j, "depth_s", hp.depth_s, where);
  detail::read(j, "width_s", hp.width_s, where);
  detail::read(j, "q", hp.q, where);
  detail::read(j, "depth_c", hp.depth_c, where);
  detail::read(j, "width_c", hp.width_c, where);
  detail::read(j, "p", hp.p, where);
  detail::read(j, "lambda_s", hp.lambda_s, where);
  detail::read(j, "lambda_c", hp.lambda_c, where);
  detail::read(j, "lambda_o", hp.lambda_o, where);
  detail::read(j, "batch", hp.batch, where);
  detail::read(j, "learning_rate", hp.learning_rate, where);
  detail::read(j, "epochs", hp.epochs, where);
}

inline json to_json(const TrainingBudget& b) {
  return {{"max_epochs", b.max_epochs ? json(*b.max_epochs) : json(nullptr)},
          {"patience", b.patience},
          {"lr_decay", b.lr_decay},
          {"inner_steps", b.inner_steps},
          {"stale_beta", b.stale_beta_in_alpha_step}};
}

inline void apply(const json& j, TrainingBudget& b, const std::string& where = "budget") {
  detail::reject_unknown(j, {"max_epochs", "patience", "lr_decay", "inner_steps", "stale_beta"},
                         where);
  if (const auto it = j.find("max_epochs"); it != j.end()) {
    if (it->is_null()) {
      b.max_epochs.reset();
    } else {
      int v = 0;
      detail::read(j, "max_epochs", v, where);
      b.max_epochs = v;
    }
  }
  detail::read(j, "patience", b.patience, where);
  detail::read(j, "lr_decay", b.lr_decay, where);
  detail::read(j, "inner_steps", b.inner_steps, where);
  detail::read(j, "stale_beta", b.stale_beta_in_alpha_step, where);
}

inline void validate(const TrainingBudget& b) {
  if (b.max_epochs && *b.max_epochs < 1) throw ArgumentError("budget.max_epochs must be >= 1");
  if (b.patience < 1) throw ArgumentError("budget.patience must be >= 1");
  if (!(b.lr_decay > 0.0 && b.lr_decay <= 1.0)) {
    throw ArgumentError("budget.lr_decay must lie in (0, 1]");
  }
  if (b.inner_steps < 1) throw ArgumentError("budget.inner_steps must be >= 1");
}

inline json to_json(const DgpConfig& c) {
  return {{"tasks", c.tasks},       {"samples", c.samples},       {"dim", c.dim},
          {"shared_dim", c.shared_dim}, {"sigma_e", c.sigma_e},   {"sigma_c", c.sigma_c},
          {"sigma_task", c.sigma_task}, {"linear", c.linear},     {"seed", c.seed}};
}

inline void apply(const json& j, DgpConfig& c, const std::string& where = "dgp") {
  detail::reject_unknown(j,
                         {"setting", "tasks", "samples", "dim", "shared_dim", "sigma_e",
                          "sigma_c", "sigma_task", "linear", "seed"},
                         where);
  detail::read(j, "tasks", c.tasks, where);
  detail::read(j, "samples", c.samples, where);
  detail::read(j, "dim", c.dim, where);
  detail::read(j, "shared_dim", c.shared_dim, where);
  detail::read(j, "sigma_e", c.sigma_e, where);
  detail::read(j, "sigma_c", c.sigma_c, where);
  detail::read(j, "sigma_task", c.sigma_task, where);
  detail::read(j, "linear", c.linear, where);
  detail::read(j, "seed", c.seed, where);
}

/// Parsed run configuration file. Absent sections stay empty so command-line
/// defaults can fill them.
struct RunConfig {
  HyperParams hp = published_hyperparams();
  TrainingBudget budget{};
  std::optional<std::string> setting;
  std::optional<json> dgp;  // raw overrides, applied on top of the setting
  std::optional<int> sweep_seeds;
  std::optional<int> search_trials;
};

inline RunConfig parse_run_config(const json& doc, const std::string& where = "config") {
  detail::reject_unknown(doc, {"schema_version", "hyperparams", "budget", "dgp", "sweep"}, where);
  detail::check_version(doc, where);
  RunConfig rc;
  if (doc.contains("hyperparams")) apply(doc["hyperparams"], rc.hp, where + ".hyperparams");
  if (doc.contains("budget")) apply(doc["budget"], rc.budget, where + ".budget");
  if (doc.contains("dgp")) {
    const auto& d = doc["dgp"];
    DgpConfig probe;
    apply(d, probe, where + ".dgp");  // type and key check only
    if (d.contains("setting")) {
      std::string s;
      detail::read(d, "setting", s, where + ".dgp");
      rc.setting = s;
    }
    json rest = d;
    rest.erase("setting");
    rc.dgp = rest;
  }
  if (doc.contains("sweep")) {
    const auto& s = doc["sweep"];
    detail::reject_unknown(s, {"seeds", "search_trials"}, where + ".sweep");
    if (s.contains("seeds")) {
      int v = 0;
      detail::read(s, "seeds", v, where + ".sweep");
      rc.sweep_seeds = v;
    }
    if (s.contains("search_trials")) {
      int v = 0;
      detail::read(s, "search_trials", v, where + ".sweep");
      rc.search_trials = v;
    }
  }
  rc.hp.validate();
  validate(rc.budget);
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(doc, path.string());
}

/// Serialises a resolved configuration so it can be fed back with --config.
inline json run_config_json(const HyperParams& hp, const TrainingBudget& budget) {
  return {{"schema_version", kSchemaVersion},
          {"hyperparams", to_json(hp)},
          {"budget", to_json(budget)}};
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  int task = 1;  // 1-based
  Split split = Split::train;
  std::string path;  // relative to the manifest directory
  Index rows = 0;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::string setting;
  DgpConfig dgp;
  std::vector<ManifestEntry> files;
};

inline std::string dataset_file_name(int task_1based, Split s) {
  return "task_" + std::to_string(task_1based) + "_" + std::string(to_string(s)) + ".csv";
}

inline json to_json(const Manifest& m) {
  json files = json::array();
  for (const auto& f : m.files) {
    files.push_back({{"task", f.task},
                     {"split", std::string(to_string(f.split))},
                     {"path", f.path},
                     {"rows", f.rows}});
  }
  return {{"schema_version", kSchemaVersion},
          {"seed", m.seed},
          {"setting", m.setting},
          {"dgp", to_json(m.dgp)},
          {"files", files}};
}

inline Manifest parse_manifest(const json& doc, const std::string& where) {
  detail::reject_unknown(doc, {"schema_version", "seed", "setting", "dgp", "files"}, where);
  detail::check_version(doc, where);
  Manifest m;
  detail::read(doc, "seed", m.seed, where);
  detail::read(doc, "setting", m.setting, where);
  if (doc.contains("dgp")) apply(doc["dgp"], m.dgp, where + ".dgp");
  if (!doc.contains("files") || !doc["files"].is_array()) {
    throw SchemaError(where + ": missing 'files' array");
  }
  for (const auto& f : doc["files"]) {
    detail::reject_unknown(f, {"task", "split", "path", "rows"}, where + ".files[]");
    ManifestEntry e;
    std::string split;
    detail::read(f, "task", e.task, where + ".files[]");
    detail::read(f, "split", split, where + ".files[]");
    detail::read(f, "path", e.path, where + ".files[]");
    detail::read(f, "rows", e.rows, where + ".files[]");
    try {
      e.split = parse_split(split);
    } catch (const Error&) {
      throw SchemaError(where + ": bad split '" + split + "'");
    }
    if (e.task < 1 || e.path.empty()) throw SchemaError(where + ": bad file entry");
    m.files.push_back(std::move(e));
  }
  return m;
}

/// Writes task_<r>_<split>.csv for every task and split plus manifest.json.
inline Manifest write_study(const std::filesystem::path& dir, const GeneratedStudy& study,
                            const std::string& setting) {
  Manifest m;
  m.seed = study.config.seed;
  m.setting = setting;
  m.dgp = study.config;
  for (std::size_t r = 0; r < study.tasks.size(); ++r) {
    for (Split s : kAllSplits) {
      const int task = static_cast<int>(r) + 1;
      const auto name = dataset_file_name(task, s);
      const auto& ds = study.tasks[r].get(s);
      io::write_dataset_csv(dir / name, ds);
      m.files.push_back({task, s, name, ds.rows()});
    }
  }
  io::write_atomic(dir / "manifest.json", dump(to_json(m)));
  return m;
}

/// Loads the datasets a manifest points to. `data` may be the manifest file
/// or the directory containing manifest.json.
inline std::vector<TaskSplits> load_study(const std::filesystem::path& data, Manifest* out = nullptr) {
  const auto path = std::filesystem::is_directory(data) ? data / "manifest.json" : data;
  if (!std::filesystem::exists(path)) throw IoError("no manifest at " + path.string());
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": invalid JSON: " + e.what());
  }
  Manifest m = parse_manifest(doc, path.string());
  int tasks = 0;
  for (const auto& f : m.files) tasks = std::max(tasks, f.task);
  std::vector<TaskSplits> study(static_cast<std::size_t>(tasks));
  std::vector<std::array<bool, 3>> seen(static_cast<std::size_t>(tasks), {false, false, false});
  const auto base = path.parent_path();
  for (const auto& f : m.files) {
    const auto r = static_cast<std::size_t>(f.task - 1);
    auto ds = io::read_dataset_csv(base / f.path, f.split, f.task - 1);
    if (f.rows != 0 && ds.rows() != f.rows) {
      throw SchemaError((base / f.path).string() + ": manifest says " + std::to_string(f.rows) +
                        " rows, file has " + std::to_string(ds.rows()));
    }
    study[r].get(f.split) = std::move(ds);
    seen[r][static_cast<std::size_t>(f.split)] = true;
  }
  Index dim = -1;
  for (int r = 0; r < tasks; ++r) {
    for (Split s : kAllSplits) {
      if (!seen[static_cast<std::size_t>(r)][static_cast<std::size_t>(s)]) {
        throw SchemaError(path.string() + ": task " + std::to_string(r + 1) + " has no " +
                          std::string(to_string(s)) + " file");
      }
      const auto& ds = study[static_cast<std::size_t>(r)].get(s);
      if (dim < 0) dim = ds.dim();
      if (ds.dim() != dim) {
        throw SchemaError(path.string() + ": task " + std::to_string(r + 1) + " " +
                          std::string(to_string(s)) + " has " + std::to_string(ds.dim()) +
                          " features, expected " + std::to_string(dim));
      }
    }
  }
  if (out) *out = std::move(m);
  return study;
}

}  // namespace hetmtl::config
