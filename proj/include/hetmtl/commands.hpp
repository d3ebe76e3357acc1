#pragma once

// Implementation of the hetmtl command-line tool. Each command takes a plain
// options struct so tests can drive it without spawning a process.
//
// Resolution order for every setting: built-in defaults, then --config, then
// explicit flags. Everything is validated before any training starts.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hetmtl/config.hpp"
#include "hetmtl/data.hpp"
#include "hetmtl/dgp.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/harness.hpp"
#include "hetmtl/io.hpp"
#include "hetmtl/model.hpp"
#include "hetmtl/trainer.hpp"

namespace hetmtl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kPartial = 3 };

// Desk-scale defaults and their full-scale counterparts.
inline constexpr int kDeskSeeds = 10;
inline constexpr int kFullSeeds = 100;
inline constexpr int kDeskTrials = 5;
inline constexpr int kFullTrials = 50;
inline constexpr int kFullEpochs = 25000;

/// Options shared by the training-type commands.
struct TrainingOptions {
  std::optional<fs::path> config;
  std::optional<int> max_epochs;
  std::optional<int> patience;
  bool full_scale = false;
};

struct Resolved {
  config::RunConfig run;
  HyperParams hp;
  TrainingBudget budget;
};

inline Resolved resolve(const TrainingOptions& o) {
  Resolved r;
  if (o.config) r.run = config::load_run_config(*o.config);
  r.hp = r.run.hp;
  r.budget = r.run.budget;
  if (o.full_scale) {
    r.hp.epochs = kFullEpochs;
    r.budget.max_epochs.reset();
  }
  if (o.max_epochs) r.budget.max_epochs = *o.max_epochs;
  if (o.patience) r.budget.patience = *o.patience;
  r.hp.validate();
  config::validate(r.budget);
  return r;
}

// ---------------------------------------------------------------------------
// CSV tables

inline std::string metrics_csv(std::span<const MetricRow> rows) {
  std::string s = "setting,seed,task,method,split,rmse\n";
  for (const auto& m : rows) {
    s += m.setting + "," + std::to_string(m.seed) + "," + std::to_string(m.task) + "," +
         std::string(to_string(m.method)) + "," + std::string(to_string(m.split)) + "," +
         io::format_double(m.rmse) + "\n";
  }
  return s;
}

inline std::string aggregate_csv(const std::string& setting, std::span<const AggregateRow> rows) {
  std::string s = "setting,task,method,mean,sd,count\n";
  for (const auto& a : rows) {
    s += setting + "," + std::to_string(a.task) + "," + std::string(to_string(a.method)) + "," +
         io::format_double(a.mean) + "," + io::format_double(a.sd) + "," +
         std::to_string(a.count) + "\n";
  }
  return s;
}

inline std::string csv_quote(const std::string& text) {
  std::string q = "\"";
  for (char c : text) {
    if (c == '"') q += '"';
    q += (c == '\n' ? ' ' : c);
  }
  return q + "\"";
}

inline std::string trials_csv(std::span<const TrialResult> trials) {
  std::string s =
      "trial,depth_s,width_s,q,depth_c,width_c,p,lambda_s,lambda_c,lambda_o,batch,"
      "learning_rate,epochs,val_loss,status,error\n";
  for (const auto& t : trials) {
    const auto& h = t.hp;
    s += std::to_string(t.index) + "," + std::to_string(h.depth_s) + "," +
         std::to_string(h.width_s) + "," + std::to_string(h.q) + "," + std::to_string(h.depth_c) +
         "," + std::to_string(h.width_c) + "," + std::to_string(h.p) + "," +
         io::format_double(h.lambda_s) + "," + io::format_double(h.lambda_c) + "," +
         io::format_double(h.lambda_o) + "," + std::to_string(h.batch) + "," +
         io::format_double(h.learning_rate) + "," + std::to_string(h.epochs) + "," +
         (t.failed ? std::string("nan") : io::format_double(t.val_loss)) + "," +
         (t.failed ? "failed" : "ok") + "," + csv_quote(t.error) + "\n";
  }
  return s;
}

inline std::string train_report_csv(const TrainReport& rep) {
  std::string s = "epoch,learning_rate,train_mse,train_similarity,train_orthogonality,"
                  "train_objective,val_mse\n";
  for (std::size_t e = 0; e < rep.val_mse.size(); ++e) {
    const auto& o = rep.train_objective[e];
    s += std::to_string(e) + "," + io::format_double(rep.learning_rate[e]) + "," +
         io::format_double(o.mse) + "," + io::format_double(o.similarity) + "," +
         io::format_double(o.orthogonality) + "," + io::format_double(o.total) + "," +
         io::format_double(rep.val_mse[e]) + "\n";
  }
  return s;
}

/// Per-task RMSE table: "task,split,rmse" (task 1-based).
struct EvalRow {
  int task = 1;
  Split split = Split::test;
  double rmse = 0.0;
};

inline std::string eval_csv(std::span<const EvalRow> rows) {
  std::string s = "task,split,rmse\n";
  for (const auto& r : rows) {
    s += std::to_string(r.task) + "," + std::string(to_string(r.split)) + "," +
         io::format_double(r.rmse) + "\n";
  }
  return s;
}

inline void check_compatible(const MtlModel& model, std::span<const TaskSplits> data,
                             const std::string& model_name) {
  if (static_cast<int>(data.size()) != model.tasks()) {
    throw ShapeError(model_name + " has " + std::to_string(model.tasks()) +
                     " tasks but the data has " + std::to_string(data.size()));
  }
  for (const auto& ts : data) {
    if (ts.train.dim() != model.input_dim()) {
      throw ShapeError(model_name + " expects " + std::to_string(model.input_dim()) +
                       " features but task " + std::to_string(ts.train.task + 1) + " has " +
                       std::to_string(ts.train.dim()));
    }
  }
}

inline std::vector<EvalRow> evaluate(const MtlModel& model, std::span<const TaskSplits> data,
                                     std::span<const Split> splits) {
  std::vector<EvalRow> rows;
  for (int r = 0; r < model.tasks(); ++r) {
    for (Split s : splits) {
      const auto& ds = data[static_cast<std::size_t>(r)].get(s);
      rows.push_back({r + 1, s, rmse(predict(model, r, ds.x), ds.y)});
    }
  }
  return rows;
}

inline std::vector<Split> parse_splits(const std::vector<std::string>& names) {
  std::vector<Split> out;
  for (const auto& n : names) {
    const Split s = parse_split(n);
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  if (out.empty()) throw ArgumentError("at least one split is required");
  return out;
}

inline void write_text(const fs::path& path, const std::string& text, std::ostream& log) {
  io::write_atomic(path, text);
  log << "wrote " << path.string() << "\n";
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
  std::optional<std::string> setting;  // defaults to "1"
  std::optional<Index> shared_dim;
  std::optional<double> sigma_bar;
  std::optional<std::vector<Index>> samples;
  std::uint64_t seed = 0;
  fs::path out = "data";
  std::optional<fs::path> config;
};

inline DgpConfig resolve_dgp(const std::optional<std::string>& setting,
                             const SettingOverrides& flags,
                             const std::optional<fs::path>& config_path, std::string* label) {
  std::string id = "1";
  std::optional<config::json> dgp_json;
  if (config_path) {
    const auto rc = config::load_run_config(*config_path);
    if (rc.setting) id = *rc.setting;
    dgp_json = rc.dgp;
  }
  if (setting) id = *setting;
  SettingOverrides o = flags;
  DgpConfig c = make_setting(id, o);
  if (dgp_json) {
    config::apply(*dgp_json, c);
    // Flags win over the config file.
    if (o.shared_dim) c.shared_dim = *o.shared_dim;
    if (o.sigma_bar) c.sigma_task = {*o.sigma_bar};
    if (o.samples) c.samples = *o.samples;
  }
  if (o.seed) c.seed = *o.seed;
  c.validate();
  if (label) *label = id;
  return c;
}

inline int cmd_simulate(const SimulateOptions& o, std::ostream& log) {
  std::string label;
  const DgpConfig c =
      resolve_dgp(o.setting, {o.shared_dim, o.sigma_bar, o.samples, o.seed}, o.config, &label);
  const auto study = generate(c);
  const auto m = config::write_study(o.out, study, label);
  log << "simulated setting " << label << " (R=" << c.tasks << ", d=" << c.dim
      << ", d_c=" << c.shared_dim << ", seed=" << c.seed << "): " << m.files.size()
      << " files in " << o.out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path data = "data";
  fs::path out = "run";
  std::uint64_t seed = 0;
  TrainingOptions training;
};

inline int cmd_train(const TrainOptions& o, std::ostream& log) {
  const auto res = resolve(o.training);
  const auto data = config::load_study(o.data);
  const auto fit = fit_mtl(data, res.hp, res.budget, o.seed);

  io::save_model(o.out / "model.bin", fit.model);
  log << "wrote " << (o.out / "model.bin").string() << "\n";
  write_text(o.out / "train_report.csv", train_report_csv(fit.report), log);
  const std::vector<Split> all(kAllSplits.begin(), kAllSplits.end());
  const auto rows = evaluate(fit.model, data, all);
  write_text(o.out / "metrics.csv", eval_csv(rows), log);

  config::json summary = config::run_config_json(res.hp, res.budget);
  summary["seed"] = o.seed;
  summary["best_epoch"] = fit.report.best_epoch;
  summary["epochs_run"] = fit.report.epochs_run;
  summary["best_val_mse"] = fit.report.best_val_mse;
  summary["singular_center_solves"] = fit.report.singular_center_solves;
  summary["max_abs_specific_param"] = fit.report.max_abs_specific_param;
  summary["max_abs_shared_param"] = fit.report.max_abs_shared_param;
  config::json tasks = config::json::array();
  const auto dist = relative_center_distances(fit.model);
  for (int r = 0; r < fit.model.tasks(); ++r) {
    const auto ur = static_cast<std::size_t>(r);
    config::json t{{"task", r + 1},
                   {"alpha_deviation", fit.report.alpha_deviation[ur]},
                   {"beta_deviation", fit.report.beta_deviation[ur]},
                   {"orthogonality", fit.report.orthogonality_full[ur]},
                   {"relative_alpha_distance", dist[ur].alpha ? config::json(*dist[ur].alpha)
                                                              : config::json(nullptr)},
                   {"relative_beta_distance", dist[ur].beta ? config::json(*dist[ur].beta)
                                                            : config::json(nullptr)}};
    for (const auto& row : rows) {
      if (row.task == r + 1) t[std::string(to_string(row.split)) + "_rmse"] = row.rmse;
    }
    tasks.push_back(std::move(t));
  }
  summary["tasks"] = std::move(tasks);
  write_text(o.out / "summary.json", config::dump(summary), log);
  log << "best epoch " << fit.report.best_epoch << " of " << fit.report.epochs_run
      << ", validation MSE " << fit.report.best_val_mse << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path model = "run/model.bin";
  fs::path data = "data";
  std::vector<std::string> splits{"test"};
  fs::path out = "eval";
};

inline int cmd_eval(const EvalOptions& o, std::ostream& log) {
  const auto splits = parse_splits(o.splits);
  const auto model = io::load_model(o.model);
  const auto data = config::load_study(o.data);
  check_compatible(model, data, o.model.string());
  const auto rows = evaluate(model, data, splits);
  write_text(o.out / "metrics.csv", eval_csv(rows), log);

  std::string pred = "task,split,row,y,yhat\n";
  for (int r = 0; r < model.tasks(); ++r) {
    for (Split s : splits) {
      const auto& ds = data[static_cast<std::size_t>(r)].get(s);
      const Vector yhat = predict(model, r, ds.x);
      for (Index i = 0; i < ds.rows(); ++i) {
        pred += std::to_string(r + 1) + "," + std::string(to_string(s)) + "," +
                std::to_string(i) + "," + io::format_double(ds.y(i)) + "," +
                io::format_double(yhat(i)) + "\n";
      }
    }
  }
  write_text(o.out / "predictions.csv", pred, log);
  for (const auto& r : rows) {
    log << "task " << r.task << " " << to_string(r.split) << " RMSE " << r.rmse << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// hpsearch

struct HpsearchOptions {
  fs::path data = "data";
  fs::path out = "hpsearch";
  std::optional<int> trials;
  std::string method = "mtl";
  bool grid = false;
  std::uint64_t seed = 0;
  int jobs = 1;
  TrainingOptions training;
};

inline Method parse_method(const std::string& m) {
  if (m == "mtl" || m == "MTL") return Method::mtl;
  if (m == "stl" || m == "STL") return Method::stl;
  throw ArgumentError("unknown method '" + m + "' (expected mtl or stl)");
}

inline int cmd_hpsearch(const HpsearchOptions& o, std::ostream& log) {
  const auto res = resolve(o.training);
  SearchOptions so;
  so.method = parse_method(o.method);
  so.grid = o.grid;
  so.budget = res.budget;
  so.jobs = std::max(1, o.jobs);
  const int trials =
      o.trials.value_or(res.run.search_trials.value_or(o.training.full_scale ? kFullTrials
                                                                             : kDeskTrials));
  if (!o.grid && trials < 1) throw ArgumentError("--trials must be >= 1");
  const auto data = config::load_study(o.data);
  const auto result = run_hpsearch(data, trials, o.seed, so);
  write_text(o.out / "trials.csv", trials_csv(result.trials), log);
  write_text(o.out / "best_config.json",
             config::dump(config::run_config_json(result.best, res.budget)), log);
  log << "best trial " << result.best_index << " with validation MSE "
      << result.trials[static_cast<std::size_t>(result.best_index)].val_loss << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOptions {
  std::optional<std::string> setting;  // defaults to "1"
  std::optional<Index> shared_dim;
  std::optional<double> sigma_bar;
  std::optional<std::vector<Index>> samples;
  std::optional<int> seeds;  // replicate count
  std::uint64_t seed = 0;    // first replicate seed; replicate i uses seed + i
  std::optional<int> search_trials;
  int jobs = 1;
  bool allow_partial = false;
  fs::path out = "sweep";
  TrainingOptions training;
};

inline ReplicationConfig resolve_sweep(const SweepOptions& o, std::string* label) {
  const auto res = resolve(o.training);
  ReplicationConfig rc;
  rc.dgp = resolve_dgp(o.setting, {o.shared_dim, o.sigma_bar, o.samples, std::nullopt},
                       o.training.config, label);
  rc.setting = *label;
  const int count = o.seeds.value_or(
      res.run.sweep_seeds.value_or(o.training.full_scale ? kFullSeeds : kDeskSeeds));
  if (count < 1) throw ArgumentError("--seeds must be >= 1");
  rc.seeds.clear();
  for (int i = 0; i < count; ++i) rc.seeds.push_back(o.seed + static_cast<std::uint64_t>(i));
  rc.hp = res.hp;
  rc.budget = res.budget;
  rc.search_trials = o.search_trials.value_or(
      res.run.search_trials.value_or(o.training.full_scale ? kFullTrials : 0));
  if (rc.search_trials < 0) throw ArgumentError("--search-trials must be >= 0");
  rc.jobs = std::max(1, o.jobs);
  return rc;
}

inline int cmd_sweep(const SweepOptions& o, std::ostream& log) {
  std::string label;
  const auto rc = resolve_sweep(o, &label);
  log << "sweep: setting " << label << ", " << rc.seeds.size() << " seeds, " << rc.jobs
      << " jobs\n";
  const auto result = run_replications(rc);
  write_text(o.out / "metrics.csv", metrics_csv(result.rows), log);
  write_text(o.out / "aggregate.csv", aggregate_csv(label, result.aggregate), log);
  for (const auto& a : result.aggregate) {
    log << "task " << a.task << " " << to_string(a.method) << ": " << a.mean << " (" << a.sd
        << ")\n";
  }
  if (!result.failures.empty()) {
    std::string f = "seed,method,error\n";
    for (const auto& e : result.failures) {
      f += std::to_string(e.seed) + "," + std::string(to_string(e.method)) + "," +
           csv_quote(e.message) + "\n";
      log << "seed " << e.seed << " " << to_string(e.method) << " failed: " << e.message << "\n";
    }
    write_text(o.out / "failures.csv", f, log);
    if (!o.allow_partial) return kPartial;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// export-latents

struct ExportOptions {
  fs::path model = "run/model.bin";
  fs::path data = "data";
  std::vector<std::string> splits{"train"};
  fs::path out = "latents";
};

inline int cmd_export_latents(const ExportOptions& o, std::ostream& log) {
  const auto splits = parse_splits(o.splits);
  const auto model = io::load_model(o.model);
  const auto data = config::load_study(o.data);
  check_compatible(model, data, o.model.string());
  for (Split s : splits) {
    std::vector<TaskDataset> sets;
    for (const auto& ts : data) sets.push_back(ts.get(s));
    const auto dir = splits.size() == 1 ? o.out : o.out / std::string(to_string(s));
    for (const auto& p : export_latents(model, sets, dir)) log << "wrote " << p.string() << "\n";
  }
  return kOk;
}

}  // namespace hetmtl::cli
