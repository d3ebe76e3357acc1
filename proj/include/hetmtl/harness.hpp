#pragma once

// Experiment orchestration: RMSE, the single-task baseline, random (or grid)
// hyperparameter search, multi-seed replication sweeps and latent export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "hetmtl/data.hpp"
#include "hetmtl/dgp.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/io.hpp"
#include "hetmtl/model.hpp"
#include "hetmtl/parallel.hpp"
#include "hetmtl/rng.hpp"
#include "hetmtl/trainer.hpp"

namespace hetmtl {

inline double rmse(const Eigen::Ref<const Vector>& yhat, const Eigen::Ref<const Vector>& y) {
  if (yhat.size() != y.size()) throw ShapeError("rmse: length mismatch");
  if (y.size() == 0) throw ArgumentError("rmse: empty input");
  return std::sqrt((yhat - y).squaredNorm() / static_cast<double>(y.size()));
}

struct HyperParams {
  int depth_s = 3;
  Index width_s = 32;
  Index q = 8;
  int depth_c = 3;
  Index width_c = 32;
  Index p = 8;
  double lambda_s = 1.0;  // applied to every task
  double lambda_c = 1.0;
  double lambda_o = 0.0;
  Index batch = 16;
  double learning_rate = 0.01;
  int epochs = 2000;

  Architecture architecture(bool use_shared = true) const {
    return {depth_s, width_s, q, depth_c, width_c, p, use_shared};
  }

  void validate() const {
    if (depth_s < 1 || depth_c < 1 || width_s < 1 || width_c < 1 || q < 1 || p < 1) {
      throw ArgumentError("HyperParams: depths, widths and output dims must be positive");
    }
    if (!(lambda_s >= 0.0) || !(lambda_c >= 0.0) || !(lambda_o >= 0.0) ||
        !std::isfinite(lambda_s) || !std::isfinite(lambda_c) || !std::isfinite(lambda_o)) {
      throw ArgumentError("HyperParams: penalties must be finite and non-negative");
    }
    if (batch < 1) throw ArgumentError("HyperParams: batch must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ArgumentError("HyperParams: learning rate must be finite and >= 0");
    }
    if (epochs < 1) throw ArgumentError("HyperParams: epochs must be >= 1");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

/// The fixed setting used for desk-scale replication and as the CLI default.
inline HyperParams published_hyperparams() { return HyperParams{}; }

/// Candidate values per hyperparameter; defaults reproduce the tuning table.
struct SearchSpace {
  std::vector<int> depth_s{3, 4, 5};
  std::vector<Index> width_s{16, 32, 64, 128};
  std::vector<Index> q{8, 16, 32, 64};
  std::vector<int> depth_c{3, 4, 5};
  std::vector<Index> width_c{16, 32, 64, 128};
  std::vector<Index> p{8, 16, 32, 64};
  std::vector<double> lambda_s{1e-4, 1e-3, 1e-2, 0.1, 1, 10, 100, 500, 1000, 5000};
  std::vector<double> lambda_c{1e-4, 1e-3, 1e-2, 0.1, 1, 10, 100, 500, 1000, 5000};
  std::vector<double> lambda_o{0.001, 0.01};
  std::vector<Index> batch{8, 16, 32};
  std::vector<double> learning_rate{1e-4, 1e-3};
  std::vector<int> epochs{25000};

  template <class F>
  void for_each_axis(F&& f) const {
    f(depth_s), f(width_s), f(q), f(depth_c), f(width_c), f(p);
    f(lambda_s), f(lambda_c), f(lambda_o), f(batch), f(learning_rate), f(epochs);
  }

  void validate() const {
    for_each_axis([](const auto& axis) {
      if (axis.empty()) throw ArgumentError("SearchSpace: every axis needs at least one value");
    });
  }

  std::uint64_t grid_size() const {
    std::uint64_t n = 1;
    for_each_axis([&](const auto& axis) { n *= axis.size(); });
    return n;
  }

  /// Mixed-radix decoding of a grid index; the last axis varies fastest.
  HyperParams at(std::uint64_t index) const {
    HyperParams hp;
    auto pick = [&index](const auto& axis) {
      const auto v = axis[static_cast<std::size_t>(index % axis.size())];
      index /= axis.size();
      return v;
    };
    hp.epochs = pick(epochs);
    hp.learning_rate = pick(learning_rate);
    hp.batch = pick(batch);
    hp.lambda_o = pick(lambda_o);
    hp.lambda_c = pick(lambda_c);
    hp.lambda_s = pick(lambda_s);
    hp.p = pick(p);
    hp.width_c = pick(width_c);
    hp.depth_c = pick(depth_c);
    hp.q = pick(q);
    hp.width_s = pick(width_s);
    hp.depth_s = pick(depth_s);
    return hp;
  }

  bool contains(const HyperParams& hp) const {
    auto in = [](const auto& axis, auto v) {
      return std::find(axis.begin(), axis.end(), v) != axis.end();
    };
    return in(depth_s, hp.depth_s) && in(width_s, hp.width_s) && in(q, hp.q) &&
           in(depth_c, hp.depth_c) && in(width_c, hp.width_c) && in(p, hp.p) &&
           in(lambda_s, hp.lambda_s) && in(lambda_c, hp.lambda_c) && in(lambda_o, hp.lambda_o) &&
           in(batch, hp.batch) && in(learning_rate, hp.learning_rate) && in(epochs, hp.epochs);
  }
};

/// Each field drawn uniformly and independently from its axis, in declaration order.
inline HyperParams sample_hyperparams(Rng& rng, const SearchSpace& space = {}) {
  space.validate();
  auto pick = [&rng](const auto& axis) {
    return axis[static_cast<std::size_t>(rng.uniform_index(axis.size()))];
  };
  HyperParams hp;
  hp.depth_s = pick(space.depth_s);
  hp.width_s = pick(space.width_s);
  hp.q = pick(space.q);
  hp.depth_c = pick(space.depth_c);
  hp.width_c = pick(space.width_c);
  hp.p = pick(space.p);
  hp.lambda_s = pick(space.lambda_s);
  hp.lambda_c = pick(space.lambda_c);
  hp.lambda_o = pick(space.lambda_o);
  hp.batch = pick(space.batch);
  hp.learning_rate = pick(space.learning_rate);
  hp.epochs = pick(space.epochs);
  return hp;
}

/// Run-level knobs that sit outside the hyperparameter table.
struct TrainingBudget {
  std::optional<int> max_epochs = 2000;  // caps HyperParams::epochs; nullopt = no cap
  int patience = 200;
  double lr_decay = 0.95;
  int inner_steps = 1;
  bool stale_beta_in_alpha_step = false;

  friend bool operator==(const TrainingBudget&, const TrainingBudget&) = default;
};

inline TrainConfig make_train_config(const HyperParams& hp, int tasks, const TrainingBudget& budget,
                                     std::uint64_t seed, bool penalised = true) {
  hp.validate();
  TrainConfig tc;
  tc.epochs = budget.max_epochs ? std::min(hp.epochs, *budget.max_epochs) : hp.epochs;
  tc.batch_sizes = {hp.batch};
  tc.schedule = {hp.learning_rate, budget.lr_decay};
  tc.weights = penalised ? PenaltyWeights::uniform(tasks, hp.lambda_s, hp.lambda_c, hp.lambda_o)
                         : PenaltyWeights::uniform(tasks, 0.0, 0.0, 0.0);
  tc.patience = budget.patience;
  tc.inner_steps = budget.inner_steps;
  tc.seed = derive_seed(seed, "train");
  tc.stale_beta_in_alpha_step = budget.stale_beta_in_alpha_step;
  return tc;
}

/// Trains the dual-encoder model on all tasks.
inline TrainResult fit_mtl(std::span<const TaskSplits> data, const HyperParams& hp,
                           const TrainingBudget& budget, std::uint64_t seed) {
  if (data.empty()) throw ArgumentError("fit_mtl: no tasks");
  const int R = static_cast<int>(data.size());
  auto model = make_model(hp.architecture(true), R, data.front().train.dim(),
                          derive_seed(seed, "model"));
  return train(std::move(model), data, make_train_config(hp, R, budget, seed));
}

struct StlResult {
  MtlModel model;
  TrainReport report;
  double test_rmse = 0.0;
};

/// Single-task baseline: one task-specific encoder plus a linear head, no
/// shared path and no penalties, trained by the same loop with R = 1.
inline StlResult train_stl_baseline(const TaskSplits& task, const HyperParams& hp,
                                    const TrainingBudget& budget, std::uint64_t seed) {
  auto model = make_model(hp.architecture(false), 1, task.train.dim(), derive_seed(seed, "model"));
  const std::span<const TaskSplits> one(&task, 1);
  auto result = train(std::move(model), one, make_train_config(hp, 1, budget, seed, false));
  const double test = rmse(predict(result.model, 0, task.test.x), task.test.y);
  return {std::move(result.model), std::move(result.report), test};
}

enum class Method { mtl, stl };

inline std::string_view to_string(Method m) { return m == Method::mtl ? "MTL" : "STL"; }

struct TrialResult {
  int index = 0;
  HyperParams hp;
  double val_loss = std::numeric_limits<double>::infinity();
  bool failed = false;
  std::string error;
};

struct SearchOptions {
  Method method = Method::mtl;
  bool grid = false;  // enumerate the whole space instead of sampling
  SearchSpace space{};
  TrainingBudget budget{};
  int jobs = 1;
};

struct SearchResult {
  HyperParams best;
  int best_index = -1;
  std::vector<TrialResult> trials;
};

/// Mean validation MSE of one configuration under the given method.
inline double validation_loss(std::span<const TaskSplits> data, const HyperParams& hp,
                              Method method, const TrainingBudget& budget, std::uint64_t seed) {
  if (method == Method::mtl) return fit_mtl(data, hp, budget, seed).report.best_val_mse;
  double total = 0.0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    total += train_stl_baseline(data[r], hp, budget, derive_seed(seed, "stl-task", r))
                 .report.best_val_mse;
  }
  return total / static_cast<double>(data.size());
}

/// Index of the smallest finite loss; ties go to the earliest trial.
inline int select_best_trial(std::span<const TrialResult> trials) {
  int best = -1;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (trials[i].failed || !std::isfinite(trials[i].val_loss)) continue;
    if (best < 0 || trials[i].val_loss < trials[static_cast<std::size_t>(best)].val_loss) {
      best = static_cast<int>(i);
    }
  }
  return best;
}

inline SearchResult run_hpsearch(std::span<const TaskSplits> data, int trials, std::uint64_t seed,
                                 const SearchOptions& opts = {}) {
  if (data.empty()) throw ArgumentError("run_hpsearch: no tasks");
  std::vector<HyperParams> settings;
  if (opts.grid) {
    const auto n = opts.space.grid_size();
    if (n > 1'000'000) {
      throw ArgumentError("run_hpsearch: grid has " + std::to_string(n) +
                          " points; restrict the search space for grid mode");
    }
    for (std::uint64_t i = 0; i < n; ++i) settings.push_back(opts.space.at(i));
  } else {
    if (trials < 1) throw ArgumentError("run_hpsearch: trials must be >= 1");
    Rng rng = Rng::stream(seed, "hpsearch/sample");
    for (int i = 0; i < trials; ++i) settings.push_back(sample_hyperparams(rng, opts.space));
  }

  SearchResult out;
  out.trials.resize(settings.size());
  parallel_for(settings.size(), opts.jobs, [&](std::size_t i) {
    TrialResult& t = out.trials[i];
    t.index = static_cast<int>(i);
    t.hp = settings[i];
    try {
      t.val_loss = validation_loss(data, settings[i], opts.method, opts.budget,
                                   derive_seed(seed, "hpsearch/trial", i));
    } catch (const Error& e) {
      t.failed = true;
      t.error = e.what();
    }
  });

  out.best_index = select_best_trial(out.trials);
  if (out.best_index < 0) {
    std::string msg = "run_hpsearch: all " + std::to_string(out.trials.size()) + " trials failed:";
    for (const auto& t : out.trials) msg += "\n  trial " + std::to_string(t.index) + ": " + t.error;
    throw Error(msg);
  }
  out.best = out.trials[static_cast<std::size_t>(out.best_index)].hp;
  return out;
}

// ---------------------------------------------------------------------------
// Replication sweeps

struct MetricRow {
  std::string setting;
  std::uint64_t seed = 0;
  int task = 0;  // 1-based, as written to metrics.csv
  Method method = Method::mtl;
  Split split = Split::test;
  double rmse = 0.0;

  auto key() const { return std::tie(setting, seed, task, method, split); }
};

struct AggregateRow {
  int task = 0;
  Method method = Method::mtl;
  double mean = 0.0;
  double sd = 0.0;  // sample SD (n - 1); 0 for a single seed
  int count = 0;
};

struct SeedFailure {
  std::uint64_t seed = 0;
  Method method = Method::mtl;
  std::string message;
};

struct SweepResult {
  std::vector<MetricRow> rows;
  std::vector<AggregateRow> aggregate;
  std::vector<SeedFailure> failures;
};

/// Mean and sample SD per (task, method) over the rows of one split.
inline std::vector<AggregateRow> aggregate_metrics(std::span<const MetricRow> rows,
                                                   Split split = Split::test) {
  std::vector<AggregateRow> out;
  std::vector<std::vector<double>> values;
  for (const auto& row : rows) {
    if (row.split != split) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const AggregateRow& a) {
      return a.task == row.task && a.method == row.method;
    });
    if (it == out.end()) {
      out.push_back({row.task, row.method, 0.0, 0.0, 0});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(row.rmse);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[i].mean = mean;
    out[i].sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    out[i].count = static_cast<int>(v.size());
  }
  std::sort(out.begin(), out.end(), [](const AggregateRow& a, const AggregateRow& b) {
    return std::tie(a.task, a.method) < std::tie(b.task, b.method);
  });
  return out;
}

struct ReplicationConfig {
  std::string setting = "1";  // label written to metrics.csv
  DgpConfig dgp{};            // seed replaced per replicate
  std::vector<std::uint64_t> seeds{0};
  HyperParams hp = published_hyperparams();
  TrainingBudget budget{};
  int search_trials = 0;  // > 0 tunes each method per seed before fitting
  int jobs = 1;
};

namespace detail {

inline void append_rows(std::vector<MetricRow>& rows, const std::string& setting,
                        std::uint64_t seed, int task, Method method, const MtlModel& model,
                        int model_task, const TaskSplits& data) {
  for (Split s : kAllSplits) {
    const auto& ds = data.get(s);
    rows.push_back({setting, seed, task + 1, method, s,
                    rmse(predict(model, model_task, ds.x), ds.y)});
  }
}

struct SeedOutcome {
  std::vector<MetricRow> rows;
  std::vector<SeedFailure> failures;
};

inline SeedOutcome run_one_seed(const ReplicationConfig& cfg, std::uint64_t seed) {
  SeedOutcome out;
  DgpConfig dgp = cfg.dgp;
  dgp.seed = seed;
  const GeneratedStudy study = generate(dgp);
  const std::span<const TaskSplits> data(study.tasks);

  try {
    HyperParams hp = cfg.hp;
    if (cfg.search_trials > 0) {
      SearchOptions so;
      so.budget = cfg.budget;
      hp = run_hpsearch(data, cfg.search_trials, derive_seed(seed, "search/mtl"), so).best;
    }
    const auto fit = fit_mtl(data, hp, cfg.budget, derive_seed(seed, "fit/mtl"));
    for (int r = 0; r < dgp.tasks; ++r) {
      append_rows(out.rows, cfg.setting, seed, r, Method::mtl, fit.model, r,
                  study.tasks[static_cast<std::size_t>(r)]);
    }
  } catch (const Error& e) {
    out.failures.push_back({seed, Method::mtl, e.what()});
  }

  try {
    HyperParams hp = cfg.hp;
    if (cfg.search_trials > 0) {
      SearchOptions so;
      so.method = Method::stl;
      so.budget = cfg.budget;
      hp = run_hpsearch(data, cfg.search_trials, derive_seed(seed, "search/stl"), so).best;
    }
    for (int r = 0; r < dgp.tasks; ++r) {
      const auto& task = study.tasks[static_cast<std::size_t>(r)];
      const auto stl = train_stl_baseline(task, hp, cfg.budget,
                                          derive_seed(seed, "fit/stl", static_cast<std::uint64_t>(r)));
      append_rows(out.rows, cfg.setting, seed, r, Method::stl, stl.model, 0, task);
    }
  } catch (const Error& e) {
    out.failures.push_back({seed, Method::stl, e.what()});
  }
  return out;
}

}  // namespace detail

/// Generates one study per seed, fits MTL and STL, and records RMSE on every
/// split. Failures are recorded per seed and the sweep continues. Output rows
/// are sorted, so the result does not depend on scheduling.
inline SweepResult run_replications(const ReplicationConfig& cfg) {
  if (cfg.seeds.empty()) throw ArgumentError("run_replications: need at least one seed");
  cfg.dgp.validate();
  cfg.hp.validate();
  std::vector<detail::SeedOutcome> outcomes(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.jobs,
               [&](std::size_t i) { outcomes[i] = detail::run_one_seed(cfg, cfg.seeds[i]); });

  SweepResult result;
  for (auto& o : outcomes) {
    result.rows.insert(result.rows.end(), o.rows.begin(), o.rows.end());
    result.failures.insert(result.failures.end(), o.failures.begin(), o.failures.end());
  }
  std::sort(result.rows.begin(), result.rows.end(),
            [](const MetricRow& a, const MetricRow& b) { return a.key() < b.key(); });
  std::sort(result.failures.begin(), result.failures.end(),
            [](const SeedFailure& a, const SeedFailure& b) {
              return std::tie(a.seed, a.method) < std::tie(b.seed, b.method);
            });
  result.aggregate = aggregate_metrics(result.rows, Split::test);
  return result;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Per-task relative distances of heads from centers; nullopt when the
/// center has zero norm.
struct CenterDistance {
  std::optional<double> alpha;
  std::optional<double> beta;
};

inline std::vector<CenterDistance> relative_center_distances(const MtlModel& model) {
  std::vector<CenterDistance> out;
  const double na = model.centers.alpha_bar.norm();
  const double nb = model.centers.beta_bar.norm();
  for (const auto& h : model.heads) {
    CenterDistance cd;
    if (na > 0.0) cd.alpha = (h.alpha - model.centers.alpha_bar).norm() / na;
    if (nb > 0.0) cd.beta = (h.beta - model.centers.beta_bar).norm() / nb;
    out.push_back(cd);
  }
  return out;
}

/// Writes latent_task<r>_specific.csv (and _shared.csv when the model has a
/// shared encoder) for every dataset; returns the paths written.
inline std::vector<std::filesystem::path> export_latents(const MtlModel& model,
                                                         std::span<const TaskDataset> datasets,
                                                         const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  for (const auto& ds : datasets) {
    const auto lb = latents(model, ds.task, ds.x);
    const std::string stem = "latent_task" + std::to_string(ds.task + 1) + "_";
    auto path = dir / (stem + "specific.csv");
    io::write_latent_csv(path, lb.specific, ds.task + 1);
    written.push_back(path);
    if (model.shared) {
      path = dir / (stem + "shared.csv");
      io::write_latent_csv(path, lb.shared, ds.task + 1);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace hetmtl
