// hetmtl: simulate data, train and evaluate dual-encoder multi-task models,
// tune hyperparameters and run replication sweeps.
//
// Every flag listed with an env name below can also be set through the
// environment (HETMTL_SEED, HETMTL_JOBS, HETMTL_CONFIG, HETMTL_MAX_EPOCHS,
// HETMTL_PATIENCE, HETMTL_OUT, HETMTL_FULL_SCALE). Explicit flags win.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hetmtl/commands.hpp"

namespace {

using namespace hetmtl;
namespace cl = hetmtl::cli;

struct Env {
  static constexpr const char* seed = "HETMTL_SEED";
  static constexpr const char* jobs = "HETMTL_JOBS";
  static constexpr const char* config = "HETMTL_CONFIG";
  static constexpr const char* out = "HETMTL_OUT";
  static constexpr const char* max_epochs = "HETMTL_MAX_EPOCHS";
  static constexpr const char* patience = "HETMTL_PATIENCE";
  static constexpr const char* full_scale = "HETMTL_FULL_SCALE";
};

void add_training_flags(CLI::App* cmd, cl::TrainingOptions& t, std::string& config,
                        int& max_epochs, int& patience) {
  cmd->add_option("--config", config, "JSON run configuration")
      ->envname(Env::config)
      ->check(CLI::ExistingFile);
  cmd->add_option("--max-epochs", max_epochs, "Cap on training epochs")
      ->envname(Env::max_epochs)
      ->check(CLI::PositiveNumber);
  cmd->add_option("--patience", patience, "Early-stopping patience in epochs")
      ->envname(Env::patience)
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--full-scale", t.full_scale,
                "Full budget: 25000 epochs, 50 search trials, 100 replications")
      ->envname(Env::full_scale);
}

void finish_training_flags(CLI::App* cmd, cl::TrainingOptions& t, const std::string& config,
                           int max_epochs, int patience) {
  if (cmd->count("--config")) t.config = config;
  if (cmd->count("--max-epochs")) t.max_epochs = max_epochs;
  if (cmd->count("--patience")) t.patience = patience;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder multi-task regression: simulation, training and sweeps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hetmtl 0.1.0");

  // Values that need "was it given" tracking are parsed into plain variables.
  std::string config_path;
  int max_epochs = 0;
  int patience = 0;
  Index dc = 0;
  double sigma_bar = 0.0;
  std::vector<Index> samples;
  std::string setting;
  int count = 0;

  cl::SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic study as CSV files");
  simulate->add_option("--setting", setting, "Setting id: 1-6, 4tasks, 5tasks, linear");
  simulate->add_option("--dc", dc, "Number of shared latent directions d_c");
  simulate->add_option("--sigma-bar", sigma_bar, "Task-specific coefficient SD for every task");
  simulate->add_option("--n", samples, "Samples per split, one value or one per task");
  simulate->add_option("--seed", sim.seed, "Random seed")->envname(Env::seed);
  simulate->add_option("--out", sim.out, "Output directory")->envname(Env::out);
  simulate->add_option("--config", config_path, "JSON run configuration (dgp section)")
      ->envname(Env::config)
      ->check(CLI::ExistingFile);

  cl::TrainOptions tr;
  cl::TrainingOptions tr_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a simulated or supplied study");
  train_cmd->add_option("--data", tr.data, "Manifest file or its directory")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->envname(Env::out);
  train_cmd->add_option("--seed", tr.seed, "Random seed")->envname(Env::seed);
  add_training_flags(train_cmd, tr_flags, config_path, max_epochs, patience);

  cl::EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Per-task RMSE of a saved model");
  eval_cmd->add_option("--model", ev.model, "Model file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Manifest file or its directory")->required();
  eval_cmd->add_option("--splits", ev.splits, "Splits to evaluate")->delimiter(',');
  eval_cmd->add_option("--out", ev.out, "Output directory")->envname(Env::out);

  cl::HpsearchOptions hs;
  cl::TrainingOptions hs_flags;
  int trials = 0;
  auto* hpsearch = app.add_subcommand("hpsearch", "Random or grid hyperparameter search");
  hpsearch->add_option("--data", hs.data, "Manifest file or its directory")->required();
  hpsearch->add_option("--out", hs.out, "Output directory")->envname(Env::out);
  hpsearch->add_option("--trials", trials, "Number of sampled settings")
      ->check(CLI::PositiveNumber);
  hpsearch->add_option("--method", hs.method, "mtl or stl");
  hpsearch->add_flag("--grid", hs.grid, "Enumerate the whole search space instead of sampling");
  hpsearch->add_option("--seed", hs.seed, "Random seed")->envname(Env::seed);
  hpsearch->add_option("--jobs", hs.jobs, "Worker threads")
      ->envname(Env::jobs)
      ->check(CLI::PositiveNumber);
  add_training_flags(hpsearch, hs_flags, config_path, max_epochs, patience);

  cl::SweepOptions sw;
  cl::TrainingOptions sw_flags;
  int search_trials = 0;
  auto* sweep = app.add_subcommand("sweep", "Replicate MTL and STL over many seeds");
  sweep->add_option("--setting", setting, "Setting id: 1-6, 4tasks, 5tasks, linear");
  sweep->add_option("--dc", dc, "Number of shared latent directions d_c");
  sweep->add_option("--sigma-bar", sigma_bar, "Task-specific coefficient SD for every task");
  sweep->add_option("--n", samples, "Samples per split, one value or one per task");
  sweep->add_option("--seeds", count, "Number of replications")->check(CLI::PositiveNumber);
  sweep->add_option("--seed", sw.seed, "First replication seed")->envname(Env::seed);
  sweep->add_option("--search-trials", search_trials,
                    "Tune each method per seed with this many trials (0 = fixed setting)")
      ->check(CLI::NonNegativeNumber);
  sweep->add_option("--jobs", sw.jobs, "Worker threads")
      ->envname(Env::jobs)
      ->check(CLI::PositiveNumber);
  sweep->add_flag("--allow-partial", sw.allow_partial, "Exit 0 even if some seeds failed");
  sweep->add_option("--out", sw.out, "Output directory")->envname(Env::out);
  add_training_flags(sweep, sw_flags, config_path, max_epochs, patience);

  cl::ExportOptions ex;
  auto* export_cmd = app.add_subcommand("export-latents", "Write encoder outputs as CSV");
  export_cmd->add_option("--model", ex.model, "Model file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--data", ex.data, "Manifest file or its directory")->required();
  export_cmd->add_option("--splits", ex.splits, "Splits to export")->delimiter(',');
  export_cmd->add_option("--out", ex.out, "Output directory")->envname(Env::out);

  CLI11_PARSE(app, argc, argv);

  auto dgp_flags = [&](CLI::App* cmd, std::optional<std::string>& s, std::optional<Index>& d,
                       std::optional<double>& sb, std::optional<std::vector<Index>>& n) {
    if (cmd->count("--setting")) s = setting;
    if (cmd->count("--dc")) d = dc;
    if (cmd->count("--sigma-bar")) sb = sigma_bar;
    if (cmd->count("--n")) n = samples;
  };

  try {
    if (*simulate) {
      dgp_flags(simulate, sim.setting, sim.shared_dim, sim.sigma_bar, sim.samples);
      if (simulate->count("--config")) sim.config = config_path;
      return cl::cmd_simulate(sim, std::cerr);
    }
    if (*train_cmd) {
      finish_training_flags(train_cmd, tr_flags, config_path, max_epochs, patience);
      tr.training = tr_flags;
      return cl::cmd_train(tr, std::cerr);
    }
    if (*eval_cmd) return cl::cmd_eval(ev, std::cerr);
    if (*hpsearch) {
      finish_training_flags(hpsearch, hs_flags, config_path, max_epochs, patience);
      if (hpsearch->count("--trials")) hs.trials = trials;
      hs.training = hs_flags;
      return cl::cmd_hpsearch(hs, std::cerr);
    }
    if (*sweep) {
      dgp_flags(sweep, sw.setting, sw.shared_dim, sw.sigma_bar, sw.samples);
      finish_training_flags(sweep, sw_flags, config_path, max_epochs, patience);
      if (sweep->count("--seeds")) sw.seeds = count;
      if (sweep->count("--search-trials")) sw.search_trials = search_trials;
      sw.training = sw_flags;
      return cl::cmd_sweep(sw, std::cerr);
    }
    if (*export_cmd) return cl::cmd_export_latents(ex, std::cerr);
  } catch (const hetmtl::ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cl::kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cl::kFailure;
  }
  return cl::kUsage;
}
