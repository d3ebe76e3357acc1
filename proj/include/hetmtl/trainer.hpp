#pragma once

// Three-block alternating optimisation of the penalised objective.
//
// Every mini-batch runs, in order:
//   1. one Adam step on all encoder parameters (fit + orthogonality terms),
//      heads and centers held fixed;
//   2. the beta block: v_r = beta_r - beta_bar takes a proximal-gradient step
//      with threshold rate * lambda_c[r], then beta_bar is re-solved by
//      weighted least squares on the shared latents;
//   3. the alpha block, the same update with (alpha, alpha_bar, lambda_s, S_r).
// Validation MSE is measured after every epoch and the best epoch's parameters
// are returned.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetmtl/data.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/model.hpp"
#include "hetmtl/nncore.hpp"
#include "hetmtl/rng.hpp"

namespace hetmtl {

/// Proximal operator of t * ||.||_2 (block soft-thresholding).
inline Vector prox_group(const Eigen::Ref<const Vector>& v, double t) {
  if (!(t >= 0.0)) throw ArgumentError("prox_group: threshold must be >= 0");
  if (t == 0.0) return v;
  const double norm = v.norm();
  if (norm <= t) return Vector::Zero(v.size());
  return (1.0 - t / norm) * v;
}

/// Coefficient block in deviation form: head_r = deviations[r] + center.
struct DeviationState {
  std::vector<Vector> deviations;
  Vector center;

  Vector head(std::size_t r) const { return deviations[r] + center; }
};

struct TrainConfig {
  int epochs = 2000;
  /// One entry per task, or a single entry applied to every task.
  std::vector<Index> batch_sizes{32};
  nn::LrSchedule schedule{};
  PenaltyWeights weights{};
  int patience = 200;
  int inner_steps = 1;
  std::uint64_t seed = 0;
  /// Use the beta values from before this mini-batch's beta update in the
  /// alpha block (Jacobi-style) instead of the freshly updated ones.
  bool stale_beta_in_alpha_step = false;
  /// Multiplier on the Adam rate; 0 freezes the encoders.
  double encoder_rate_scale = 1.0;

  Index batch_size(int r) const {
    return batch_sizes.size() == 1 ? batch_sizes.front()
                                   : batch_sizes[static_cast<std::size_t>(r)];
  }

  void validate(int tasks) const {
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be >= 1");
    if (patience < 0) throw ArgumentError("TrainConfig: patience must be >= 0");
    if (inner_steps < 1) throw ArgumentError("TrainConfig: inner_steps must be >= 1");
    if (batch_sizes.size() != 1 && static_cast<int>(batch_sizes.size()) != tasks) {
      throw ArgumentError("TrainConfig: need one batch size or one per task");
    }
    for (Index b : batch_sizes) {
      if (b < 1) throw ArgumentError("TrainConfig: batch sizes must be >= 1");
    }
    if (!(encoder_rate_scale >= 0.0) || !std::isfinite(encoder_rate_scale)) {
      throw ArgumentError("TrainConfig: encoder_rate_scale must be finite and >= 0");
    }
    schedule.validate();
    weights.validate(tasks);
  }
};

struct TrainReport {
  std::vector<ObjectiveBreakdown> train_objective;  // mean over the epoch's mini-batches
  std::vector<double> val_mse;
  std::vector<double> learning_rate;
  int best_epoch = -1;
  int epochs_run = 0;
  double best_val_mse = std::numeric_limits<double>::infinity();
  // Evaluated on the returned (best-epoch) model.
  std::vector<double> alpha_deviation;        // ||alpha_r - alpha_bar||
  std::vector<double> beta_deviation;         // ||beta_r - beta_bar||
  std::vector<double> orthogonality_full;     // ||S_r' C_r||_F over all training rows
  double max_abs_specific_param = 0.0;
  double max_abs_shared_param = 0.0;
  int singular_center_solves = 0;
  double wall_seconds = 0.0;  // excluded from determinism comparisons
};

struct TrainResult {
  MtlModel model;
  TrainReport report;
};

/// Adam state for every encoder of a model.
struct EncoderOptimizer {
  std::optional<nn::AdamState> shared;
  std::vector<nn::AdamState> specifics;

  static EncoderOptimizer for_model(const MtlModel& m) {
    EncoderOptimizer o;
    for (const auto& s : m.specifics) o.specifics.push_back(nn::AdamState::for_net(s));
    if (m.shared) o.shared = nn::AdamState::for_net(*m.shared);
    return o;
  }
};

/// Where a step runs, for error messages.
struct StepContext {
  int epoch = -1;
  int batch = -1;
};

namespace detail {

inline void check_batches(const MtlModel& model, std::span<const Batch> batches) {
  if (static_cast<int>(batches.size()) != model.tasks()) {
    throw ShapeError("need exactly one mini-batch per task");
  }
  for (const auto& b : batches) {
    if (b.x.rows() != b.y.size()) throw ShapeError("mini-batch X/y length mismatch");
    if (b.x.rows() == 0) throw ArgumentError("mini-batch is empty");
  }
}

inline std::string where(StepContext ctx) {
  return "epoch " + std::to_string(ctx.epoch) + ", batch " + std::to_string(ctx.batch);
}

/// Weighted least squares for a shared center:
///   min_c sum_r w_r ||targets_r - Z_r c||^2.
/// Falls back to a 1e-10 ridge when the normal equations are singular.
inline Vector solve_center(std::span<const Matrix* const> features,
                           std::span<const Vector> targets, std::span<const double> w,
                           bool& singular) {
  const Index k = features.front()->cols();
  Matrix gram = Matrix::Zero(k, k);
  Vector rhs = Vector::Zero(k);
  for (std::size_t r = 0; r < features.size(); ++r) {
    const Matrix& z = *features[r];
    gram.noalias() += w[r] * (z.transpose() * z);
    rhs.noalias() += w[r] * (z.transpose() * targets[r]);
  }
  singular = false;
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-12) return llt.solve(rhs);
  singular = true;
  gram.diagonal().array() += 1e-10;
  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() == Eigen::Success) {
    Vector sol = ldlt.solve(rhs);
    if (sol.allFinite()) return sol;
  }
  return gram.completeOrthogonalDecomposition().solve(rhs);
}

/// One coefficient block (alpha or beta) update across all tasks.
/// offsets[r] = y_r minus the other block's contribution.
/// Returns the number of singular center solves.
inline int update_coefficient_block(std::span<Vector* const> heads, Vector& center,
                                    std::span<const Matrix* const> features,
                                    std::span<const Vector> offsets,
                                    const Eigen::Ref<const Vector>& lambdas, double rate,
                                    int inner_steps) {
  const std::size_t R = heads.size();
  if (center.size() == 0) return 0;
  DeviationState state;
  state.center = center;
  for (std::size_t r = 0; r < R; ++r) state.deviations.push_back(*heads[r] - center);

  std::vector<double> w(R);
  for (std::size_t r = 0; r < R; ++r) {
    w[r] = 1.0 / (static_cast<double>(R) * static_cast<double>(features[r]->rows()));
  }

  int singular_count = 0;
  std::vector<Vector> targets(R);
  for (int step = 0; step < inner_steps; ++step) {
    for (std::size_t r = 0; r < R; ++r) {
      const Matrix& z = *features[r];
      const Vector resid = offsets[r] - z * (state.deviations[r] + state.center);
      const Vector grad = (-2.0 * w[r]) * (z.transpose() * resid);
      state.deviations[r] = prox_group(state.deviations[r] - rate * grad,
                                       rate * lambdas(static_cast<Index>(r)));
    }
    for (std::size_t r = 0; r < R; ++r) {
      targets[r] = offsets[r] - *features[r] * state.deviations[r];
    }
    bool singular = false;
    state.center = solve_center(features, targets, w, singular);
    singular_count += singular ? 1 : 0;
  }
  center = state.center;
  for (std::size_t r = 0; r < R; ++r) *heads[r] = state.head(r);
  return singular_count;
}

inline Matrix stack_rows(std::span<const Batch> batches) {
  Index rows = 0;
  for (const auto& b : batches) rows += b.x.rows();
  Matrix out(rows, batches.front().x.cols());
  Index at = 0;
  for (const auto& b : batches) {
    out.middleRows(at, b.x.rows()) = b.x;
    at += b.x.rows();
  }
  return out;
}

}  // namespace detail

/// Step 1: one Adam step on the encoders. Returns the batch objective
/// evaluated before the update.
inline ObjectiveBreakdown step1_encoders(MtlModel& model, std::span<const Batch> batches,
                                         const PenaltyWeights& weights, double rate,
                                         EncoderOptimizer& opt, StepContext ctx = {}) {
  detail::check_batches(model, batches);
  weights.validate(model.tasks());
  const int R = model.tasks();
  const double inv_r = 1.0 / static_cast<double>(R);

  std::vector<nn::ForwardCache> spec_cache;
  spec_cache.reserve(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    spec_cache.push_back(nn::forward_cached(model.specifics[static_cast<std::size_t>(r)],
                                            batches[static_cast<std::size_t>(r)].x));
  }
  std::optional<nn::ForwardCache> shared_cache;
  if (model.shared) shared_cache = nn::forward_cached(*model.shared, detail::stack_rows(batches));

  ObjectiveBreakdown bd;
  std::vector<Matrix> spec_up(static_cast<std::size_t>(R));
  Matrix shared_up = shared_cache ? Matrix(shared_cache->output.rows(), shared_cache->output.cols())
                                  : Matrix();
  Index offset = 0;
  for (int r = 0; r < R; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    const Batch& b = batches[ur];
    const Index n = b.x.rows();
    const TaskHead& head = model.heads[ur];
    const Matrix& s = spec_cache[ur].output;
    const Matrix c = shared_cache ? Matrix(shared_cache->output.middleRows(offset, n)) : Matrix(n, 0);

    const Vector resid = b.y - s * head.alpha - c * head.beta;
    bd.mse += mean_squared(resid);
    const double fit_scale = -2.0 * inv_r / static_cast<double>(n);
    spec_up[ur] = fit_scale * resid * head.alpha.transpose();
    if (c.cols() > 0) {
      const Matrix cross = s.transpose() * c;  // q x p
      bd.orthogonality += weights.lambda_o * cross.squaredNorm();
      Matrix cu = fit_scale * resid * head.beta.transpose();
      if (weights.lambda_o > 0.0) {
        spec_up[ur].noalias() += (2.0 * weights.lambda_o) * (c * cross.transpose());
        cu.noalias() += (2.0 * weights.lambda_o) * (s * cross);
      }
      shared_up.middleRows(offset, n) = cu;
    }
    offset += n;
  }
  bd.mse *= inv_r;
  bd.similarity = similarity_penalty(model.heads, model.centers, weights);
  bd.total = bd.mse + bd.similarity + bd.orthogonality;
  if (!std::isfinite(bd.total)) {
    throw DivergenceError(ctx.epoch, ctx.batch,
                          "training objective is non-finite at " + detail::where(ctx));
  }
  if (rate == 0.0) return bd;

  for (int r = 0; r < R; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    const auto g = nn::backward(model.specifics[ur], spec_cache[ur], spec_up[ur]);
    nn::adam_step(model.specifics[ur], g, opt.specifics[ur], rate,
                  "specific[" + std::to_string(r) + "]");
  }
  if (model.shared) {
    const auto g = nn::backward(*model.shared, *shared_cache, shared_up);
    nn::adam_step(*model.shared, g, *opt.shared, rate, "shared");
  }
  return bd;
}

/// Step 2 on precomputed latents: proximal update of beta deviations and a
/// least-squares re-solve of beta_bar. Returns the singular-solve count.
inline int update_beta_block(MtlModel& model, std::span<const LatentBatch> lat,
                             std::span<const Batch> batches, const PenaltyWeights& weights,
                             double rate, int inner_steps) {
  const int R = model.tasks();
  std::vector<Vector*> heads;
  std::vector<const Matrix*> feats;
  std::vector<Vector> offsets;
  for (int r = 0; r < R; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    heads.push_back(&model.heads[ur].beta);
    feats.push_back(&lat[ur].shared);
    offsets.push_back(batches[ur].y - lat[ur].specific * model.heads[ur].alpha);
  }
  return detail::update_coefficient_block(heads, model.centers.beta_bar, feats, offsets,
                                          weights.lambda_c, rate, inner_steps);
}

/// Step 3 on precomputed latents. `betas` are the beta values to hold fixed.
inline int update_alpha_block(MtlModel& model, std::span<const LatentBatch> lat,
                              std::span<const Batch> batches, std::span<const Vector> betas,
                              const PenaltyWeights& weights, double rate, int inner_steps) {
  const int R = model.tasks();
  std::vector<Vector*> heads;
  std::vector<const Matrix*> feats;
  std::vector<Vector> offsets;
  for (int r = 0; r < R; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    heads.push_back(&model.heads[ur].alpha);
    feats.push_back(&lat[ur].specific);
    offsets.push_back(batches[ur].y - lat[ur].shared * betas[ur]);
  }
  return detail::update_coefficient_block(heads, model.centers.alpha_bar, feats, offsets,
                                          weights.lambda_s, rate, inner_steps);
}

inline std::vector<LatentBatch> batch_latents(const MtlModel& model,
                                              std::span<const Batch> batches) {
  std::vector<LatentBatch> lat;
  lat.reserve(batches.size());
  for (int r = 0; r < model.tasks(); ++r) {
    lat.push_back(latents(model, r, batches[static_cast<std::size_t>(r)].x));
  }
  return lat;
}

inline int step2_beta(MtlModel& model, std::span<const Batch> batches,
                      const PenaltyWeights& weights, double rate, int inner_steps = 1) {
  detail::check_batches(model, batches);
  weights.validate(model.tasks());
  if (inner_steps < 1) throw ArgumentError("step2_beta: inner_steps must be >= 1");
  const auto lat = batch_latents(model, batches);
  return update_beta_block(model, lat, batches, weights, rate, inner_steps);
}

inline int step3_alpha(MtlModel& model, std::span<const Batch> batches,
                       const PenaltyWeights& weights, double rate, int inner_steps = 1) {
  detail::check_batches(model, batches);
  weights.validate(model.tasks());
  if (inner_steps < 1) throw ArgumentError("step3_alpha: inner_steps must be >= 1");
  const auto lat = batch_latents(model, batches);
  std::vector<Vector> betas;
  for (const auto& h : model.heads) betas.push_back(h.beta);
  return update_alpha_block(model, lat, batches, betas, weights, rate, inner_steps);
}

/// Average unpenalised MSE across tasks on one split.
inline double mean_task_mse(const MtlModel& model, std::span<const TaskSplits> data, Split split) {
  double total = 0.0;
  for (int r = 0; r < model.tasks(); ++r) {
    const auto& ds = data[static_cast<std::size_t>(r)].get(split);
    total += mse_term(model, r, ds.x, ds.y);
  }
  return total / static_cast<double>(model.tasks());
}

namespace detail {

/// Reshuffled cursor over one task's training rows.
class TaskBatcher {
 public:
  TaskBatcher(Index rows, Index batch, Rng rng) : order_(static_cast<std::size_t>(rows)),
                                                  batch_(batch), rng_(std::move(rng)) {
    for (Index i = 0; i < rows; ++i) order_[static_cast<std::size_t>(i)] = i;
  }

  void reshuffle() {
    rng_.shuffle(order_);
    cursor_ = 0;
  }

  std::vector<Index> next() {
    if (cursor_ >= order_.size()) reshuffle();
    const std::size_t take = std::min(static_cast<std::size_t>(batch_), order_.size() - cursor_);
    std::vector<Index> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                           order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return idx;
  }

  Index batches_per_pass() const {
    const auto n = static_cast<Index>(order_.size());
    return (n + batch_ - 1) / batch_;
  }

 private:
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  Index batch_;
  Rng rng_;
};

}  // namespace detail

inline void fill_final_diagnostics(const MtlModel& model, std::span<const TaskSplits> data,
                                   TrainReport& report) {
  report.alpha_deviation.clear();
  report.beta_deviation.clear();
  report.orthogonality_full.clear();
  for (int r = 0; r < model.tasks(); ++r) {
    const auto ur = static_cast<std::size_t>(r);
    report.alpha_deviation.push_back((model.heads[ur].alpha - model.centers.alpha_bar).norm());
    report.beta_deviation.push_back((model.heads[ur].beta - model.centers.beta_bar).norm());
    const auto lb = latents(model, r, data[ur].train.x);
    report.orthogonality_full.push_back((lb.specific.transpose() * lb.shared).norm());
  }
  report.max_abs_specific_param = 0.0;
  for (const auto& s : model.specifics) {
    report.max_abs_specific_param = std::max(report.max_abs_specific_param, s.max_abs_parameter());
  }
  report.max_abs_shared_param = model.shared ? model.shared->max_abs_parameter() : 0.0;
}

/// Full training loop with early stopping on validation MSE.
inline TrainResult train(MtlModel model, std::span<const TaskSplits> data,
                         const TrainConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  model.validate();
  const int R = model.tasks();
  if (static_cast<int>(data.size()) != R) {
    throw ArgumentError("train: model has " + std::to_string(R) + " tasks but " +
                        std::to_string(data.size()) + " datasets were given");
  }
  config.validate(R);
  for (const auto& ts : data) {
    for (Split s : {Split::train, Split::val}) {
      const auto& ds = ts.get(s);
      ds.validate();
      if (ds.rows() == 0) {
        throw ArgumentError("train: task " + std::to_string(ds.task) + " has an empty " +
                            std::string(to_string(s)) + " split");
      }
      if (ds.dim() != model.input_dim()) {
        throw ShapeError("train: task " + std::to_string(ds.task) + " has " +
                         std::to_string(ds.dim()) + " features, model expects " +
                         std::to_string(model.input_dim()));
      }
    }
  }

  std::vector<detail::TaskBatcher> batchers;
  Index batches_per_epoch = 0;
  for (int r = 0; r < R; ++r) {
    batchers.emplace_back(data[static_cast<std::size_t>(r)].train.rows(), config.batch_size(r),
                          Rng::stream(config.seed, "train/shuffle", static_cast<std::uint64_t>(r)));
    batches_per_epoch = std::max(batches_per_epoch, batchers.back().batches_per_pass());
  }

  EncoderOptimizer opt = EncoderOptimizer::for_model(model);
  TrainReport report;
  MtlModel best = model;
  std::vector<Batch> batches(static_cast<std::size_t>(R));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double rate = nn::lr_at(config.schedule, epoch);
    for (auto& b : batchers) b.reshuffle();
    ObjectiveBreakdown sum;
    for (Index bi = 0; bi < batches_per_epoch; ++bi) {
      const StepContext ctx{epoch, static_cast<int>(bi)};
      for (int r = 0; r < R; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        const auto idx = batchers[ur].next();
        batches[ur].x = data[ur].train.x(idx, Eigen::all);
        batches[ur].y = data[ur].train.y(idx);
      }
      const auto bd = step1_encoders(model, batches, config.weights,
                                     rate * config.encoder_rate_scale, opt, ctx);
      sum.mse += bd.mse;
      sum.similarity += bd.similarity;
      sum.orthogonality += bd.orthogonality;
      sum.total += bd.total;
      if (rate == 0.0) continue;

      const auto lat = batch_latents(model, batches);
      std::vector<Vector> beta_before;
      if (config.stale_beta_in_alpha_step) {
        for (const auto& h : model.heads) beta_before.push_back(h.beta);
      }
      report.singular_center_solves +=
          update_beta_block(model, lat, batches, config.weights, rate, config.inner_steps);
      std::vector<Vector> beta_fixed;
      if (config.stale_beta_in_alpha_step) {
        beta_fixed = std::move(beta_before);
      } else {
        for (const auto& h : model.heads) beta_fixed.push_back(h.beta);
      }
      report.singular_center_solves += update_alpha_block(model, lat, batches, beta_fixed,
                                                          config.weights, rate, config.inner_steps);
    }
    const double nb = static_cast<double>(batches_per_epoch);
    report.train_objective.push_back(
        {sum.mse / nb, sum.similarity / nb, sum.orthogonality / nb, sum.total / nb});
    report.learning_rate.push_back(rate);

    const double val = mean_task_mse(model, data, Split::val);
    if (!std::isfinite(val)) {
      throw DivergenceError(epoch, -1,
                            "validation loss is non-finite at epoch " + std::to_string(epoch));
    }
    report.val_mse.push_back(val);
    report.epochs_run = epoch + 1;
    if (val < report.best_val_mse) {
      report.best_val_mse = val;
      report.best_epoch = epoch;
      best = model;
    } else if (epoch - report.best_epoch >= config.patience) {
      break;
    }
  }

  fill_final_diagnostics(best, data, report);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(best), std::move(report)};
}

}  // namespace hetmtl
