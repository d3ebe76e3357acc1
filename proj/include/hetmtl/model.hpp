#pragma once

// Dual-encoder prediction function and the terms of the penalised training
// objective:
//
//   yhat_r(x) = alpha_r' S_r(x) + beta_r' C(x)
//
//   L = (1/R) sum_r mse_r
//       + sum_r (lambda_s[r] |alpha_r - alpha_bar| + lambda_c[r] |beta_r - beta_bar|)
//       + lambda_o sum_r |S_r' C_r|_F^2
//
// Norms on the coefficient deviations are unsquared Euclidean norms.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetmtl/errors.hpp"
#include "hetmtl/nncore.hpp"
#include "hetmtl/rng.hpp"

namespace hetmtl {

struct TaskHead {
  Vector alpha;  // q
  Vector beta;   // p

  friend bool operator==(const TaskHead& a, const TaskHead& b) {
    return nn::identical(a.alpha, b.alpha) && nn::identical(a.beta, b.beta);
  }
};

struct Centers {
  Vector alpha_bar;
  Vector beta_bar;

  friend bool operator==(const Centers& a, const Centers& b) {
    return nn::identical(a.alpha_bar, b.alpha_bar) && nn::identical(a.beta_bar, b.beta_bar);
  }
};

/// Encoder layout shared by all tasks. use_shared == false drops the C path,
/// which is how the single-task baseline is expressed.
struct Architecture {
  int depth_s = 3;
  Index width_s = 32;
  Index q = 8;
  int depth_c = 3;
  Index width_c = 32;
  Index p = 8;
  bool use_shared = true;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct MtlModel {
  std::optional<nn::DenseNet> shared;
  std::vector<nn::DenseNet> specifics;
  std::vector<TaskHead> heads;
  Centers centers;

  int tasks() const { return static_cast<int>(specifics.size()); }
  Index q() const { return specifics.empty() ? 0 : specifics.front().out_dim(); }
  Index p() const { return shared ? shared->out_dim() : 0; }
  Index input_dim() const { return specifics.empty() ? 0 : specifics.front().in_dim(); }

  void check_task(int r) const {
    if (r < 0 || r >= tasks()) {
      throw IndexError("task index " + std::to_string(r) + " outside [0, " +
                       std::to_string(tasks()) + ")");
    }
  }

  void validate() const {
    const auto R = specifics.size();
    if (R == 0) throw ShapeError("MtlModel: at least one task is required");
    if (heads.size() != R) throw ShapeError("MtlModel: heads and encoders disagree on R");
    for (const auto& s : specifics) {
      s.validate();
      if (s.in_dim() != input_dim() || s.out_dim() != q() || s.depth() != specifics[0].depth() ||
          s.width() != specifics[0].width()) {
        throw ShapeError("MtlModel: task-specific encoders must share one architecture");
      }
    }
    if (shared) {
      shared->validate();
      if (shared->in_dim() != input_dim()) throw ShapeError("MtlModel: shared encoder input dim");
    }
    for (const auto& h : heads) {
      if (h.alpha.size() != q() || h.beta.size() != p()) {
        throw ShapeError("MtlModel: head lengths must match encoder output dims");
      }
      if (!h.alpha.allFinite() || !h.beta.allFinite()) throw InputError("MtlModel: non-finite head");
    }
    if (centers.alpha_bar.size() != q() || centers.beta_bar.size() != p()) {
      throw ShapeError("MtlModel: center lengths must match encoder output dims");
    }
    if (!centers.alpha_bar.allFinite() || !centers.beta_bar.allFinite()) {
      throw InputError("MtlModel: non-finite center");
    }
  }

  friend bool operator==(const MtlModel&, const MtlModel&) = default;
};

/// Fresh model: He-initialised encoders, heads and centers at zero.
inline MtlModel make_model(const Architecture& arch, int tasks, Index input_dim,
                           std::uint64_t seed) {
  if (tasks < 1) throw ArgumentError("make_model: need at least one task");
  MtlModel m;
  for (int r = 0; r < tasks; ++r) {
    Rng rng = Rng::stream(seed, "init/specific", static_cast<std::uint64_t>(r));
    m.specifics.push_back(nn::DenseNet::mlp(input_dim, arch.depth_s, arch.width_s, arch.q, rng));
  }
  if (arch.use_shared) {
    Rng rng = Rng::stream(seed, "init/shared");
    m.shared = nn::DenseNet::mlp(input_dim, arch.depth_c, arch.width_c, arch.p, rng);
  }
  const Index p = arch.use_shared ? arch.p : 0;
  m.heads.assign(static_cast<std::size_t>(tasks), TaskHead{Vector::Zero(arch.q), Vector::Zero(p)});
  m.centers = Centers{Vector::Zero(arch.q), Vector::Zero(p)};
  return m;
}

struct PenaltyWeights {
  Vector lambda_s;  // per task
  Vector lambda_c;  // per task
  double lambda_o = 0.0;

  static PenaltyWeights uniform(int tasks, double ls, double lc, double lo) {
    return {Vector::Constant(tasks, ls), Vector::Constant(tasks, lc), lo};
  }

  void validate(int tasks) const {
    if (lambda_s.size() != tasks || lambda_c.size() != tasks) {
      throw ShapeError("PenaltyWeights: need one lambda_s and lambda_c per task");
    }
    const bool ok = lambda_s.allFinite() && lambda_c.allFinite() && std::isfinite(lambda_o) &&
                    (lambda_s.array() >= 0.0).all() && (lambda_c.array() >= 0.0).all() &&
                    lambda_o >= 0.0;
    if (!ok) throw ArgumentError("PenaltyWeights: penalties must be finite and non-negative");
  }
};

/// Latent factors of one task's batch: S_r(X) rows and C(X) rows.
struct LatentBatch {
  Matrix specific;  // n x q
  Matrix shared;    // n x p
};

struct Batch {
  Matrix x;
  Vector y;
};

inline LatentBatch latents(const MtlModel& model, int r, const Eigen::Ref<const Matrix>& x) {
  model.check_task(r);
  LatentBatch lb;
  lb.specific = nn::forward(model.specifics[static_cast<std::size_t>(r)], x);
  lb.shared = model.shared ? nn::forward(*model.shared, x) : Matrix(x.rows(), 0);
  return lb;
}

inline Vector predict_from_latents(const TaskHead& head, const LatentBatch& lb) {
  if (lb.specific.cols() != head.alpha.size() || lb.shared.cols() != head.beta.size() ||
      lb.specific.rows() != lb.shared.rows()) {
    throw ShapeError("predict_from_latents: latent/head dimension mismatch");
  }
  return lb.specific * head.alpha + lb.shared * head.beta;
}

inline Vector predict(const MtlModel& model, int r, const Eigen::Ref<const Matrix>& x) {
  model.check_task(r);
  return predict_from_latents(model.heads[static_cast<std::size_t>(r)], latents(model, r, x));
}

inline double mean_squared(const Eigen::Ref<const Vector>& residual) {
  return residual.size() == 0 ? 0.0 : residual.squaredNorm() / static_cast<double>(residual.size());
}

inline double mse_term(const MtlModel& model, int r, const Eigen::Ref<const Matrix>& x,
                       const Eigen::Ref<const Vector>& y) {
  if (y.size() != x.rows()) {
    throw ShapeError("mse_term: y has " + std::to_string(y.size()) + " entries, X has " +
                     std::to_string(x.rows()) + " rows");
  }
  return mean_squared(y - predict(model, r, x));
}

inline double similarity_penalty(std::span<const TaskHead> heads, const Centers& centers,
                                 const PenaltyWeights& weights) {
  weights.validate(static_cast<int>(heads.size()));
  double total = 0.0;
  for (std::size_t r = 0; r < heads.size(); ++r) {
    if (heads[r].alpha.size() != centers.alpha_bar.size() ||
        heads[r].beta.size() != centers.beta_bar.size()) {
      throw ShapeError("similarity_penalty: head/center length mismatch");
    }
    const auto i = static_cast<Index>(r);
    total += weights.lambda_s(i) * (heads[r].alpha - centers.alpha_bar).norm() +
             weights.lambda_c(i) * (heads[r].beta - centers.beta_bar).norm();
  }
  return total;
}

inline double orthogonality_penalty(std::span<const LatentBatch> latents, double lambda_o) {
  double total = 0.0;
  for (const auto& lb : latents) {
    if (lb.specific.rows() != lb.shared.rows()) {
      throw ShapeError("orthogonality_penalty: latent row counts differ");
    }
    total += (lb.specific.transpose() * lb.shared).squaredNorm();
  }
  return lambda_o * total;
}

struct ObjectiveBreakdown {
  double mse = 0.0;  // (1/R) sum_r mse_r
  double similarity = 0.0;
  double orthogonality = 0.0;
  double total = 0.0;
};

inline ObjectiveBreakdown objective(const MtlModel& model, std::span<const Batch> batches,
                                    const PenaltyWeights& weights) {
  if (static_cast<int>(batches.size()) != model.tasks()) {
    throw ShapeError("objective: need exactly one batch per task");
  }
  weights.validate(model.tasks());
  ObjectiveBreakdown out;
  std::vector<LatentBatch> lat;
  lat.reserve(batches.size());
  for (int r = 0; r < model.tasks(); ++r) {
    const auto& b = batches[static_cast<std::size_t>(r)];
    if (b.y.size() != b.x.rows()) throw ShapeError("objective: batch y/X length mismatch");
    lat.push_back(latents(model, r, b.x));
    out.mse += mean_squared(b.y - predict_from_latents(model.heads[static_cast<std::size_t>(r)],
                                                       lat.back()));
  }
  out.mse /= static_cast<double>(model.tasks());
  out.similarity = similarity_penalty(model.heads, model.centers, weights);
  out.orthogonality = orthogonality_penalty(lat, weights.lambda_o);
  out.total = out.mse + out.similarity + out.orthogonality;
  return out;
}

}  // namespace hetmtl
