#pragma once

// Synthetic latent-factor studies.
//
//   F       : N x d, iid N(0, 1), N = max_r 3 n_r; task r uses its first 3 n_r rows
//   V_r     : d x d; first d_c columns come from one shared SVD draw, the rest
//             from a per-task SVD draw
//   F_r     = F V_r
//   B       : d x d orthogonal (QR of a Gaussian matrix), common to all tasks
//   X_r     = F_r B + E_r,            E_r iid N(0, sigma_e^2)
//   y_r     = (F_r .* F_r)(g_c + g_r) / d + eps_r    (nonlinear)
//   y_r     = F_r (g_c + g_r) / d + eps_r            (linear variant)
//   g_c ~ N(0, sigma_c^2), g_r ~ N(0, sigma_r^2), eps_r ~ N(0, sigma_e^2)
//
// Rows are split in order into train / val / test, n_r rows each.
//
// Random streams (see rng.hpp) are tagged "dgp/F", "dgp/V-shared",
// "dgp/V-task"[r], "dgp/B", "dgp/E"[r], "dgp/gamma-c", "dgp/gamma-task"[r] and
// "dgp/eps"[r]; matrices are filled column by column.

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hetmtl/data.hpp"
#include "hetmtl/errors.hpp"
#include "hetmtl/nncore.hpp"
#include "hetmtl/rng.hpp"

namespace hetmtl {

struct DgpConfig {
  int tasks = 2;
  std::vector<Index> samples{200};  // n_r, one entry or one per task
  Index dim = 20;                   // d
  Index shared_dim = 10;            // d_c
  double sigma_e = 0.05;
  double sigma_c = 10.0;
  std::vector<double> sigma_task{1.0};  // sigma_r, one entry or one per task
  bool linear = false;
  std::uint64_t seed = 0;

  Index n(int r) const {
    return samples.size() == 1 ? samples.front() : samples[static_cast<std::size_t>(r)];
  }
  double sigma_r(int r) const {
    return sigma_task.size() == 1 ? sigma_task.front() : sigma_task[static_cast<std::size_t>(r)];
  }

  void validate() const {
    if (tasks < 1) throw ArgumentError("DgpConfig: tasks must be >= 1");
    if (dim < 1) throw ArgumentError("DgpConfig: d must be >= 1");
    if (shared_dim < 0 || shared_dim > dim) {
      throw ArgumentError("DgpConfig: d_c = " + std::to_string(shared_dim) +
                          " must lie in [0, d = " + std::to_string(dim) + "]");
    }
    if (samples.size() != 1 && static_cast<int>(samples.size()) != tasks) {
      throw ArgumentError("DgpConfig: need one sample size or one per task");
    }
    if (sigma_task.size() != 1 && static_cast<int>(sigma_task.size()) != tasks) {
      throw ArgumentError("DgpConfig: need one sigma_r or one per task");
    }
    for (Index n : samples) {
      if (n < 1) throw ArgumentError("DgpConfig: sample sizes must be >= 1");
    }
    const auto bad = [](double s) { return !(s >= 0.0) || !std::isfinite(s); };
    if (bad(sigma_e) || bad(sigma_c) || std::any_of(sigma_task.begin(), sigma_task.end(), bad)) {
      throw ArgumentError("DgpConfig: standard deviations must be finite and >= 0");
    }
  }

  friend bool operator==(const DgpConfig&, const DgpConfig&) = default;
};

/// Realised latent structure of one task, kept for diagnostics.
struct TaskFactors {
  Matrix v;       // d x d
  Matrix f;       // 3n x d, F_r
  Matrix noise_x; // 3n x d, E_r
  Vector gamma_task;
  Vector noise_y; // 3n, eps_r
};

struct GeneratedStudy {
  DgpConfig config;
  std::vector<TaskSplits> tasks;
  Matrix f;        // shared F, N x d
  Matrix b;        // common orthogonal B
  Vector gamma_c;
  std::vector<TaskFactors> factors;
};

namespace detail {

inline Matrix gaussian(Rng& rng, Index rows, Index cols, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = sd * rng.normal();
  return m;
}

inline Vector gaussian_vec(Rng& rng, Index n, double sd) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = sd * rng.normal();
  return v;
}

inline Matrix right_singular_vectors(Rng rng, Index d) {
  const Matrix g = gaussian(rng, d, d);
  Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullV);
  return svd.matrixV();
}

}  // namespace detail

/// Response from retained factors; exposed so tests can regenerate y.
inline Vector dgp_response(const Matrix& f_r, const Vector& gamma, const Vector& eps, bool linear) {
  const double d = static_cast<double>(f_r.cols());
  if (linear) return f_r * gamma / d + eps;
  return f_r.cwiseProduct(f_r) * gamma / d + eps;
}

inline GeneratedStudy generate(const DgpConfig& config) {
  config.validate();
  const Index d = config.dim;
  const Index dc = config.shared_dim;
  const std::uint64_t seed = config.seed;

  GeneratedStudy study;
  study.config = config;

  Index total_rows = 0;
  for (int r = 0; r < config.tasks; ++r) total_rows = std::max(total_rows, 3 * config.n(r));
  {
    Rng rng = Rng::stream(seed, "dgp/F");
    study.f = detail::gaussian(rng, total_rows, d);
  }
  const Matrix v_shared = detail::right_singular_vectors(Rng::stream(seed, "dgp/V-shared"), d);
  {
    Rng rng = Rng::stream(seed, "dgp/B");
    const Matrix g = detail::gaussian(rng, d, d);
    Eigen::HouseholderQR<Matrix> qr(g);
    study.b = qr.householderQ() * Matrix::Identity(d, d);
  }
  {
    Rng rng = Rng::stream(seed, "dgp/gamma-c");
    study.gamma_c = detail::gaussian_vec(rng, d, config.sigma_c);
  }

  for (int r = 0; r < config.tasks; ++r) {
    const auto ur = static_cast<std::uint64_t>(r);
    const Index n = config.n(r);
    TaskFactors tf;
    tf.v.resize(d, d);
    tf.v.leftCols(dc) = v_shared.leftCols(dc);
    if (dc < d) {
      const Matrix v_task =
          detail::right_singular_vectors(Rng::stream(seed, "dgp/V-task", ur), d);
      tf.v.rightCols(d - dc) = v_task.leftCols(d - dc);
    }
    tf.f = study.f.topRows(3 * n) * tf.v;
    {
      Rng rng = Rng::stream(seed, "dgp/E", ur);
      tf.noise_x = detail::gaussian(rng, 3 * n, d, config.sigma_e);
    }
    {
      Rng rng = Rng::stream(seed, "dgp/gamma-task", ur);
      tf.gamma_task = detail::gaussian_vec(rng, d, config.sigma_r(r));
    }
    {
      Rng rng = Rng::stream(seed, "dgp/eps", ur);
      tf.noise_y = detail::gaussian_vec(rng, 3 * n, config.sigma_e);
    }
    const Matrix x = tf.f * study.b + tf.noise_x;
    const Vector y = dgp_response(tf.f, study.gamma_c + tf.gamma_task, tf.noise_y, config.linear);

    TaskSplits ts;
    for (Split s : kAllSplits) {
      auto& ds = ts.get(s);
      const Index start = static_cast<Index>(s) * n;
      ds.x = x.middleRows(start, n);
      ds.y = y.segment(start, n);
      ds.role = s;
      ds.task = r;
    }
    study.tasks.push_back(std::move(ts));
    study.factors.push_back(std::move(tf));
  }
  return study;
}

/// Optional adjustments layered on a named setting.
struct SettingOverrides {
  std::optional<Index> shared_dim;          // d_c
  std::optional<double> sigma_bar;          // sigma_r for every task
  std::optional<std::vector<Index>> samples;
  std::optional<std::uint64_t> seed;
};

/// Named configurations: "1".."6", "4tasks", "5tasks", "linear".
inline DgpConfig make_setting(const std::string& id, const SettingOverrides& o = {}) {
  DgpConfig c;  // defaults: R=2, n=200, d=20, d_c=10, sigma_e=0.05, sigma_c=10, sigma_r=1
  if (id == "1") {
    c.sigma_task = {0.0};
  } else if (id == "2") {
    c.shared_dim = c.dim;
  } else if (id == "3") {
    c.shared_dim = 10;
  } else if (id == "4") {
    c.tasks = 3;
  } else if (id == "5") {
    c.tasks = 3;
    c.samples = {200, 200, 400};
  } else if (id == "6") {
    c.tasks = 3;
    c.sigma_task = {1.0, 1.0, 5.0};
  } else if (id == "4tasks") {
    c.tasks = 4;
  } else if (id == "5tasks") {
    c.tasks = 5;
  } else if (id == "linear") {
    c.tasks = 3;
    c.samples = {50};
    c.dim = 40;
    c.shared_dim = 20;
    c.linear = true;
  } else {
    throw ArgumentError("unknown setting '" + id +
                        "' (expected 1-6, 4tasks, 5tasks or linear)");
  }
  if (o.shared_dim) {
    if (id == "2") throw ArgumentError("setting 2 shares the full V; d_c cannot be overridden");
    c.shared_dim = *o.shared_dim;
  }
  if (o.sigma_bar) {
    if (id == "1") throw ArgumentError("setting 1 fixes sigma_bar = 0");
    c.sigma_task = {*o.sigma_bar};
  }
  if (o.samples) c.samples = *o.samples;
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

/// Known setting identifiers, in documentation order.
inline const std::vector<std::string>& setting_ids() {
  static const std::vector<std::string> ids{"1", "2", "3", "4", "5", "6", "4tasks", "5tasks",
                                            "linear"};
  return ids;
}

}  // namespace hetmtl
