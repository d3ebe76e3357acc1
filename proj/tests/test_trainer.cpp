#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hetmtl/dgp.hpp"
#include "hetmtl/trainer.hpp"
#include "oracles.hpp"

using namespace hetmtl;

namespace {

Matrix gaussian(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

Vector random_vector(Rng& rng, Index n, double scale = 1.0) {
  return scale * gaussian(rng, n, 1);
}

/// Identity encoders on both paths, so latents are the raw inputs.
MtlModel identity_model(int tasks, Index d, bool shared = true) {
  MtlModel m;
  for (int r = 0; r < tasks; ++r) m.specifics.push_back(nn::DenseNet::identity(d));
  if (shared) m.shared = nn::DenseNet::identity(d);
  const Index p = shared ? d : 0;
  m.heads.assign(static_cast<std::size_t>(tasks), TaskHead{Vector::Zero(d), Vector::Zero(p)});
  m.centers = {Vector::Zero(d), Vector::Zero(p)};
  return m;
}

std::vector<Batch> linear_batches(Rng& rng, int tasks, Index n, Index d, double noise) {
  std::vector<Batch> out;
  const Vector common = random_vector(rng, d);
  for (int r = 0; r < tasks; ++r) {
    Batch b{gaussian(rng, n, d), Vector()};
    b.y = b.x * (common + 0.3 * random_vector(rng, d)) + noise * random_vector(rng, n);
    out.push_back(std::move(b));
  }
  return out;
}

TaskSplits as_splits(const Batch& b, int task) {
  TaskSplits ts;
  for (Split s : kAllSplits) ts.get(s) = TaskDataset{b.x, b.y, s, task};
  return ts;
}

double f_prox(const Vector& x, const Vector& v, double t) {
  return 0.5 * (x - v).squaredNorm() + t * x.norm();
}

}  // namespace

// ---------------------------------------------------------------------------
// prox_group

TEST(ProxGroup, MatchesNumericalMinimiser) {
  auto rng = Rng::stream(1, "prox");
  for (int trial = 0; trial < 50; ++trial) {
    const Index k = 1 + static_cast<Index>(rng.uniform_index(16));
    const Vector v = random_vector(rng, k, 2.0);
    const double t = 2.0 * v.norm() * rng.uniform();
    const Vector got = prox_group(v, t);
    const Vector ref = oracle::numeric_prox(v, t);
    EXPECT_LT((got - ref).norm(), 1e-6) << "k=" << k << " t=" << t;
    EXPECT_LE(f_prox(got, v, t), f_prox(ref, v, t) + 1e-12);
  }
}

TEST(ProxGroup, NormIdentity) {
  auto rng = Rng::stream(2, "prox");
  for (int trial = 0; trial < 200; ++trial) {
    const Vector v = random_vector(rng, 1 + static_cast<Index>(rng.uniform_index(16)));
    const double t = 2.0 * v.norm() * rng.uniform();
    EXPECT_NEAR(prox_group(v, t).norm(), std::max(v.norm() - t, 0.0), 1e-12);
  }
}

TEST(ProxGroup, Examples) {
  Vector v(2);
  v << 3.0, 4.0;
  EXPECT_EQ(prox_group(v, 0.0), v);
  EXPECT_EQ(prox_group(v, 5.0), Vector::Zero(2));
  EXPECT_EQ(prox_group(v, 7.0), Vector::Zero(2));
  Vector half(2);
  half << 1.5, 2.0;
  EXPECT_LT((prox_group(v, 2.5) - half).norm(), 1e-15);
  EXPECT_THROW(prox_group(v, -1e-9), ArgumentError);
}

TEST(ProxGroup, IsNonExpansive) {
  auto rng = Rng::stream(3, "prox");
  for (int trial = 0; trial < 200; ++trial) {
    const Index k = 1 + static_cast<Index>(rng.uniform_index(8));
    const Vector u = random_vector(rng, k);
    const Vector v = random_vector(rng, k);
    const double t = 2.0 * rng.uniform();
    EXPECT_LE((prox_group(u, t) - prox_group(v, t)).norm(), (u - v).norm() + 1e-12);
  }
}

TEST(ProxGroup, PreservesDirection) {
  auto rng = Rng::stream(4, "prox");
  const Vector v = random_vector(rng, 6);
  const Vector out = prox_group(v, 0.3 * v.norm());
  EXPECT_NEAR(out.dot(v), out.norm() * v.norm(), 1e-12);
}

// ---------------------------------------------------------------------------
// Coefficient blocks

TEST(CoefficientBlocks, RecoverOlsWithIdentityEncoders) {
  auto rng = Rng::stream(5, "ols");
  const auto batches = linear_batches(rng, 1, 80, 5, 0.5);
  auto m = identity_model(1, 5);
  const auto w = PenaltyWeights::uniform(1, 0.0, 0.0, 0.0);
  step2_beta(m, batches, w, 0.01);
  step3_alpha(m, batches, w, 0.01);
  const Vector ols = oracle::least_squares(batches[0].x, batches[0].y);
  const Vector fitted = predict(m, 0, batches[0].x);
  EXPECT_LT((fitted - batches[0].x * ols).norm(), 1e-8 * batches[0].y.norm());
}

TEST(CoefficientBlocks, HugePenaltyCollapsesHeadsOntoCenter) {
  auto rng = Rng::stream(6, "shrink");
  const auto batches = linear_batches(rng, 3, 40, 4, 0.1);
  auto m = identity_model(3, 4);
  for (auto& h : m.heads) {
    h.alpha = random_vector(rng, 4);
    h.beta = random_vector(rng, 4);
  }
  const auto w = PenaltyWeights::uniform(3, 1e6, 1e6, 0.0);
  step2_beta(m, batches, w, 0.01);
  step3_alpha(m, batches, w, 0.01);
  for (const auto& h : m.heads) {
    EXPECT_EQ(h.alpha, m.centers.alpha_bar);
    EXPECT_EQ(h.beta, m.centers.beta_bar);
  }
  // With every deviation at zero the center is the pooled weighted least-squares fit.
  Matrix zs(120, 4);
  Vector ys(120);
  for (int r = 0; r < 3; ++r) {
    const auto& b = batches[static_cast<std::size_t>(r)];
    zs.middleRows(40 * r, 40) = b.x;
    ys.segment(40 * r, 40) = b.y - b.x * m.heads[static_cast<std::size_t>(r)].beta;
  }
  EXPECT_LT((m.centers.alpha_bar - oracle::least_squares(zs, ys)).norm(), 1e-9);
}

TEST(CoefficientBlocks, BetaBlockDoesNotIncreaseObjective) {
  auto rng = Rng::stream(7, "mono");
  const auto batches = linear_batches(rng, 3, 30, 4, 0.5);
  auto m = identity_model(3, 4);
  for (auto& h : m.heads) {
    h.alpha = random_vector(rng, 4);
    h.beta = random_vector(rng, 4);
  }
  const auto w = PenaltyWeights::uniform(3, 0.2, 0.2, 0.0);
  // Step no larger than 1/L, with L the largest per-task smoothness constant.
  double lipschitz = 0.0;
  for (const auto& b : batches) {
    const double top = Eigen::JacobiSVD<Matrix>(b.x).singularValues()(0);
    lipschitz = std::max(lipschitz, 2.0 / (3.0 * 30.0) * top * top);
  }
  double before = objective(m, batches, w).total;
  for (int it = 0; it < 20; ++it) {
    step2_beta(m, batches, w, 1.0 / lipschitz);
    const double after = objective(m, batches, w).total;
    EXPECT_LE(after, before + 1e-12);
    before = after;
    step3_alpha(m, batches, w, 1.0 / lipschitz);
    const double after_alpha = objective(m, batches, w).total;
    EXPECT_LE(after_alpha, before + 1e-12);
    before = after_alpha;
  }
}

TEST(CoefficientBlocks, SingleTaskUnpenalisedStepIsExactBlockMinimiser) {
  // R = 1 and lambda = 0: the center solve absorbs the deviation, so one
  // block update lands on the least-squares fit for that block.
  auto rng = Rng::stream(8, "exact");
  const auto batches = linear_batches(rng, 1, 50, 3, 0.2);
  auto m = identity_model(1, 3);
  m.heads[0].alpha = random_vector(rng, 3);
  step2_beta(m, batches, PenaltyWeights::uniform(1, 0, 0, 0), 1e-3);
  const Vector target = batches[0].y - batches[0].x * m.heads[0].alpha;
  EXPECT_LT((m.heads[0].beta - oracle::least_squares(batches[0].x, target)).norm(), 1e-9);
}

TEST(CoefficientBlocks, SingularFeaturesFallBackToRidge) {
  auto rng = Rng::stream(9, "sing");
  std::vector<Batch> batches{{Matrix::Zero(10, 3), random_vector(rng, 10)}};
  auto m = identity_model(1, 3);
  const int singular = step2_beta(m, batches, PenaltyWeights::uniform(1, 0, 0, 0), 0.01);
  EXPECT_EQ(singular, 1);
  EXPECT_TRUE(m.centers.beta_bar.allFinite());
}

// ---------------------------------------------------------------------------
// Encoder step

TEST(EncoderStep, FirstAdamStepFollowsObjectiveGradientSigns) {
  auto rng = Rng::stream(10, "enc");
  auto m = make_model({2, 4, 2, 2, 3, 2, true}, 2, 3, 10);
  for (auto& h : m.heads) {
    h.alpha = random_vector(rng, 2);
    h.beta = random_vector(rng, 2);
  }
  const auto batches = linear_batches(rng, 2, 7, 3, 0.1);
  const auto w = PenaltyWeights::uniform(2, 0.5, 0.5, 0.05);
  const MtlModel before = m;

  // Finite-difference gradient of the batch objective for every encoder weight.
  MtlModel probe = before;
  auto f = [&] { return objective(probe, batches, w).total; };
  std::vector<double> fd;
  auto collect = [&](nn::DenseNet& net) {
    for (auto& l : net.layers()) {
      for (Index i = 0; i < l.weight.size(); ++i) {
        fd.push_back(oracle::central_difference(l.weight.data() + i, f, 1e-6));
      }
      for (Index i = 0; i < l.bias.size(); ++i) {
        fd.push_back(oracle::central_difference(l.bias.data() + i, f, 1e-6));
      }
    }
  };
  for (auto& s : probe.specifics) collect(s);
  collect(*probe.shared);

  auto opt = EncoderOptimizer::for_model(m);
  const double rate = 1e-4;
  const auto bd = step1_encoders(m, batches, w, rate, opt);
  EXPECT_NEAR(bd.total, objective(before, batches, w).total, 1e-12);

  std::vector<double> moved;
  auto diff = [&](const nn::DenseNet& a, const nn::DenseNet& b) {
    for (std::size_t k = 0; k < a.layers().size(); ++k) {
      const Matrix dw = a.layers()[k].weight - b.layers()[k].weight;
      for (Index i = 0; i < dw.size(); ++i) moved.push_back(dw.data()[i]);
      const Vector db = a.layers()[k].bias - b.layers()[k].bias;
      for (Index i = 0; i < db.size(); ++i) moved.push_back(db(i));
    }
  };
  for (std::size_t r = 0; r < m.specifics.size(); ++r) diff(m.specifics[r], before.specifics[r]);
  diff(*m.shared, *before.shared);

  ASSERT_EQ(moved.size(), fd.size());
  int checked = 0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    if (std::abs(fd[i]) < 1e-4) continue;  // dead ReLU units or near-zero partials
    // First Adam step: delta = -rate * g / (|g| + eps), i.e. -rate * sign(g).
    EXPECT_NEAR(moved[i], -rate * (fd[i] > 0 ? 1.0 : -1.0), 1e-7) << "param " << i;
    ++checked;
  }
  EXPECT_GT(checked, 20);
  // Heads and centers are not touched by the encoder step.
  EXPECT_EQ(m.heads, before.heads);
  EXPECT_EQ(m.centers, before.centers);
}

TEST(EncoderStep, ZeroRateIsANoOp) {
  auto rng = Rng::stream(11, "zero");
  auto m = make_model({2, 4, 2, 2, 3, 2, true}, 2, 3, 11);
  const MtlModel before = m;
  auto opt = EncoderOptimizer::for_model(m);
  step1_encoders(m, linear_batches(rng, 2, 5, 3, 0.1), PenaltyWeights::uniform(2, 1, 1, 0.1), 0.0,
                 opt);
  EXPECT_EQ(m, before);
}

// ---------------------------------------------------------------------------
// Full training loop

namespace {

std::vector<TaskSplits> small_study(std::uint64_t seed) {
  DgpConfig c = make_setting("3");
  c.samples = {40};
  c.dim = 6;
  c.shared_dim = 3;
  c.seed = seed;
  return generate(c).tasks;
}

TrainConfig quick_config(int tasks, int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_sizes = {16};
  tc.schedule = {0.01, 0.95};
  tc.weights = PenaltyWeights::uniform(tasks, 0.1, 0.1, 0.001);
  tc.patience = 1000;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST(Train, IsDeterministic) {
  const auto data = small_study(1);
  const auto m0 = make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5);
  const auto a = train(m0, data, quick_config(2, 15));
  const auto b = train(m0, data, quick_config(2, 15));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.report.val_mse, b.report.val_mse);
  EXPECT_EQ(a.report.best_epoch, b.report.best_epoch);
}

TEST(Train, ReturnsBestValidationModel) {
  const auto data = small_study(2);
  const auto result = train(make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5), data,
                            quick_config(2, 30));
  ASSERT_EQ(result.report.val_mse.size(), 30u);
  const auto best = std::min_element(result.report.val_mse.begin(), result.report.val_mse.end());
  EXPECT_EQ(result.report.best_epoch, best - result.report.val_mse.begin());
  EXPECT_DOUBLE_EQ(result.report.best_val_mse, *best);
  EXPECT_NEAR(mean_task_mse(result.model, data, Split::val), *best, 1e-12);
  for (std::size_t e = 0; e < 30; ++e) {
    EXPECT_DOUBLE_EQ(result.report.learning_rate[e], nn::lr_at({0.01, 0.95}, static_cast<int>(e)));
  }
  EXPECT_EQ(result.report.alpha_deviation.size(), 2u);
  EXPECT_EQ(result.report.orthogonality_full.size(), 2u);
}

TEST(Train, EarlyStoppingHonoursPatience) {
  const auto data = small_study(3);
  auto tc = quick_config(2, 400);
  tc.patience = 5;
  const auto result = train(make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5), data, tc);
  if (result.report.epochs_run < 400) {
    EXPECT_EQ(result.report.epochs_run - 1 - result.report.best_epoch, 5);
  }
  for (int e = result.report.best_epoch + 1; e < result.report.epochs_run; ++e) {
    EXPECT_GE(result.report.val_mse[static_cast<std::size_t>(e)], result.report.best_val_mse);
  }
}

TEST(Train, ZeroLearningRateLeavesModelUntouched) {
  const auto data = small_study(4);
  const auto m0 = make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5);
  auto tc = quick_config(2, 3);
  tc.schedule.base_rate = 0.0;
  const auto result = train(m0, data, tc);
  EXPECT_EQ(result.model, m0);
}

TEST(Train, FrozenIdentityEncodersReachOls) {
  auto rng = Rng::stream(12, "ols-train");
  const auto b = linear_batches(rng, 1, 100, 4, 0.3);
  const std::vector<TaskSplits> data{as_splits(b[0], 0)};
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_sizes = {100};
  tc.schedule = {0.01, 1.0};
  tc.weights = PenaltyWeights::uniform(1, 0, 0, 0);
  tc.encoder_rate_scale = 0.0;
  const auto result = train(identity_model(1, 4), data, tc);
  const Vector ols = oracle::least_squares(b[0].x, b[0].y);
  const double best = (b[0].y - b[0].x * ols).squaredNorm() / 100.0;
  EXPECT_LE(mean_task_mse(result.model, data, Split::train), best * (1.0 + 1e-10));
}

TEST(Train, RejectsMismatchedInputs) {
  const auto data = small_study(5);
  EXPECT_THROW(train(make_model({2, 8, 3, 2, 8, 3, true}, 3, 6, 5), data, quick_config(3, 1)),
               ArgumentError);
  EXPECT_THROW(train(make_model({2, 8, 3, 2, 8, 3, true}, 2, 7, 5), data, quick_config(2, 1)),
               ShapeError);
  auto tc = quick_config(2, 1);
  tc.batch_sizes = {0};
  EXPECT_THROW(train(make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5), data, tc), ArgumentError);
}

TEST(Train, DivergenceIsReported) {
  const auto data = small_study(6);
  auto tc = quick_config(2, 5);
  tc.schedule.base_rate = 1e300;
  EXPECT_THROW(train(make_model({2, 8, 3, 2, 8, 3, true}, 2, 6, 5), data, tc), Error);
}
