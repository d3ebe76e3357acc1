#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hetmtl/model.hpp"
#include "oracles.hpp"

using namespace hetmtl;

namespace {

Matrix gaussian(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

MtlModel small_model(int tasks, std::uint64_t seed, bool shared = true) {
  auto m = make_model({2, 5, 3, 2, 4, 2, shared}, tasks, 4, seed);
  auto rng = Rng::stream(seed, "heads");
  for (auto& h : m.heads) {
    h.alpha = gaussian(rng, h.alpha.size(), 1);
    h.beta = gaussian(rng, h.beta.size(), 1);
  }
  m.centers.alpha_bar = gaussian(rng, m.q(), 1);
  m.centers.beta_bar = gaussian(rng, m.p(), 1);
  return m;
}

}  // namespace

TEST(MakeModel, ShapesAndZeroHeads) {
  const auto m = make_model({3, 16, 8, 4, 32, 6, true}, 3, 20, 1);
  EXPECT_EQ(m.tasks(), 3);
  EXPECT_EQ(m.q(), 8);
  EXPECT_EQ(m.p(), 6);
  EXPECT_EQ(m.input_dim(), 20);
  EXPECT_EQ(m.specifics[0].depth(), 3);
  EXPECT_EQ(m.shared->depth(), 4);
  for (const auto& h : m.heads) {
    EXPECT_EQ(h.alpha, Vector::Zero(8));
    EXPECT_EQ(h.beta, Vector::Zero(6));
  }
  EXPECT_FALSE(m.specifics[0] == m.specifics[1]);
  EXPECT_EQ(m, make_model({3, 16, 8, 4, 32, 6, true}, 3, 20, 1));
}

TEST(MakeModel, WithoutSharedPath) {
  const auto m = make_model({3, 16, 8, 3, 16, 8, false}, 1, 5, 0);
  EXPECT_FALSE(m.shared.has_value());
  EXPECT_EQ(m.p(), 0);
  EXPECT_EQ(m.heads[0].beta.size(), 0);
  EXPECT_NO_THROW(m.validate());
}

TEST(Predict, IsSpecificPlusSharedContribution) {
  const auto m = small_model(2, 3);
  auto rng = Rng::stream(3, "x");
  const Matrix x = gaussian(rng, 6, 4);
  for (int r = 0; r < 2; ++r) {
    const auto& h = m.heads[static_cast<std::size_t>(r)];
    const Matrix s = oracle::scalar_forward(m.specifics[static_cast<std::size_t>(r)], x);
    const Matrix c = oracle::scalar_forward(*m.shared, x);
    Vector expected(6);
    for (Index i = 0; i < 6; ++i) {
      double v = 0.0;
      for (Index j = 0; j < s.cols(); ++j) v += s(i, j) * h.alpha(j);
      for (Index j = 0; j < c.cols(); ++j) v += c(i, j) * h.beta(j);
      expected(i) = v;
    }
    EXPECT_LT((predict(m, r, x) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Predict, RejectsBadTaskIndex) {
  const auto m = small_model(2, 3);
  EXPECT_THROW(predict(m, 2, Matrix::Zero(1, 4)), IndexError);
  EXPECT_THROW(predict(m, -1, Matrix::Zero(1, 4)), IndexError);
  EXPECT_THROW(predict(m, 0, Matrix::Zero(1, 3)), ShapeError);
}

TEST(Penalties, SimilarityIsUnsquaredNorm) {
  std::vector<TaskHead> heads(2);
  heads[0] = {Vector::Zero(2), Vector::Zero(1)};
  heads[1] = {Vector::Zero(2), Vector::Zero(1)};
  heads[0].alpha << 3.0, 4.0;  // distance 5 from a zero center
  heads[1].beta << -2.0;       // distance 2
  const Centers centers{Vector::Zero(2), Vector::Zero(1)};
  PenaltyWeights w{Vector(2), Vector(2), 0.0};
  w.lambda_s << 0.5, 10.0;
  w.lambda_c << 7.0, 0.25;
  EXPECT_DOUBLE_EQ(similarity_penalty(heads, centers, w), 0.5 * 5.0 + 0.25 * 2.0);
}

TEST(Penalties, OrthogonalityIsSquaredFrobenius) {
  LatentBatch lb{Matrix(2, 1), Matrix(2, 2)};
  lb.specific << 1.0, 2.0;
  lb.shared << 1.0, 0.0, 0.0, 3.0;  // S'C = [1, 6]
  const std::vector<LatentBatch> v{lb};
  EXPECT_DOUBLE_EQ(orthogonality_penalty(v, 0.5), 0.5 * 37.0);
  LatentBatch orth{Matrix(2, 1), Matrix(2, 1)};
  orth.specific << 1.0, 0.0;
  orth.shared << 0.0, 1.0;
  EXPECT_DOUBLE_EQ(orthogonality_penalty(std::vector<LatentBatch>{orth}, 3.0), 0.0);
}

TEST(Objective, SumsItsParts) {
  const auto m = small_model(3, 8);
  auto rng = Rng::stream(8, "batch");
  std::vector<Batch> batches;
  for (int r = 0; r < 3; ++r) batches.push_back({gaussian(rng, 5 + r, 4), gaussian(rng, 5 + r, 1)});
  PenaltyWeights w = PenaltyWeights::uniform(3, 0.3, 0.7, 0.01);
  const auto bd = objective(m, batches, w);

  double mse = 0.0;
  double ortho = 0.0;
  for (int r = 0; r < 3; ++r) {
    const auto& b = batches[static_cast<std::size_t>(r)];
    mse += (b.y - predict(m, r, b.x)).squaredNorm() / static_cast<double>(b.x.rows());
    const Matrix s = oracle::scalar_forward(m.specifics[static_cast<std::size_t>(r)], b.x);
    const Matrix c = oracle::scalar_forward(*m.shared, b.x);
    ortho += (s.transpose() * c).squaredNorm();
  }
  double sim = 0.0;
  for (const auto& h : m.heads) {
    sim += 0.3 * (h.alpha - m.centers.alpha_bar).norm() + 0.7 * (h.beta - m.centers.beta_bar).norm();
  }
  EXPECT_NEAR(bd.mse, mse / 3.0, 1e-12);
  EXPECT_NEAR(bd.similarity, sim, 1e-12);
  EXPECT_NEAR(bd.orthogonality, 0.01 * ortho, 1e-10);
  EXPECT_NEAR(bd.total, bd.mse + bd.similarity + bd.orthogonality, 1e-12);
}

TEST(Objective, HeadsAtCentersHaveNoSimilarityCost) {
  auto m = small_model(2, 4);
  for (auto& h : m.heads) h = {m.centers.alpha_bar, m.centers.beta_bar};
  EXPECT_EQ(similarity_penalty(m.heads, m.centers, PenaltyWeights::uniform(2, 5.0, 5.0, 0.0)), 0.0);
}

TEST(PenaltyWeights, Validation) {
  EXPECT_THROW(PenaltyWeights::uniform(2, 1, 1, 0).validate(3), ShapeError);
  EXPECT_THROW(PenaltyWeights::uniform(2, -1, 1, 0).validate(2), ArgumentError);
  EXPECT_THROW(PenaltyWeights::uniform(2, 1, 1, -0.1).validate(2), ArgumentError);
}

TEST(MtlModel, ValidateCatchesInconsistentHeads) {
  auto m = small_model(2, 1);
  m.heads[1].alpha = Vector::Zero(m.q() + 1);
  EXPECT_THROW(m.validate(), ShapeError);
}
