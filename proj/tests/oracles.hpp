#pragma once

// Reference computations used by the tests. Each one recomputes a quantity
// by a different route than the library: plain loops over std::vector,
// finite differences, a generic Newton minimizer, QR least squares.

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hetmtl/nncore.hpp"

namespace oracle {

using hetmtl::Index;
using hetmtl::Matrix;
using hetmtl::Vector;
using Row = std::vector<double>;

/// Layer recursion with scalar loops, one input row at a time.
inline Row scalar_forward(const hetmtl::nn::DenseNet& net, const Row& input) {
  Row a = input;
  const auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& w = layers[k].weight;
    Row z(static_cast<std::size_t>(w.rows()), 0.0);
    for (Index i = 0; i < w.rows(); ++i) {
      double s = layers[k].bias(i);
      for (Index j = 0; j < w.cols(); ++j) s += w(i, j) * a[static_cast<std::size_t>(j)];
      const bool last = k + 1 == layers.size();
      if (!last && net.activation() == hetmtl::nn::Activation::relu) s = std::max(s, 0.0);
      z[static_cast<std::size_t>(i)] = s;
    }
    a = std::move(z);
  }
  return a;
}

inline Matrix scalar_forward(const hetmtl::nn::DenseNet& net, const Matrix& x) {
  Matrix out(x.rows(), net.out_dim());
  for (Index i = 0; i < x.rows(); ++i) {
    Row row(static_cast<std::size_t>(x.cols()));
    for (Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    const Row y = scalar_forward(net, row);
    for (Index j = 0; j < out.cols(); ++j) out(i, j) = y[static_cast<std::size_t>(j)];
  }
  return out;
}

/// Central difference of f at the scalar *p.
inline double central_difference(double* p, const std::function<double()>& f, double h = 1e-5) {
  const double keep = *p;
  *p = keep + h;
  const double up = f();
  *p = keep - h;
  const double down = f();
  *p = keep;
  return (up - down) / (2.0 * h);
}

/// sum(forward(net, X) .* U), evaluated with the scalar interpreter.
inline double weighted_output(const hetmtl::nn::DenseNet& net, const Matrix& x, const Matrix& u) {
  return scalar_forward(net, x).cwiseProduct(u).sum();
}

/// Minimiser of 0.5||x - v||^2 + t||x|| found by damped Newton from v,
/// compared against the non-smooth candidate x = 0.
inline Vector numeric_prox(const Vector& v, double t) {
  const Index k = v.size();
  auto f = [&](const Vector& x) { return 0.5 * (x - v).squaredNorm() + t * x.norm(); };
  Vector x = v;
  for (int it = 0; it < 200 && x.norm() > 0.0; ++it) {
    const double nx = x.norm();
    const Vector g = x - v + t * x / nx;
    if (g.norm() < 1e-15) break;
    const Matrix h = Matrix::Identity(k, k) * (1.0 + t / nx) - (t / (nx * nx * nx)) * x * x.transpose();
    Vector step = h.ldlt().solve(g);
    double s = 1.0;
    const double fx = f(x);
    while (s > 1e-20 && !(f(x - s * step) <= fx)) s *= 0.5;
    if (s <= 1e-20) break;
    const Vector next = x - s * step;
    if ((next - x).norm() < 1e-16) break;
    x = next;
  }
  const Vector zero = Vector::Zero(k);
  return f(zero) <= f(x) ? zero : x;
}

/// Least squares by column-pivoted Householder QR.
inline Vector least_squares(const Matrix& a, const Vector& b) {
  return a.colPivHouseholderQr().solve(b);
}

/// Mean and sample standard deviation by Welford's one-pass update.
struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

inline MeanSd welford(const std::vector<double>& xs) {
  double mean = 0.0;
  double m2 = 0.0;
  double n = 0.0;
  for (double x : xs) {
    n += 1.0;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  return {mean, xs.size() > 1 ? std::sqrt(m2 / (n - 1.0)) : 0.0};
}

}  // namespace oracle
