#pragma once

// Dense feed-forward networks with hand-derived backpropagation, Adam, and an
// exponential learning-rate schedule.
//
// Batches are row-major in the statistical sense: an n x d matrix holds one
// sample per row. A layer maps a (n x in) activation to (n x out) through
// A * W^T + 1 b^T with W stored as out x in.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetmtl/errors.hpp"
#include "hetmtl/rng.hpp"

namespace hetmtl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace nn {

enum class Activation : std::uint8_t { relu = 0, identity = 1 };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Exact equality including shape; Eigen's operator== asserts on mismatched sizes.
template <class A, class B>
bool identical(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

class DenseNet {
 public:
  DenseNet() = default;

  DenseNet(std::vector<DenseLayer> layers, Activation activation = Activation::relu)
      : layers_(std::move(layers)), activation_(activation) {
    validate();
  }

  /// He-initialised MLP with `depth` affine layers, hidden width `width`.
  /// depth == 1 gives a single affine map in_dim -> out_dim.
  static DenseNet mlp(Index in_dim, int depth, Index width, Index out_dim, Rng& rng,
                      Activation activation = Activation::relu) {
    if (depth < 1 || in_dim < 1 || out_dim < 1 || width < 1) {
      throw ArgumentError("DenseNet::mlp: depth, width and dimensions must be positive");
    }
    std::vector<DenseLayer> layers;
    layers.reserve(static_cast<std::size_t>(depth));
    Index fan_in = in_dim;
    for (int i = 0; i < depth; ++i) {
      const Index fan_out = (i + 1 == depth) ? out_dim : width;
      DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      // Column-major fill order is part of the reproducibility contract.
      for (Index c = 0; c < fan_in; ++c)
        for (Index r = 0; r < fan_out; ++r) layer.weight(r, c) = sd * rng.normal();
      layers.push_back(std::move(layer));
      fan_in = fan_out;
    }
    return DenseNet(std::move(layers), activation);
  }

  /// Single identity layer; handy as a frozen feature map.
  static DenseNet identity(Index dim) {
    return DenseNet({DenseLayer{Matrix::Identity(dim, dim), Vector::Zero(dim)}},
                    Activation::relu);
  }

  Index in_dim() const { return layers_.empty() ? 0 : layers_.front().weight.cols(); }
  Index out_dim() const { return layers_.empty() ? 0 : layers_.back().weight.rows(); }
  int depth() const { return static_cast<int>(layers_.size()); }
  Index width() const {
    Index w = 0;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) w = std::max(w, layers_[i].weight.rows());
    return w;
  }
  Activation activation() const { return activation_; }
  bool empty() const { return layers_.empty(); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  double max_abs_parameter() const {
    double m = 0.0;
    for (const auto& l : layers_) {
      if (l.weight.size() > 0) m = std::max(m, l.weight.cwiseAbs().maxCoeff());
      if (l.bias.size() > 0) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
    }
    return m;
  }

  void validate() const {
    if (layers_.empty()) throw ShapeError("DenseNet: at least one layer is required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.weight.rows()) {
        throw ShapeError("DenseNet: layer " + std::to_string(i) + " bias length " +
                         std::to_string(l.bias.size()) + " != weight rows " +
                         std::to_string(l.weight.rows()));
      }
      if (i > 0 && layers_[i - 1].weight.rows() != l.weight.cols()) {
        throw ShapeError("DenseNet: layer " + std::to_string(i) + " expects " +
                         std::to_string(l.weight.cols()) + " inputs but previous layer emits " +
                         std::to_string(layers_[i - 1].weight.rows()));
      }
      if (!l.weight.allFinite() || !l.bias.allFinite()) {
        throw InputError("DenseNet: non-finite parameter in layer " + std::to_string(i));
      }
    }
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    if (a.activation_ != b.activation_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (!identical(x.weight, y.weight) || !identical(x.bias, y.bias)) return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer> layers_;
  Activation activation_ = Activation::relu;
};

/// Per-layer inputs and pre-activations retained for backpropagation.
struct ForwardCache {
  std::vector<Matrix> inputs;          // inputs[i] feeds layer i; inputs[0] is the batch
  std::vector<Matrix> preactivations;  // z_i = inputs[i] W_i^T + b_i
  Matrix output;
};

namespace detail {

inline void check_input(const DenseNet& net, const Eigen::Ref<const Matrix>& x) {
  if (x.cols() != net.in_dim()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, net expects " +
                     std::to_string(net.in_dim()));
  }
  if (!x.allFinite()) throw InputError("forward: input batch contains non-finite entries");
}

inline Matrix affine(const DenseLayer& layer, const Eigen::Ref<const Matrix>& a) {
  Matrix z = a * layer.weight.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

inline void activate(Activation act, Matrix& z) {
  if (act == Activation::relu) z = z.cwiseMax(0.0);
}

}  // namespace detail

inline Matrix forward(const DenseNet& net, const Eigen::Ref<const Matrix>& x) {
  detail::check_input(net, x);
  const auto& layers = net.layers();
  Matrix a = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Matrix z = detail::affine(layers[i], a);
    if (i + 1 < layers.size()) detail::activate(net.activation(), z);
    a = std::move(z);
  }
  return a;
}

inline ForwardCache forward_cached(const DenseNet& net, const Eigen::Ref<const Matrix>& x) {
  detail::check_input(net, x);
  const auto& layers = net.layers();
  ForwardCache cache;
  cache.inputs.reserve(layers.size());
  cache.preactivations.reserve(layers.size());
  cache.inputs.emplace_back(x);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Matrix z = detail::affine(layers[i], cache.inputs.back());
    if (i + 1 < layers.size()) {
      Matrix a = z;
      detail::activate(net.activation(), a);
      cache.preactivations.push_back(std::move(z));
      cache.inputs.push_back(std::move(a));
    } else {
      cache.output = z;
      cache.preactivations.push_back(std::move(z));
    }
  }
  return cache;
}

/// Gradients with the same layout as the network, plus the input gradient.
struct NetGradients {
  std::vector<DenseLayer> layers;
  Matrix input;
};

/// Gradient of sum(forward(net, X) .* upstream) w.r.t. every parameter and X.
inline NetGradients backward(const DenseNet& net, const ForwardCache& cache,
                             const Eigen::Ref<const Matrix>& upstream) {
  if (upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols()) {
    throw ShapeError("backward: upstream gradient is " + std::to_string(upstream.rows()) + "x" +
                     std::to_string(upstream.cols()) + ", output is " +
                     std::to_string(cache.output.rows()) + "x" +
                     std::to_string(cache.output.cols()));
  }
  const auto& layers = net.layers();
  NetGradients g;
  g.layers.resize(layers.size());
  Matrix delta = upstream;
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size() && net.activation() == Activation::relu) {
      delta = delta.cwiseProduct((cache.preactivations[k].array() > 0.0).cast<double>().matrix());
    }
    g.layers[k].weight = delta.transpose() * cache.inputs[k];
    g.layers[k].bias = delta.colwise().sum().transpose();
    delta = delta * layers[k].weight;
  }
  g.input = std::move(delta);
  return g;
}

inline NetGradients backward(const DenseNet& net, const Eigen::Ref<const Matrix>& x,
                             const Eigen::Ref<const Matrix>& upstream) {
  return backward(net, forward_cached(net, x), upstream);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Eigen::ArrayXd> first;
  std::vector<Eigen::ArrayXd> second;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_net(const DenseNet& net) {
    AdamState s;
    for (const auto& l : net.layers()) {
      s.first.push_back(Eigen::ArrayXd::Zero(l.weight.size()));
      s.second.push_back(Eigen::ArrayXd::Zero(l.weight.size()));
      s.first.push_back(Eigen::ArrayXd::Zero(l.bias.size()));
      s.second.push_back(Eigen::ArrayXd::Zero(l.bias.size()));
    }
    return s;
  }

  static AdamState for_size(Index n) {
    AdamState s;
    s.first.push_back(Eigen::ArrayXd::Zero(n));
    s.second.push_back(Eigen::ArrayXd::Zero(n));
    return s;
  }
};

struct ParamSlot {
  double* value;
  const double* grad;
  Index size;
};

/// One bias-corrected Adam update over a list of parameter blocks.
inline void adam_update(std::span<const ParamSlot> slots, AdamState& state, double rate,
                        std::string_view block) {
  if (!(rate >= 0.0) || !std::isfinite(rate)) {
    throw ArgumentError("adam_step: rate must be finite and non-negative");
  }
  if (slots.size() != state.first.size() || slots.size() != state.second.size()) {
    throw ShapeError("adam_step(" + std::string(block) + "): state has " +
                     std::to_string(state.first.size()) + " slots, parameters have " +
                     std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (state.first[i].size() != slots[i].size || state.second[i].size() != slots[i].size) {
      throw ShapeError("adam_step(" + std::string(block) + "): moment shape mismatch in slot " +
                       std::to_string(i));
    }
    Eigen::Map<const Eigen::ArrayXd> g(slots[i].grad, slots[i].size);
    if (!g.allFinite()) {
      throw OptimizerError(std::string(block),
                           "adam_step: non-finite gradient in block '" + std::string(block) + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd> p(slots[i].value, slots[i].size);
    Eigen::Map<const Eigen::ArrayXd> g(slots[i].grad, slots[i].size);
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.square();
    p -= rate * (m / c1) / ((v / c2).sqrt() + state.epsilon);
  }
}

inline void adam_step(DenseNet& net, const NetGradients& grads, AdamState& state, double rate,
                      std::string_view block) {
  auto& layers = net.layers();
  if (grads.layers.size() != layers.size()) {
    throw ShapeError("adam_step(" + std::string(block) + "): gradient depth mismatch");
  }
  std::vector<ParamSlot> slots;
  slots.reserve(layers.size() * 2);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& gl = grads.layers[i];
    if (gl.weight.rows() != layers[i].weight.rows() || gl.weight.cols() != layers[i].weight.cols() ||
        gl.bias.size() != layers[i].bias.size()) {
      throw ShapeError("adam_step(" + std::string(block) + "): gradient shape mismatch in layer " +
                       std::to_string(i));
    }
    slots.push_back({layers[i].weight.data(), gl.weight.data(), layers[i].weight.size()});
    slots.push_back({layers[i].bias.data(), gl.bias.data(), layers[i].bias.size()});
  }
  adam_update(slots, state, rate, block);
}

inline void adam_step(Vector& params, const Vector& grads, AdamState& state, double rate,
                      std::string_view block) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step(" + std::string(block) + "): gradient length mismatch");
  }
  const ParamSlot slot{params.data(), grads.data(), params.size()};
  adam_update(std::span<const ParamSlot>(&slot, 1), state, rate, block);
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct LrSchedule {
  double base_rate = 1e-3;
  double decay = 0.95;  // per epoch

  void validate() const {
    if (!(base_rate >= 0.0) || !std::isfinite(base_rate)) {
      throw ArgumentError("LrSchedule: base rate must be finite and >= 0");
    }
    if (!(decay > 0.0 && decay <= 1.0)) throw ArgumentError("LrSchedule: decay must lie in (0, 1]");
  }
};

inline double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0) throw ArgumentError("lr_at: epoch must be >= 0");
  return schedule.base_rate * std::pow(schedule.decay, static_cast<double>(epoch));
}

}  // namespace nn
}  // namespace hetmtl
