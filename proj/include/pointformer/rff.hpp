#pragma once

// Row-wise feed-forward stacks (rFF): a shared MLP applied to every row of
// a feature matrix, plus the dropout helper and layer-norm parameter pair.

#include "pointformer/rng.hpp"
#include "pointformer/tape.hpp"

#include <string>
#include <vector>

namespace pf {

// Inverted dropout: scales kept entries by 1/keep so eval is the identity.
template <class S>
Var<S> dropout(Tape<S>& t, Var<S> x, double rate, RngStream* rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw UsageError("dropout: training mode needs an rng");
  const auto& X = t.value(x);
  const S keep = S(1.0 - rate);
  Matrix2D<S> mask(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r) {
    for (Index c = 0; c < X.cols(); ++c) {
      mask(r, c) = rng->uniform() < 1.0 - rate ? S(1) / keep : S(0);
    }
  }
  return mul_mask(t, x, std::move(mask));
}

// Per-forward context: training flag plus the stream dropout masks draw on.
struct EvalMode {
  bool training = false;
  double dropout_rate = 0.0;
  RngStream* rng = nullptr;
};

template <class S>
struct LayerNormParams {
  Parameter<S> gain;
  Parameter<S> bias;

  LayerNormParams() = default;
  LayerNormParams(const std::string& id, Index dim) : gain(id + ".gain", 1, dim), bias(id + ".bias", 1, dim) {
    gain.value.setOnes();
  }

  template <class F>
  void visit(F&& f) {
    f(gain);
    f(bias);
  }
};

template <class S>
Var<S> layer_norm(Tape<S>& t, Var<S> x, LayerNormParams<S>& p, S eps) {
  return layer_norm(t, x, t.leaf(p.gain), t.leaf(p.bias), eps);
}

// widths = {in, h1, ..., out}; ReLU after every layer but the last
// (relu_last turns the final activation on too).  Dropout, when active,
// follows each hidden activation.
template <class S>
struct RffParams {
  std::vector<Parameter<S>> weights;
  std::vector<Parameter<S>> biases;
  std::vector<Index> widths;
  bool relu_last = false;

  RffParams() = default;
  RffParams(const std::string& id, std::vector<Index> widths_, bool relu_last_ = false)
      : widths(std::move(widths_)), relu_last(relu_last_) {
    if (widths.size() < 2) throw UsageError("rff: widths needs at least {in, out}");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::string tag = id + ".l" + std::to_string(l);
      weights.emplace_back(tag + ".w", widths[l], widths[l + 1]);
      biases.emplace_back(tag + ".b", 1, widths[l + 1]);
    }
  }

  Index in_dim() const { return widths.front(); }
  Index out_dim() const { return widths.back(); }

  template <class F>
  void visit(F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      f(weights[l]);
      f(biases[l]);
    }
  }
};

template <class S>
Var<S> rff_forward(Tape<S>& t, Var<S> x, RffParams<S>& p, const EvalMode& mode) {
  const auto& X = t.value(x);
  if (X.cols() != p.in_dim()) {
    throw ShapeError("rff: input " + shape_str(X) + " does not match in_dim " +
                     std::to_string(p.in_dim()));
  }
  Var<S> h = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    h = add_rowvec(t, matmul(t, h, t.leaf(p.weights[l])), t.leaf(p.biases[l]));
    const bool last = l + 1 == p.weights.size();
    if (!last || p.relu_last) h = relu(t, h);
    if (!last && mode.training && mode.dropout_rate > 0.0) {
      h = dropout(t, h, mode.dropout_rate, mode.rng, true);
    }
  }
  return h;
}

}  // namespace pf
