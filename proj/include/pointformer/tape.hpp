#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records one forward computation as a sequence of nodes, each
// holding its value and a closure that propagates the node's gradient to
// its inputs.  backward() seeds the (scalar) loss with 1 and replays the
// closures in reverse order.  Leaf nodes bound to a Parameter accumulate
// straight into Parameter::grad, so a fresh tape per sample plus one
// backward() per tape implements minibatch gradient accumulation.
//
// The tape is single-threaded by design: values are stored by index and
// closures capture indices, never pointers into the node vector.
// Parameter leaves alias Parameter::value instead of copying it; the
// parameter must therefore stay alive and unmodified until the tape is
// discarded.

#include "pointformer/matrix.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace pf {

template <class Scalar>
struct Parameter {
  std::string id;
  Matrix2D<Scalar> value;
  Matrix2D<Scalar> grad;  // empty until a gradient is accumulated

  Parameter() = default;
  Parameter(std::string id_, Index rows, Index cols)
      : id(std::move(id_)), value(Matrix2D<Scalar>::Zero(rows, cols)) {}

  void zero_grad() { grad.resize(0, 0); }

  void ensure_grad() {
    if (grad.size() == 0) grad = Matrix2D<Scalar>::Zero(value.rows(), value.cols());
  }
};

template <class Scalar>
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class Scalar>
class Tape {
 public:
  using Mat = Matrix2D<Scalar>;
  // Called with the node's accumulated output gradient.
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Var<Scalar> push(Mat value, BackwardFn backward = nullptr) {
#ifdef PF_CHECK_FINITE
    if (!value.allFinite()) throw UsageError("tape: non-finite value pushed");
#endif
    nodes_.push_back(Node{std::move(value), Mat(), std::move(backward), nullptr});
    return Var<Scalar>{static_cast<int>(nodes_.size()) - 1};
  }

  Var<Scalar> constant(Mat value) { return push(std::move(value)); }

  // Leaf bound to a parameter; the node aliases the parameter's value and
  // gradients flow straight into Parameter::grad.
  Var<Scalar> leaf(Parameter<Scalar>& p) {
    nodes_.push_back(Node{Mat(), Mat(), nullptr, &p});
    return Var<Scalar>{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var<Scalar> v) const {
    const Node& n = node(v);
    return n.param ? n.param->value : n.value;
  }

  bool has_grad(Var<Scalar> v) const {
    const Node& n = node(v);
    return (n.param ? n.param->grad.size() : n.grad.size()) != 0;
  }

  const Mat& grad(Var<Scalar> v) const {
    const Node& n = node(v);
    const Mat& g = n.param ? n.param->grad : n.grad;
    if (g.size() == 0) throw UsageError("tape: no gradient accumulated at node");
    return g;
  }

  template <class Expr>
  void add_grad(Var<Scalar> v, const Expr& g) {
    Node& n = node(v);
    Mat& target = n.param ? n.param->grad : n.grad;
    if (target.size() == 0) {
      const Mat& val = n.param ? n.param->value : n.value;
      target = Mat::Zero(val.rows(), val.cols());
    }
    if (g.rows() != target.rows() || g.cols() != target.cols()) {
      throw ShapeError("tape: gradient shape " + shape_str(g.rows(), g.cols()) +
                       " does not match value shape " + shape_str(target.rows(), target.cols()));
    }
    target += g;
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  // One backward per tape; rerunning would double-count parameter grads.
  void backward(Var<Scalar> loss) {
    if (backward_ran_) throw UsageError("tape: backward already ran on this tape");
    const Mat& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw UsageError("tape: backward needs a 1x1 loss, got " + shape_str(lv));
    }
    backward_ran_ = true;
    add_grad(loss, Mat::Ones(1, 1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    Parameter<Scalar>* param;
  };

  Node& node(Var<Scalar> v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
      throw UsageError("tape: invalid node handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var<Scalar> v) const { return const_cast<Tape*>(this)->node(v); }

  std::vector<Node> nodes_;
  bool backward_ran_ = false;
};

template <class Scalar>
void zero_grads(const std::vector<Parameter<Scalar>*>& params) {
  for (auto* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Primitives.  Each validates shapes, computes the value eagerly, and
// records a closure that adds the input gradients.

template <class S>
Var<S> matmul(Tape<S>& t, Var<S> a, Var<S> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: " + shape_str(A) + " * " + shape_str(B));
  }
  Matrix2D<S> out = A * B;
  return t.push(std::move(out), [a, b](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(a, (g * tt.value(b).transpose()).eval());
    tt.add_grad(b, (tt.value(a).transpose() * g).eval());
  });
}

// a * b^T without materialising the transpose.
template <class S>
Var<S> matmul_nt(Tape<S>& t, Var<S> a, Var<S> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(A) + " * " + shape_str(B) + "^T");
  }
  Matrix2D<S> out = A * B.transpose();
  return t.push(std::move(out), [a, b](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(a, (g * tt.value(b)).eval());
    tt.add_grad(b, (g.transpose() * tt.value(a)).eval());
  });
}

template <class S>
Var<S> add(Tape<S>& t, Var<S> a, Var<S> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw ShapeError("add: " + shape_str(A) + " + " + shape_str(B));
  }
  Matrix2D<S> out = A + B;
  return t.push(std::move(out), [a, b](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(a, g);
    tt.add_grad(b, g);
  });
}

// x + broadcast row vector (bias).
template <class S>
Var<S> add_rowvec(Tape<S>& t, Var<S> x, Var<S> bias) {
  const auto& X = t.value(x);
  const auto& B = t.value(bias);
  if (B.rows() != 1 || B.cols() != X.cols()) {
    throw ShapeError("add_rowvec: " + shape_str(X) + " + " + shape_str(B));
  }
  Matrix2D<S> out = X.rowwise() + B.row(0);
  return t.push(std::move(out), [x, bias](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(x, g);
    tt.add_grad(bias, (Matrix2D<S>)g.colwise().sum());
  });
}

template <class S>
Var<S> scale(Tape<S>& t, Var<S> x, S c) {
  Matrix2D<S> out = c * t.value(x);
  return t.push(std::move(out), [x, c](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(x, (c * g).eval());
  });
}

template <class S>
Var<S> relu(Tape<S>& t, Var<S> x) {
  Matrix2D<S> out = t.value(x).cwiseMax(S(0));
  return t.push(std::move(out), [x](Tape<S>& tt, const Matrix2D<S>& g) {
    Matrix2D<S> gx = (tt.value(x).array() > S(0)).select(g.array(), S(0)).matrix();
    tt.add_grad(x, gx);
  });
}

// Elementwise product with a constant mask (dropout).
template <class S>
Var<S> mul_mask(Tape<S>& t, Var<S> x, Matrix2D<S> mask) {
  const auto& X = t.value(x);
  if (mask.rows() != X.rows() || mask.cols() != X.cols()) {
    throw ShapeError("mul_mask: " + shape_str(X) + " vs mask " + shape_str(mask));
  }
  Matrix2D<S> out = X.cwiseProduct(mask);
  return t.push(std::move(out), [x, mask = std::move(mask)](Tape<S>& tt, const Matrix2D<S>& g) {
    tt.add_grad(x, g.cwiseProduct(mask).eval());
  });
}

// Row-wise softmax, numerically stabilised by the row max.
// d/dx of row r: s_r .* (g_r - <g_r, s_r>).
template <class S>
Var<S> softmax_rows(Tape<S>& t, Var<S> x) {
  const auto& X = t.value(x);
  if (X.size() == 0) throw UsageError("softmax_rows: empty input");
  Matrix2D<S> out(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r) {
    const S m = X.row(r).maxCoeff();
    out.row(r) = (X.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  Var<S> self{static_cast<int>(t.size())};
  return t.push(std::move(out), [x, self](Tape<S>& tt, const Matrix2D<S>& g) {
    const Matrix2D<S>& sm = tt.value(self);
    Vector<S> dots = g.cwiseProduct(sm).rowwise().sum();
    Matrix2D<S> centered = g;
    centered.colwise() -= dots;
    tt.add_grad(x, sm.cwiseProduct(centered).eval());
  });
}

// Row-wise layer normalisation with learned gain and bias (both 1 x C).
template <class S>
Var<S> layer_norm(Tape<S>& t, Var<S> x, Var<S> gain, Var<S> bias, S eps) {
  const auto& X = t.value(x);
  const auto& G = t.value(gain);
  const auto& B = t.value(bias);
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols()) {
    throw ShapeError("layer_norm: x " + shape_str(X) + ", gain " + shape_str(G) + ", bias " +
                     shape_str(B));
  }
  const Index C = X.cols();
  Matrix2D<S> out(X.rows(), C);
  for (Index r = 0; r < X.rows(); ++r) {
    const S mu = X.row(r).mean();
    const S var = (X.row(r).array() - mu).square().sum() / S(C);
    const S inv = S(1) / std::sqrt(var + eps);
    out.row(r) = ((X.row(r).array() - mu) * inv) * G.row(0).array() + B.row(0).array();
  }
  return t.push(std::move(out), [x, gain, bias, eps](Tape<S>& tt, const Matrix2D<S>& g) {
    const Matrix2D<S>& X = tt.value(x);
    const Matrix2D<S>& G = tt.value(gain);
    const Index C = X.cols();
    Matrix2D<S> dx(X.rows(), C);
    Matrix2D<S> dgain = Matrix2D<S>::Zero(1, C);
    for (Index r = 0; r < X.rows(); ++r) {
      const S mu = X.row(r).mean();
      const S var = (X.row(r).array() - mu).square().sum() / S(C);
      const S inv = S(1) / std::sqrt(var + eps);
      Eigen::Array<S, 1, Eigen::Dynamic> xhat = (X.row(r).array() - mu) * inv;
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat = g.row(r).array() * G.row(0).array();
      dgain.row(0).array() += g.row(r).array() * xhat;
      const S m1 = dxhat.mean();
      const S m2 = (dxhat * xhat).mean();
      dx.row(r) = ((dxhat - m1 - xhat * m2) * inv).matrix();
    }
    tt.add_grad(x, dx);
    tt.add_grad(gain, dgain);
    tt.add_grad(bias, (Matrix2D<S>)g.colwise().sum());
  });
}

template <class S>
Var<S> concat_cols(Tape<S>& t, const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const Index rows = t.value(parts[0]).rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (t.value(p).rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(t.value(parts[0])) + " vs " +
                       shape_str(t.value(p)));
    }
    total += t.value(p).cols();
  }
  Matrix2D<S> out(rows, total);
  Index off = 0;
  for (const auto& p : parts) {
    const auto& V = t.value(p);
    out.block(0, off, rows, V.cols()) = V;
    off += V.cols();
  }
  return t.push(std::move(out), [parts](Tape<S>& tt, const Matrix2D<S>& g) {
    Index off = 0;
    for (const auto& p : parts) {
      const Index w = tt.value(p).cols();
      tt.add_grad(p, g.block(0, off, g.rows(), w).eval());
      off += w;
    }
  });
}

template <class S>
Var<S> concat_rows(Tape<S>& t, const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const Index cols = t.value(parts[0]).cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (t.value(p).cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(t.value(parts[0])) + " vs " +
                       shape_str(t.value(p)));
    }
    total += t.value(p).rows();
  }
  Matrix2D<S> out(total, cols);
  Index off = 0;
  for (const auto& p : parts) {
    const auto& V = t.value(p);
    out.block(off, 0, V.rows(), cols) = V;
    off += V.rows();
  }
  return t.push(std::move(out), [parts](Tape<S>& tt, const Matrix2D<S>& g) {
    Index off = 0;
    for (const auto& p : parts) {
      const Index h = tt.value(p).rows();
      tt.add_grad(p, g.block(off, 0, h, g.cols()).eval());
      off += h;
    }
  });
}

// out(j, :) = x(idx[j], :).  Repeated indices accumulate their gradients.
template <class S>
Var<S> gather_rows(Tape<S>& t, Var<S> x, std::vector<Index> idx) {
  const auto& X = t.value(x);
  for (Index i : idx) {
    if (i < 0 || i >= X.rows()) {
      throw UsageError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       shape_str(X));
    }
  }
  Matrix2D<S> out(static_cast<Index>(idx.size()), X.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) out.row(static_cast<Index>(j)) = X.row(idx[j]);
  return t.push(std::move(out), [x, idx = std::move(idx)](Tape<S>& tt, const Matrix2D<S>& g) {
    const auto& X = tt.value(x);
    Matrix2D<S> gx = Matrix2D<S>::Zero(X.rows(), X.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) gx.row(idx[j]) += g.row(static_cast<Index>(j));
    tt.add_grad(x, gx);
  });
}

// Column-wise max over rows -> 1 x C.  Gradient goes to the first argmax.
template <class S>
Var<S> colwise_max(Tape<S>& t, Var<S> x) {
  const auto& X = t.value(x);
  if (X.rows() == 0) throw UsageError("colwise_max: empty input");
  Matrix2D<S> out(1, X.cols());
  std::vector<Index> arg(static_cast<std::size_t>(X.cols()));
  for (Index c = 0; c < X.cols(); ++c) {
    Index best = 0;
    for (Index r = 1; r < X.rows(); ++r) {
      if (X(r, c) > X(best, c)) best = r;
    }
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = X(best, c);
  }
  return t.push(std::move(out), [x, arg = std::move(arg)](Tape<S>& tt, const Matrix2D<S>& g) {
    const auto& X = tt.value(x);
    Matrix2D<S> gx = Matrix2D<S>::Zero(X.rows(), X.cols());
    for (Index c = 0; c < X.cols(); ++c) gx(arg[static_cast<std::size_t>(c)], c) = g(0, c);
    tt.add_grad(x, gx);
  });
}

template <class S>
Var<S> sum_all(Tape<S>& t, Var<S> x) {
  Matrix2D<S> out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.push(std::move(out), [x](Tape<S>& tt, const Matrix2D<S>& g) {
    const auto& X = tt.value(x);
    tt.add_grad(x, (Matrix2D<S>::Constant(X.rows(), X.cols(), g(0, 0))).eval());
  });
}

template <class S>
Var<S> mean_all(Tape<S>& t, Var<S> x) {
  const auto& X = t.value(x);
  if (X.size() == 0) throw UsageError("mean_all: empty input");
  Matrix2D<S> out(1, 1);
  out(0, 0) = X.mean();
  return t.push(std::move(out), [x](Tape<S>& tt, const Matrix2D<S>& g) {
    const auto& X = tt.value(x);
    const S c = g(0, 0) / S(X.size());
    tt.add_grad(x, (Matrix2D<S>::Constant(X.rows(), X.cols(), c)).eval());
  });
}

// Row-major flatten to 1 x (rows*cols).
template <class S>
Var<S> flatten_rows(Tape<S>& t, Var<S> x) {
  const auto& X = t.value(x);
  Matrix2D<S> out(1, X.size());
  Index k = 0;
  for (Index r = 0; r < X.rows(); ++r) {
    for (Index c = 0; c < X.cols(); ++c) out(0, k++) = X(r, c);
  }
  return t.push(std::move(out), [x](Tape<S>& tt, const Matrix2D<S>& g) {
    const auto& X = tt.value(x);
    Matrix2D<S> gx(X.rows(), X.cols());
    Index k = 0;
    for (Index r = 0; r < X.rows(); ++r) {
      for (Index c = 0; c < X.cols(); ++c) gx(r, c) = g(0, k++);
    }
    tt.add_grad(x, gx);
  });
}

}  // namespace pf
