#pragma once

// Scaled dot-product attention, multi-head attention, and the residual
// attention block used throughout the model:
//
//   S   = LayerNorm(x + Multihead(x, y, y))
//   out = LayerNorm(S' + rFF(S)),   S' = S (or S * P when the block narrows)
//
// self_mha feeds x as both query and key/value set; cross_mha attends from
// x into a second set y.  All projections are bias-free.

#include "pointformer/rff.hpp"
#include "pointformer/tape.hpp"

#include <string>
#include <vector>

namespace pf {

// softmax(q k^T / sqrt(d_k)) v
template <class S>
Var<S> attention(Tape<S>& t, Var<S> q, Var<S> k, Var<S> v) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  const auto& V = t.value(v);
  if (Q.cols() != K.cols()) {
    throw ShapeError("attention: q " + shape_str(Q) + " vs k " + shape_str(K));
  }
  if (K.rows() != V.rows()) {
    throw ShapeError("attention: k " + shape_str(K) + " vs v " + shape_str(V));
  }
  if (K.rows() == 0) throw UsageError("attention: empty key set");
  const S inv_sqrt_dk = S(1) / std::sqrt(S(Q.cols()));
  Var<S> weights = softmax_rows(t, scale(t, matmul_nt(t, q, k), inv_sqrt_dk));
  return matmul(t, weights, v);
}

template <class S>
struct MultiheadParams {
  std::vector<Parameter<S>> wq, wk, wv;
  Parameter<S> wo;
  Index d_model = 0;
  Index heads = 0;

  MultiheadParams() = default;
  MultiheadParams(const std::string& id, Index d_model_, Index heads_)
      : d_model(d_model_), heads(heads_) {
    if (heads <= 0 || d_model <= 0 || d_model % heads != 0) {
      throw UsageError("multihead: heads must divide d_model (" + std::to_string(d_model_) + "/" +
                       std::to_string(heads_) + ")");
    }
    const Index dk = d_model / heads;
    for (Index h = 0; h < heads; ++h) {
      const std::string tag = id + ".h" + std::to_string(h);
      wq.emplace_back(tag + ".wq", d_model, dk);
      wk.emplace_back(tag + ".wk", d_model, dk);
      wv.emplace_back(tag + ".wv", d_model, dk);
    }
    wo = Parameter<S>(id + ".wo", d_model, d_model);
  }

  template <class F>
  void visit(F&& f) {
    for (Index h = 0; h < heads; ++h) {
      f(wq[static_cast<std::size_t>(h)]);
      f(wk[static_cast<std::size_t>(h)]);
      f(wv[static_cast<std::size_t>(h)]);
    }
    f(wo);
  }
};

// Heads attend independently on projected slices, outputs concatenate and
// mix through wo.  x_q supplies queries, x_kv keys and values.
template <class S>
Var<S> multihead(Tape<S>& t, Var<S> x_q, Var<S> x_kv, MultiheadParams<S>& p) {
  const auto& XQ = t.value(x_q);
  const auto& XK = t.value(x_kv);
  if (XQ.cols() != p.d_model || XK.cols() != p.d_model) {
    throw ShapeError("multihead: inputs " + shape_str(XQ) + ", " + shape_str(XK) +
                     " vs d_model " + std::to_string(p.d_model));
  }
  std::vector<Var<S>> heads;
  heads.reserve(static_cast<std::size_t>(p.heads));
  for (Index h = 0; h < p.heads; ++h) {
    const auto hi = static_cast<std::size_t>(h);
    Var<S> q = matmul(t, x_q, t.leaf(p.wq[hi]));
    Var<S> k = matmul(t, x_kv, t.leaf(p.wk[hi]));
    Var<S> v = matmul(t, x_kv, t.leaf(p.wv[hi]));
    heads.push_back(attention(t, q, k, v));
  }
  return matmul(t, concat_cols(t, heads), t.leaf(p.wo));
}

template <class S>
struct MhaBlockParams {
  MultiheadParams<S> mh;
  LayerNormParams<S> ln1;
  RffParams<S> rff;
  Parameter<S> residual_proj;  // only allocated when d_out != d_model
  LayerNormParams<S> ln2;
  Index d_out = 0;

  MhaBlockParams() = default;
  MhaBlockParams(const std::string& id, Index d_model, Index heads, std::vector<Index> rff_hidden,
                 Index d_out_ = 0)
      : mh(id + ".mh", d_model, heads), ln1(id + ".ln1", d_model),
        d_out(d_out_ == 0 ? d_model : d_out_) {
    std::vector<Index> widths;
    widths.push_back(d_model);
    for (Index w : rff_hidden) widths.push_back(w);
    widths.push_back(d_out);
    rff = RffParams<S>(id + ".rff", std::move(widths));
    if (d_out != d_model) residual_proj = Parameter<S>(id + ".proj", d_model, d_out);
    ln2 = LayerNormParams<S>(id + ".ln2", d_out);
  }

  template <class F>
  void visit(F&& f) {
    mh.visit(f);
    ln1.visit(f);
    rff.visit(f);
    if (residual_proj.value.size() != 0) f(residual_proj);
    ln2.visit(f);
  }
};

template <class S>
Var<S> mha_block(Tape<S>& t, Var<S> x, Var<S> y, MhaBlockParams<S>& p, S eps,
                 const EvalMode& mode) {
  Var<S> s = layer_norm(t, add(t, x, multihead(t, x, y, p.mh)), p.ln1, eps);
  Var<S> r = rff_forward(t, s, p.rff, mode);
  Var<S> res = s;
  if (p.residual_proj.value.size() != 0) res = matmul(t, s, t.leaf(p.residual_proj));
  return layer_norm(t, add(t, res, r), p.ln2, eps);
}

template <class S>
Var<S> self_mha(Tape<S>& t, Var<S> x, MhaBlockParams<S>& p, S eps, const EvalMode& mode) {
  return mha_block(t, x, x, p, eps, mode);
}

template <class S>
Var<S> cross_mha(Tape<S>& t, Var<S> x, Var<S> y, MhaBlockParams<S>& p, S eps,
                 const EvalMode& mode) {
  return mha_block(t, x, y, p, eps, mode);
}

}  // namespace pf
