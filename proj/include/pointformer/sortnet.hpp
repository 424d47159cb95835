#pragma once

// SortNet: learned selection of the k most task-relevant points.
//
// A self-attention block contextualises the per-point features, a scoring
// rFF maps each point to a scalar, and the k best-scoring points are kept,
// ordered by descending score.  Each kept point emits the row
//
//   [ point (D) | its score (1) | ball-neighborhood encoding (d_m - 1 - D) ]
//
// so the output is k x d_m.  Selection is hard; gradients reach the scorer
// through the selected score values and the downstream consumers of the
// rows (straight-through over the top-k cut).
//
// The selection strategy is swappable so learned scoring can be compared
// against farthest point sampling and seeded random choice.

#include "pointformer/attention.hpp"
#include "pointformer/geometry.hpp"
#include "pointformer/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace pf {

enum class SelectionMode { learned, fps, random };

inline const char* to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::learned: return "learned";
    case SelectionMode::fps: return "fps";
    case SelectionMode::random: return "random";
  }
  return "?";
}

template <class S>
struct SortNetParams {
  MhaBlockParams<S> self_block;
  RffParams<S> score_rff;
  RffParams<S> encoder;
  Index k = 0;
  double ball_radius = 0.0;
  Index ball_max_k = 0;
  Index point_dim = 0;

  SortNetParams() = default;
  SortNetParams(const std::string& id, Index d_model, Index heads, Index k_, Index point_dim_,
                double ball_radius_, Index ball_max_k_, const std::vector<Index>& rff_hidden,
                const std::vector<Index>& score_hidden, const std::vector<Index>& encoder_hidden)
      : self_block(id + ".self", d_model, heads, rff_hidden),
        k(k_),
        ball_radius(ball_radius_),
        ball_max_k(ball_max_k_),
        point_dim(point_dim_) {
    const Index g_dim = d_model - 1 - point_dim;
    if (g_dim < 1) {
      throw UsageError("sortnet: d_model " + std::to_string(d_model) +
                       " must exceed point_dim + 1 = " + std::to_string(point_dim + 1));
    }
    if (k < 1) throw UsageError("sortnet: k must be at least 1");
    std::vector<Index> sw{d_model};
    for (Index w : score_hidden) sw.push_back(w);
    sw.push_back(1);
    score_rff = RffParams<S>(id + ".score", std::move(sw));
    std::vector<Index> ew{3 + point_dim};
    for (Index w : encoder_hidden) ew.push_back(w);
    ew.push_back(g_dim);
    encoder = RffParams<S>(id + ".enc", std::move(ew), true);
  }

  template <class F>
  void visit(F&& f) {
    self_block.visit(f);
    score_rff.visit(f);
    encoder.visit(f);
  }
};

template <class S>
struct SortNetOut {
  Var<S> rows;                  // k x d_model
  std::vector<Index> selected;  // descending score order
};

template <class S>
SortNetOut<S> sortnet_forward(Tape<S>& t, const PointCloud<S>& cloud, Var<S> x,
                              SortNetParams<S>& p, S eps, const EvalMode& mode,
                              SelectionMode selection = SelectionMode::learned,
                              RngStream* rng = nullptr) {
  require_cloud(cloud, "sortnet");
  if (cloud.dim() != p.point_dim) {
    throw ShapeError("sortnet: cloud dim " + std::to_string(cloud.dim()) + " vs configured " +
                     std::to_string(p.point_dim));
  }
  if (t.value(x).rows() != cloud.size()) {
    throw ShapeError("sortnet: " + std::to_string(t.value(x).rows()) + " feature rows for " +
                     std::to_string(cloud.size()) + " points");
  }
  if (p.k > cloud.size()) {
    throw UsageError("sortnet: k " + std::to_string(p.k) + " exceeds cloud size " +
                     std::to_string(cloud.size()));
  }

  Var<S> h = self_mha(t, x, p.self_block, eps, mode);
  Var<S> score = rff_forward(t, h, p.score_rff, mode);
  const Vector<S> score_values = t.value(score).col(0);

  std::vector<Index> sel;
  switch (selection) {
    case SelectionMode::learned:
      sel = top_k_by_score(score_values, cloud, p.k);
      break;
    case SelectionMode::fps:
      sel = fps(cloud, p.k);
      order_by_score(score_values, cloud, sel);
      break;
    case SelectionMode::random: {
      if (rng == nullptr) throw UsageError("sortnet: random selection needs an rng");
      std::vector<Index> all(static_cast<std::size_t>(cloud.size()));
      for (Index i = 0; i < cloud.size(); ++i) all[static_cast<std::size_t>(i)] = i;
      for (Index i = 0; i < p.k; ++i) {
        const Index j = i + static_cast<Index>(rng->uniform_index(
                                static_cast<std::uint64_t>(cloud.size() - i)));
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      }
      all.resize(static_cast<std::size_t>(p.k));
      sel = std::move(all);
      order_by_score(score_values, cloud, sel);
      break;
    }
  }

  Var<S> sel_scores = gather_rows(t, score, sel);

  Matrix2D<S> sel_points(p.k, cloud.dim());
  for (Index i = 0; i < p.k; ++i) {
    sel_points.row(i) = cloud.data.row(sel[static_cast<std::size_t>(i)]);
  }

  std::optional<Var<S>> raw = t.constant(cloud.data);
  std::vector<Var<S>> g_rows;
  g_rows.reserve(sel.size());
  for (Index i : sel) {
    const Neighborhood nb = ball_query(cloud, i, S(p.ball_radius), p.ball_max_k);
    g_rows.push_back(group_encode(t, cloud, raw, nb, p.encoder, mode));
  }
  Var<S> g = concat_rows(t, g_rows);

  SortNetOut<S> out;
  out.rows = concat_cols<S>(t, {t.constant(std::move(sel_points)), sel_scores, g});
  out.selected = std::move(sel);
  return out;
}

template <class S>
struct MultiSortNetOut {
  Var<S> rows;  // (M * k) x d_model
  std::vector<std::vector<Index>> selections;
};

// M parallel SortNets over the same input features; outputs stack row-wise.
template <class S>
MultiSortNetOut<S> multi_sortnet(Tape<S>& t, const PointCloud<S>& cloud, Var<S> x,
                                 std::vector<SortNetParams<S>>& nets, S eps, const EvalMode& mode,
                                 SelectionMode selection = SelectionMode::learned,
                                 RngStream* rng = nullptr) {
  if (nets.empty()) throw UsageError("multi_sortnet: no nets");
  MultiSortNetOut<S> out;
  std::vector<Var<S>> parts;
  parts.reserve(nets.size());
  for (auto& net : nets) {
    auto one = sortnet_forward(t, cloud, x, net, eps, mode, selection, rng);
    parts.push_back(one.rows);
    out.selections.push_back(std::move(one.selected));
  }
  out.rows = concat_rows(t, parts);
  return out;
}

}  // namespace pf
