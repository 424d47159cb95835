#pragma once

// Point-set geometry: farthest point sampling, ball queries, score-based
// top-k selection, and multi-scale grouping (set abstraction).
//
// Everything here is deterministic and permutation invariant: ties are
// broken by lexicographic comparison of point coordinates, never by row
// index alone, so reordering the input rows reorders nothing that matters.

#include "pointformer/rff.hpp"
#include "pointformer/tape.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pf {

// N x D row-per-point cloud; the first three columns are xyz, columns 3..5
// hold unit normals when D = 6.
template <class S>
struct PointCloud {
  Matrix2D<S> data;

  Index size() const { return data.rows(); }
  Index dim() const { return data.cols(); }
  auto xyz() const { return data.template leftCols<3>(); }
  bool has_normals() const { return data.cols() >= 6; }
  auto normals() const { return data.template middleCols<3>(3); }
};

template <class S>
void require_cloud(const PointCloud<S>& c, const char* what) {
  if (c.size() == 0) throw UsageError(std::string(what) + ": empty point cloud");
  if (c.dim() != 3 && c.dim() != 6) {
    throw UsageError(std::string(what) + ": point dimension must be 3 or 6, got " +
                     std::to_string(c.dim()));
  }
}

// Strict lexicographic (x, y, z) order; the index-free tie-breaker.
template <class S, class RowA, class RowB>
bool lex_less(const RowA& a, const RowB& b) {
  for (int c = 0; c < 3; ++c) {
    if (a(c) < b(c)) return true;
    if (a(c) > b(c)) return false;
  }
  return false;
}

// Farthest point sampling.  Starts at the point nearest the centroid and
// greedily adds the point with the largest distance to the selected set.
// Distance ties fall back to lexicographic coordinate order, so the
// selected point sequence is a function of the point multiset only.
template <class S>
std::vector<Index> fps(const PointCloud<S>& cloud, Index n_prime) {
  require_cloud(cloud, "fps");
  const Index n = cloud.size();
  if (n_prime < 1 || n_prime > n) {
    throw UsageError("fps: n_prime " + std::to_string(n_prime) + " out of range for " +
                     std::to_string(n) + " points");
  }
  const auto xyz = cloud.xyz();

  Eigen::Matrix<S, 1, 3> centroid = xyz.colwise().mean();
  Index start = 0;
  S best = (xyz.row(0) - centroid).squaredNorm();
  for (Index i = 1; i < n; ++i) {
    const S d = (xyz.row(i) - centroid).squaredNorm();
    if (d < best || (d == best && lex_less<S>(xyz.row(i), xyz.row(start)))) {
      best = d;
      start = i;
    }
  }

  std::vector<Index> picked{start};
  std::vector<S> min_d2(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    min_d2[static_cast<std::size_t>(i)] = (xyz.row(i) - xyz.row(start)).squaredNorm();
  }
  while (static_cast<Index>(picked.size()) < n_prime) {
    Index next = 0;
    S far = S(-1);
    for (Index i = 0; i < n; ++i) {
      const S d = min_d2[static_cast<std::size_t>(i)];
      if (d > far || (d == far && lex_less<S>(xyz.row(i), xyz.row(next)))) {
        far = d;
        next = i;
      }
    }
    picked.push_back(next);
    for (Index i = 0; i < n; ++i) {
      const S d = (xyz.row(i) - xyz.row(next)).squaredNorm();
      auto& m = min_d2[static_cast<std::size_t>(i)];
      if (d < m) m = d;
    }
  }
  return picked;
}

// Fixed-width neighborhood around one point.  member_indices always has
// max_k entries; when fewer points fall inside the ball the center index
// is repeated at the tail.  count is the number of real members.
struct Neighborhood {
  Index center_index = 0;
  std::vector<Index> member_indices;
  double radius = 0.0;
  Index count = 0;
};

// Members sorted by ascending distance (center first at distance zero),
// distance ties by lower index, truncated to the max_k nearest.
template <class S>
Neighborhood ball_query(const PointCloud<S>& cloud, Index center, S radius, Index max_k) {
  require_cloud(cloud, "ball_query");
  if (center < 0 || center >= cloud.size()) {
    throw UsageError("ball_query: center " + std::to_string(center) + " out of range");
  }
  if (radius <= S(0)) throw UsageError("ball_query: radius must be positive");
  if (max_k < 1) throw UsageError("ball_query: max_k must be at least 1");
  const auto xyz = cloud.xyz();
  const S r2 = radius * radius;

  std::vector<std::pair<S, Index>> in_ball;
  for (Index i = 0; i < cloud.size(); ++i) {
    if (i == center) continue;
    const S d2 = (xyz.row(i) - xyz.row(center)).squaredNorm();
    if (d2 <= r2) in_ball.emplace_back(d2, i);
  }
  std::sort(in_ball.begin(), in_ball.end());

  Neighborhood nb;
  nb.center_index = center;
  nb.radius = double(radius);
  nb.member_indices.push_back(center);
  for (const auto& [d2, i] : in_ball) {
    if (static_cast<Index>(nb.member_indices.size()) == max_k) break;
    nb.member_indices.push_back(i);
  }
  nb.count = static_cast<Index>(nb.member_indices.size());
  while (static_cast<Index>(nb.member_indices.size()) < max_k) {
    nb.member_indices.push_back(center);
  }
  return nb;
}

// Sorts indices by descending score.  Score ties order by lexicographic
// point coordinates, identical points by index, so the resulting point
// sequence ignores input row order.
template <class S>
void order_by_score(const Vector<S>& scores, const PointCloud<S>& cloud,
                    std::vector<Index>& indices) {
  const auto xyz = cloud.xyz();
  std::sort(indices.begin(), indices.end(), [&](Index a, Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    if (lex_less<S>(xyz.row(a), xyz.row(b))) return true;
    if (lex_less<S>(xyz.row(b), xyz.row(a))) return false;
    return a < b;
  });
}

// Indices of the k highest scores, ordered by descending score.
template <class S>
std::vector<Index> top_k_by_score(const Vector<S>& scores, const PointCloud<S>& cloud, Index k) {
  require_cloud(cloud, "top_k_by_score");
  if (scores.size() != cloud.size()) {
    throw ShapeError("top_k_by_score: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(cloud.size()) + " points");
  }
  if (k < 1 || k > cloud.size()) {
    throw UsageError("top_k_by_score: k " + std::to_string(k) + " out of range");
  }
  std::vector<Index> order(static_cast<std::size_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  order_by_score(scores, cloud, order);
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// Encodes one neighborhood to a single feature row: every member becomes
// [xyz relative to the center | its feature row], the encoder MLP maps each
// member, and a column-wise max pools the group.  Padding rows duplicate
// the center and cannot change the max.
template <class S>
Var<S> group_encode(Tape<S>& t, const PointCloud<S>& cloud, std::optional<Var<S>> features,
                    const Neighborhood& nb, RffParams<S>& encoder, const EvalMode& mode) {
  const auto xyz = cloud.xyz();
  const Index m = static_cast<Index>(nb.member_indices.size());
  Matrix2D<S> rel(m, 3);
  for (Index j = 0; j < m; ++j) {
    rel.row(j) = xyz.row(nb.member_indices[static_cast<std::size_t>(j)]) - xyz.row(nb.center_index);
  }
  Var<S> enc_in = t.constant(std::move(rel));
  if (features) {
    Var<S> gathered = gather_rows(t, *features, nb.member_indices);
    enc_in = concat_cols(t, {enc_in, gathered});
  }
  return colwise_max(t, rff_forward(t, enc_in, encoder, mode));
}

template <class S>
Var<S> group_encode(Tape<S>& t, const PointCloud<S>& cloud, Var<S> features,
                    const Neighborhood& nb, RffParams<S>& encoder, const EvalMode& mode) {
  return group_encode(t, cloud, std::optional<Var<S>>(features), nb, encoder, mode);
}

// Multi-scale grouping set abstraction: FPS picks n_prime centers, each
// scale encodes a ball neighborhood per center, scales concatenate, and a
// final rFF mixes them to d_out features per center.
struct MsgScale {
  double radius = 0.0;
  Index max_samples = 0;
};

template <class S>
struct MsgParams {
  Index n_prime = 0;
  std::vector<MsgScale> scales;
  std::vector<RffParams<S>> encoders;
  RffParams<S> final_rff;

  MsgParams() = default;
  MsgParams(const std::string& id, Index n_prime_, std::vector<MsgScale> scales_, Index d_feat,
            const std::vector<Index>& encoder_hidden, Index scale_out,
            const std::vector<Index>& final_hidden, Index d_out)
      : n_prime(n_prime_), scales(std::move(scales_)) {
    if (scales.empty()) throw UsageError("msg: at least one scale required");
    for (std::size_t s = 0; s < scales.size(); ++s) {
      std::vector<Index> widths{3 + d_feat};
      for (Index w : encoder_hidden) widths.push_back(w);
      widths.push_back(scale_out);
      encoders.emplace_back(id + ".s" + std::to_string(s) + ".enc", std::move(widths), true);
    }
    std::vector<Index> fw{static_cast<Index>(scales.size()) * scale_out};
    for (Index w : final_hidden) fw.push_back(w);
    fw.push_back(d_out);
    final_rff = RffParams<S>(id + ".final", std::move(fw));
  }

  Index d_out() const { return final_rff.out_dim(); }

  template <class F>
  void visit(F&& f) {
    for (auto& e : encoders) e.visit(f);
    final_rff.visit(f);
  }
};

template <class S>
Var<S> set_abstraction_msg(Tape<S>& t, const PointCloud<S>& cloud,
                           std::optional<Var<S>> features, MsgParams<S>& p,
                           const EvalMode& mode) {
  require_cloud(cloud, "set_abstraction_msg");
  if (features && t.value(*features).rows() != cloud.size()) {
    throw ShapeError("set_abstraction_msg: " + std::to_string(t.value(*features).rows()) +
                     " feature rows for " + std::to_string(cloud.size()) + " points");
  }
  const std::vector<Index> centers = fps(cloud, p.n_prime);
  std::vector<Var<S>> per_scale;
  per_scale.reserve(p.scales.size());
  for (std::size_t s = 0; s < p.scales.size(); ++s) {
    std::vector<Var<S>> rows;
    rows.reserve(centers.size());
    for (Index c : centers) {
      const Neighborhood nb = ball_query(cloud, c, S(p.scales[s].radius), p.scales[s].max_samples);
      rows.push_back(group_encode(t, cloud, features, nb, p.encoders[s], mode));
    }
    per_scale.push_back(concat_rows(t, rows));
  }
  return rff_forward(t, concat_cols(t, per_scale), p.final_rff, mode);
}

template <class S>
Var<S> set_abstraction_msg(Tape<S>& t, const PointCloud<S>& cloud, Var<S> features,
                           MsgParams<S>& p, const EvalMode& mode) {
  return set_abstraction_msg(t, cloud, std::optional<Var<S>>(features), p, mode);
}

}  // namespace pf
