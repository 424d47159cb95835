#pragma once

// Full model assembly.
//
// Local branch:  input rFF -> self-attention block(s) -> M SortNets
//                -> (M*K) x d_model ordered rows.
// Global branch: multi-scale grouping over FPS centers -> self-attention
//                block(s) -> N' x d_model rows.
// The two meet in a local-global stack: per repetition, self-attention on
// each branch then cross-attention from local into global; the final cross
// block narrows to d_reduced.  The classification head flattens the result
// into one fully connected stack; the segmentation head cross-attends
// per-point features against the local-global rows and maps each point to
// part logits.

#include "pointformer/attention.hpp"
#include "pointformer/geometry.hpp"
#include "pointformer/rng.hpp"
#include "pointformer/sortnet.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace pf {

enum class Task { classification, segmentation };

inline const char* to_string(Task t) {
  return t == Task::classification ? "classification" : "segmentation";
}

// How the global branch builds its feature set: multi-scale grouping
// around FPS centers, plain FPS centers, or every input point (no
// sampling at all).
enum class GlobalMode { msg = 0, fps = 1, nosample = 2 };

inline const char* to_string(GlobalMode m) {
  switch (m) {
    case GlobalMode::msg: return "msg";
    case GlobalMode::fps: return "fps";
    case GlobalMode::nosample: return "nosample";
  }
  return "?";
}

struct ModelConfig {
  Task task = Task::classification;
  Index n_points = 256;   // expected cloud size (data pipeline target)
  Index point_dim = 6;    // D: 3 (xyz) or 6 (xyz + normals)
  Index d_model = 64;     // width of both branches
  Index d_reduced = 32;   // output width of the local-global stack
  Index d_seg = 32;       // per-point width for segmentation (= d_reduced)
  Index heads = 4;
  Index num_sortnets = 2;  // M
  Index k_selected = 32;   // K points kept per SortNet
  Index n_global = 32;     // N' FPS centers in the global branch
  Index num_classes = 4;   // C (classes or parts)
  Index num_categories = 16;
  GlobalMode global_mode = GlobalMode::msg;
  bool local_only = false;  // selection branch straight into the head
  Index lg_layers = 2;
  Index local_layers = 1;
  Index global_layers = 1;
  double sortnet_radius = 0.2;
  Index sortnet_ball_k = 16;
  std::vector<double> msg_radii{0.1, 0.2, 0.4};
  std::vector<Index> msg_samples{16, 32, 64};
  Index msg_scale_out = 0;  // 0 resolves to d_model / 4
  std::vector<Index> input_rff_hidden;
  std::vector<Index> global_input_rff_hidden;
  std::vector<Index> block_rff_hidden;
  std::vector<Index> score_hidden;
  std::vector<Index> sortnet_encoder_hidden;
  std::vector<Index> msg_encoder_hidden;
  std::vector<Index> msg_final_hidden;
  std::vector<Index> head_hidden;
  std::vector<Index> seg_rff_hidden;
  std::vector<Index> seg_head_hidden;
  double ln_eps = 1e-5;
  double dropout = 0.0;
};

// Fills derived defaults (empty widths) without touching explicit values.
inline ModelConfig resolve(ModelConfig cfg) {
  if (cfg.msg_scale_out == 0) cfg.msg_scale_out = std::max<Index>(cfg.d_model / 4, 4);
  if (cfg.input_rff_hidden.empty()) cfg.input_rff_hidden = {cfg.d_model / 2};
  if (cfg.global_input_rff_hidden.empty()) cfg.global_input_rff_hidden = {cfg.d_model / 2};
  if (cfg.block_rff_hidden.empty()) cfg.block_rff_hidden = {2 * cfg.d_model};
  if (cfg.sortnet_encoder_hidden.empty()) cfg.sortnet_encoder_hidden = {cfg.d_model / 2};
  if (cfg.msg_encoder_hidden.empty()) cfg.msg_encoder_hidden = {std::max<Index>(cfg.d_model / 4, 4)};
  if (cfg.head_hidden.empty()) cfg.head_hidden = {256, 128};
  if (cfg.seg_rff_hidden.empty()) cfg.seg_rff_hidden = {cfg.d_model / 2};
  if (cfg.seg_head_hidden.empty()) cfg.seg_head_hidden = {128};
  return cfg;
}

inline void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (cfg.local_only && cfg.task != Task::classification) {
    fail("local_only requires the classification task");
  }
  if (cfg.point_dim != 3 && cfg.point_dim != 6) fail("point_dim must be 3 or 6");
  if (cfg.d_model < cfg.point_dim + 2) fail("d_model must exceed point_dim + 1");
  if (cfg.heads < 1 || cfg.d_model % cfg.heads != 0) fail("heads must divide d_model");
  if (cfg.d_reduced < 1) fail("d_reduced must be positive");
  if (cfg.num_sortnets < 1) fail("num_sortnets must be at least 1");
  if (cfg.k_selected < 1) fail("k_selected must be at least 1");
  if (cfg.n_global < 1) fail("n_global must be at least 1");
  if (cfg.num_classes < 2) fail("num_classes must be at least 2");
  if (cfg.lg_layers < 1) fail("lg_layers must be at least 1");
  if (cfg.local_layers < 0 || cfg.global_layers < 0) fail("layer counts must be non-negative");
  if (cfg.sortnet_radius <= 0.0) fail("sortnet_radius must be positive");
  if (cfg.sortnet_ball_k < 1) fail("sortnet_ball_k must be at least 1");
  if (cfg.msg_radii.empty() || cfg.msg_radii.size() != cfg.msg_samples.size()) {
    fail("msg_radii and msg_samples must be non-empty and the same length");
  }
  for (double r : cfg.msg_radii) {
    if (r <= 0.0) fail("msg radii must be positive");
  }
  for (Index s : cfg.msg_samples) {
    if (s < 1) fail("msg sample counts must be at least 1");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (cfg.ln_eps <= 0.0) fail("ln_eps must be positive");
  if (cfg.task == Task::segmentation) {
    if (cfg.d_seg != cfg.d_reduced) fail("d_seg must equal d_reduced");
    if (cfg.heads > cfg.d_seg || cfg.d_seg % cfg.heads != 0) fail("heads must divide d_seg");
    if (cfg.num_categories < 1) fail("num_categories must be at least 1");
  }
}

template <class S>
struct ModelParams {
  ModelConfig cfg;  // resolved
  RffParams<S> input_rff;
  std::vector<MhaBlockParams<S>> local_blocks;
  std::vector<SortNetParams<S>> sortnets;
  std::optional<MsgParams<S>> msg;                  // global_mode == msg
  std::optional<RffParams<S>> global_input_rff;     // global_mode == fps | nosample
  std::vector<MhaBlockParams<S>> global_blocks;
  std::vector<MhaBlockParams<S>> lg_self_local;
  std::vector<MhaBlockParams<S>> lg_self_global;
  std::vector<MhaBlockParams<S>> lg_cross;
  RffParams<S> head;
  RffParams<S> seg_input_rff;
  std::vector<MhaBlockParams<S>> seg_blocks;
  MhaBlockParams<S> seg_cross;
  RffParams<S> seg_head;

  ModelParams() = default;

  explicit ModelParams(const ModelConfig& raw) : cfg(resolve(raw)) {
    validate(cfg);
    const Index d = cfg.d_model;

    std::vector<Index> iw{cfg.point_dim};
    for (Index w : cfg.input_rff_hidden) iw.push_back(w);
    iw.push_back(d);
    input_rff = RffParams<S>("input_rff", std::move(iw), true);

    for (Index l = 0; l < cfg.local_layers; ++l) {
      local_blocks.emplace_back("local.b" + std::to_string(l), d, cfg.heads,
                                cfg.block_rff_hidden);
    }
    for (Index m = 0; m < cfg.num_sortnets; ++m) {
      sortnets.emplace_back("sortnet" + std::to_string(m), d, cfg.heads, cfg.k_selected,
                            cfg.point_dim, cfg.sortnet_radius, cfg.sortnet_ball_k,
                            cfg.block_rff_hidden, cfg.score_hidden, cfg.sortnet_encoder_hidden);
    }

    const Index global_feat = cfg.task == Task::segmentation ? cfg.d_seg : cfg.point_dim - 3;
    if (!cfg.local_only) {
      if (cfg.global_mode == GlobalMode::msg) {
        std::vector<MsgScale> scales;
        for (std::size_t s = 0; s < cfg.msg_radii.size(); ++s) {
          scales.push_back({cfg.msg_radii[s], cfg.msg_samples[s]});
        }
        msg = MsgParams<S>("msg", cfg.n_global, std::move(scales), global_feat,
                           cfg.msg_encoder_hidden, cfg.msg_scale_out, cfg.msg_final_hidden, d);
      } else {
        std::vector<Index> gw{3 + global_feat};
        for (Index w : cfg.global_input_rff_hidden) gw.push_back(w);
        gw.push_back(d);
        global_input_rff = RffParams<S>("global.input_rff", std::move(gw), true);
      }

      for (Index l = 0; l < cfg.global_layers; ++l) {
        global_blocks.emplace_back("global.b" + std::to_string(l), d, cfg.heads,
                                   cfg.block_rff_hidden);
      }
      for (Index l = 0; l < cfg.lg_layers; ++l) {
        const std::string tag = ".r" + std::to_string(l);
        lg_self_local.emplace_back("lg.self_local" + tag, d, cfg.heads, cfg.block_rff_hidden);
        lg_self_global.emplace_back("lg.self_global" + tag, d, cfg.heads, cfg.block_rff_hidden);
        const bool last = l + 1 == cfg.lg_layers;
        lg_cross.emplace_back("lg.cross" + tag, d, cfg.heads, cfg.block_rff_hidden,
                              last ? cfg.d_reduced : Index(0));
      }
    }

    if (cfg.task == Task::classification) {
      const Index row_dim = cfg.local_only ? d : cfg.d_reduced;
      std::vector<Index> hw{cfg.num_sortnets * cfg.k_selected * row_dim};
      for (Index w : cfg.head_hidden) hw.push_back(w);
      hw.push_back(cfg.num_classes);
      head = RffParams<S>("head", std::move(hw));
    } else {
      std::vector<Index> sw{cfg.point_dim + cfg.num_categories};
      for (Index w : cfg.seg_rff_hidden) sw.push_back(w);
      sw.push_back(cfg.d_seg);
      seg_input_rff = RffParams<S>("seg.input_rff", std::move(sw), true);
      seg_blocks.emplace_back("seg.b0", cfg.d_seg, cfg.heads, cfg.block_rff_hidden);
      seg_cross = MhaBlockParams<S>("seg.cross", cfg.d_seg, cfg.heads, cfg.block_rff_hidden);
      std::vector<Index> hw{cfg.d_seg};
      for (Index w : cfg.seg_head_hidden) hw.push_back(w);
      hw.push_back(cfg.num_classes);
      seg_head = RffParams<S>("seg.head", std::move(hw));
    }
  }

  // Single source of parameter order for init, optimizers, checkpoints and
  // gradient checks.
  template <class F>
  void visit(F&& f) {
    input_rff.visit(f);
    for (auto& b : local_blocks) b.visit(f);
    for (auto& s : sortnets) s.visit(f);
    if (msg) msg->visit(f);
    if (global_input_rff) global_input_rff->visit(f);
    for (auto& b : global_blocks) b.visit(f);
    for (Index l = 0; l < static_cast<Index>(lg_cross.size()); ++l) {
      lg_self_local[static_cast<std::size_t>(l)].visit(f);
      lg_self_global[static_cast<std::size_t>(l)].visit(f);
      lg_cross[static_cast<std::size_t>(l)].visit(f);
    }
    if (cfg.task == Task::classification) {
      head.visit(f);
    } else {
      seg_input_rff.visit(f);
      for (auto& b : seg_blocks) b.visit(f);
      seg_cross.visit(f);
      seg_head.visit(f);
    }
  }

  std::vector<Parameter<S>*> parameter_list() {
    std::vector<Parameter<S>*> out;
    visit([&](Parameter<S>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](Parameter<S>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }
};

inline bool id_is_gain_or_bias(const std::string& id) {
  auto ends_with = [&](const char* suf) {
    const std::size_t n = std::string(suf).size();
    return id.size() >= n && id.compare(id.size() - n, n, suf) == 0;
  };
  return ends_with(".gain") || ends_with(".bias") || ends_with(".b");
}

// Weight matrices get Kaiming-normal entries (std = sqrt(2 / fan_in));
// biases stay zero, layer-norm gains stay one.
template <class S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<S> params(cfg);
  RngStream rng(derive_seed(seed, 0x1417u));
  params.visit([&](Parameter<S>& p) {
    if (id_is_gain_or_bias(p.id)) return;
    const double std_dev = std::sqrt(2.0 / double(p.value.rows()));
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = S(std_dev * rng.gaussian());
    }
  });
  return params;
}

// ---------------------------------------------------------------------------
// Forward passes.

template <class S>
struct BranchOut {
  Var<S> rows;
  std::vector<std::vector<Index>> selections;
};

template <class S>
BranchOut<S> local_branch(Tape<S>& t, const PointCloud<S>& cloud, ModelParams<S>& p,
                          const EvalMode& mode, SelectionMode sel = SelectionMode::learned,
                          RngStream* sel_rng = nullptr) {
  Var<S> x = rff_forward(t, t.constant(cloud.data), p.input_rff, mode);
  const S eps = S(p.cfg.ln_eps);
  for (auto& b : p.local_blocks) x = self_mha(t, x, b, eps, mode);
  auto ms = multi_sortnet(t, cloud, x, p.sortnets, eps, mode, sel, sel_rng);
  return BranchOut<S>{ms.rows, std::move(ms.selections)};
}

template <class S>
Var<S> global_branch(Tape<S>& t, const PointCloud<S>& cloud, std::optional<Var<S>> features,
                     ModelParams<S>& p, const EvalMode& mode) {
  Var<S> g = [&] {
    if (p.cfg.global_mode == GlobalMode::msg) {
      return set_abstraction_msg(t, cloud, features, *p.msg, mode);
    }
    Var<S> enc_in = t.constant(Matrix2D<S>(cloud.xyz()));
    if (features) enc_in = concat_cols(t, std::vector<Var<S>>{enc_in, *features});
    Var<S> enc = rff_forward(t, enc_in, *p.global_input_rff, mode);
    if (p.cfg.global_mode == GlobalMode::fps) {
      enc = gather_rows(t, enc, fps(cloud, p.cfg.n_global));
    }
    return enc;
  }();
  const S eps = S(p.cfg.ln_eps);
  for (auto& b : p.global_blocks) g = self_mha(t, g, b, eps, mode);
  return g;
}

// Interleaved self/self/cross stack; the final repetition narrows the
// local rows to d_reduced.
template <class S>
Var<S> local_global_attention(Tape<S>& t, Var<S> f_local, Var<S> f_global, ModelParams<S>& p,
                              const EvalMode& mode) {
  const S eps = S(p.cfg.ln_eps);
  Var<S> l = f_local;
  Var<S> g = f_global;
  for (std::size_t r = 0; r < p.lg_cross.size(); ++r) {
    l = self_mha(t, l, p.lg_self_local[r], eps, mode);
    g = self_mha(t, g, p.lg_self_global[r], eps, mode);
    l = cross_mha(t, l, g, p.lg_cross[r], eps, mode);
  }
  return l;
}

template <class S>
std::optional<Var<S>> raw_global_features(Tape<S>& t, const PointCloud<S>& cloud) {
  if (!cloud.has_normals()) return std::nullopt;
  return t.constant((Matrix2D<S>)cloud.normals());
}

template <class S>
struct ForwardOut {
  Var<S> logits;  // 1 x C (classification) or N x C (segmentation)
  std::vector<std::vector<Index>> selections;
};

template <class S>
ForwardOut<S> classify_forward(Tape<S>& t, const PointCloud<S>& cloud, ModelParams<S>& p,
                               const EvalMode& mode, SelectionMode sel = SelectionMode::learned,
                               RngStream* sel_rng = nullptr) {
  if (p.cfg.task != Task::classification) {
    throw UsageError("classify_forward: model is configured for segmentation");
  }
  require_cloud(cloud, "classify_forward");
  if (cloud.dim() != p.cfg.point_dim) {
    throw ShapeError("classify_forward: cloud dim " + std::to_string(cloud.dim()) +
                     " vs configured " + std::to_string(p.cfg.point_dim));
  }
  auto local = local_branch(t, cloud, p, mode, sel, sel_rng);
  Var<S> features = local.rows;
  if (!p.cfg.local_only) {
    Var<S> g = global_branch(t, cloud, raw_global_features(t, cloud), p, mode);
    features = local_global_attention(t, local.rows, g, p, mode);
  }
  Var<S> logits = rff_forward(t, flatten_rows(t, features), p.head, mode);
  return ForwardOut<S>{logits, std::move(local.selections)};
}

template <class S>
ForwardOut<S> segment_forward(Tape<S>& t, const PointCloud<S>& cloud, Index category,
                              ModelParams<S>& p, const EvalMode& mode,
                              SelectionMode sel = SelectionMode::learned,
                              RngStream* sel_rng = nullptr) {
  if (p.cfg.task != Task::segmentation) {
    throw UsageError("segment_forward: model is configured for classification");
  }
  require_cloud(cloud, "segment_forward");
  if (cloud.dim() != p.cfg.point_dim) {
    throw ShapeError("segment_forward: cloud dim " + std::to_string(cloud.dim()) +
                     " vs configured " + std::to_string(p.cfg.point_dim));
  }
  if (category < 0 || category >= p.cfg.num_categories) {
    throw UsageError("segment_forward: category " + std::to_string(category) + " not in [0, " +
                     std::to_string(p.cfg.num_categories) + ")");
  }
  const S eps = S(p.cfg.ln_eps);
  const Index n = cloud.size();

  Matrix2D<S> seg_in(n, cloud.dim() + p.cfg.num_categories);
  seg_in.leftCols(cloud.dim()) = cloud.data;
  seg_in.rightCols(p.cfg.num_categories).setZero();
  seg_in.col(cloud.dim() + category).setOnes();
  Var<S> per_point = rff_forward(t, t.constant(std::move(seg_in)), p.seg_input_rff, mode);
  for (auto& b : p.seg_blocks) per_point = self_mha(t, per_point, b, eps, mode);

  auto local = local_branch(t, cloud, p, mode, sel, sel_rng);
  Var<S> g = global_branch(t, cloud, std::optional<Var<S>>(per_point), p, mode);
  Var<S> lg = local_global_attention(t, local.rows, g, p, mode);

  Var<S> crossed = cross_mha(t, per_point, lg, p.seg_cross, eps, mode);
  Var<S> logits = rff_forward(t, crossed, p.seg_head, mode);
  return ForwardOut<S>{logits, std::move(local.selections)};
}

template <class S>
Index argmax_row(const Matrix2D<S>& m, Index row) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c) {
    if (m(row, c) > m(row, best)) best = c;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PTFM" magic, version, the full config, then every
// parameter (id, shape, row-major doubles) in visit order.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_i64(std::ostream& os, std::int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_ivec(std::ostream& os, const std::vector<Index>& v) {
  write_u64(os, v.size());
  for (Index x : v) write_i64(os, x);
}
inline void write_dvec(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double x : v) write_f64(os, x);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}
inline std::int64_t read_i64(std::istream& is) {
  std::int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}
inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}
inline std::vector<Index> read_ivec(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1u << 20)) throw DataError("checkpoint: implausible vector length");
  std::vector<Index> v(n);
  for (auto& x : v) x = static_cast<Index>(read_i64(is));
  return v;
}
inline std::vector<double> read_dvec(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1u << 20)) throw DataError("checkpoint: implausible vector length");
  std::vector<double> v(n);
  for (auto& x : v) x = read_f64(is);
  return v;
}

inline void write_config(std::ostream& os, const ModelConfig& c) {
  write_u32(os, c.task == Task::classification ? 0u : 1u);
  write_u32(os, static_cast<std::uint32_t>(c.global_mode));
  write_u32(os, c.local_only ? 1u : 0u);
  for (Index v : {c.n_points, c.point_dim, c.d_model, c.d_reduced, c.d_seg, c.heads,
                  c.num_sortnets, c.k_selected, c.n_global, c.num_classes, c.num_categories,
                  c.lg_layers, c.local_layers, c.global_layers, c.sortnet_ball_k,
                  c.msg_scale_out}) {
    write_i64(os, v);
  }
  write_f64(os, c.sortnet_radius);
  write_f64(os, c.ln_eps);
  write_f64(os, c.dropout);
  write_dvec(os, c.msg_radii);
  write_ivec(os, c.msg_samples);
  write_ivec(os, c.input_rff_hidden);
  write_ivec(os, c.global_input_rff_hidden);
  write_ivec(os, c.block_rff_hidden);
  write_ivec(os, c.score_hidden);
  write_ivec(os, c.sortnet_encoder_hidden);
  write_ivec(os, c.msg_encoder_hidden);
  write_ivec(os, c.msg_final_hidden);
  write_ivec(os, c.head_hidden);
  write_ivec(os, c.seg_rff_hidden);
  write_ivec(os, c.seg_head_hidden);
}

inline ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.task = read_u32(is) == 0u ? Task::classification : Task::segmentation;
  const std::uint32_t gm = read_u32(is);
  if (gm > 2u) throw DataError("checkpoint: unknown global mode " + std::to_string(gm));
  c.global_mode = static_cast<GlobalMode>(gm);
  c.local_only = read_u32(is) != 0u;
  for (Index* v : {&c.n_points, &c.point_dim, &c.d_model, &c.d_reduced, &c.d_seg, &c.heads,
                   &c.num_sortnets, &c.k_selected, &c.n_global, &c.num_classes,
                   &c.num_categories, &c.lg_layers, &c.local_layers, &c.global_layers,
                   &c.sortnet_ball_k, &c.msg_scale_out}) {
    *v = static_cast<Index>(read_i64(is));
  }
  c.sortnet_radius = read_f64(is);
  c.ln_eps = read_f64(is);
  c.dropout = read_f64(is);
  c.msg_radii = read_dvec(is);
  c.msg_samples = read_ivec(is);
  c.input_rff_hidden = read_ivec(is);
  c.global_input_rff_hidden = read_ivec(is);
  c.block_rff_hidden = read_ivec(is);
  c.score_hidden = read_ivec(is);
  c.sortnet_encoder_hidden = read_ivec(is);
  c.msg_encoder_hidden = read_ivec(is);
  c.msg_final_hidden = read_ivec(is);
  c.head_hidden = read_ivec(is);
  c.seg_rff_hidden = read_ivec(is);
  c.seg_head_hidden = read_ivec(is);
  return c;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'P', 'T', 'F', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const std::string& path, ModelParams<S>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_config(os, params.cfg);
  std::uint64_t count = 0;
  params.visit([&](Parameter<S>&) { ++count; });
  detail::write_u64(os, count);
  params.visit([&](Parameter<S>& p) {
    detail::write_string(os, p.id);
    detail::write_u64(os, static_cast<std::uint64_t>(p.value.rows()));
    detail::write_u64(os, static_cast<std::uint64_t>(p.value.cols()));
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) detail::write_f64(os, double(p.value(r, c)));
    }
  });
  if (!os) throw DataError("checkpoint: write to " + path + " failed");
}

template <class S>
ModelParams<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: " + path + " is not a model checkpoint (bad magic)");
  }
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig cfg = detail::read_config(is);
  ModelParams<S> params(cfg);
  const std::uint64_t count = detail::read_u64(is);
  std::uint64_t expect = 0;
  params.visit([&](Parameter<S>&) { ++expect; });
  if (count != expect) {
    throw DataError("checkpoint: holds " + std::to_string(count) + " tensors, config needs " +
                    std::to_string(expect));
  }
  params.visit([&](Parameter<S>& p) {
    const std::string id = detail::read_string(is);
    const auto rows = static_cast<Index>(detail::read_u64(is));
    const auto cols = static_cast<Index>(detail::read_u64(is));
    if (id != p.id || rows != p.value.rows() || cols != p.value.cols()) {
      throw DataError("checkpoint: tensor " + id + " (" + shape_str(rows, cols) +
                      ") does not match expected " + p.id + " (" + shape_str(p.value) + ")");
    }
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) p.value(r, c) = S(detail::read_f64(is));
    }
  });
  return params;
}

}  // namespace pf
