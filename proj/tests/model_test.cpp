#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pointformer/gradcheck.hpp"
#include "pointformer/model.hpp"
#include "test_util.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

using namespace pf;
using pftest::max_abs_diff;
using pftest::permute_rows;
using pftest::random_mat;
using pftest::random_permutation;

namespace {

using Mat = Matrix2D<double>;

PointCloud<double> random_cloud(RngStream& rng, Index n, bool normals = true) {
  PointCloud<double> c;
  c.data = random_mat<double>(rng, n, normals ? 6 : 3, 0.5);
  if (normals) {
    for (Index i = 0; i < n; ++i) c.data.row(i).tail(3).normalize();
  }
  return c;
}

ModelConfig small_cls_config() {
  ModelConfig cfg;
  cfg.task = Task::classification;
  cfg.n_points = 32;
  cfg.point_dim = 6;
  cfg.d_model = 32;
  cfg.d_reduced = 16;
  cfg.heads = 4;
  cfg.num_sortnets = 2;
  cfg.k_selected = 6;
  cfg.n_global = 8;
  cfg.num_classes = 4;
  cfg.lg_layers = 2;
  cfg.sortnet_radius = 0.5;
  cfg.sortnet_ball_k = 8;
  cfg.msg_radii = {0.4, 0.8};
  cfg.msg_samples = {4, 8};
  cfg.head_hidden = {32};
  return cfg;
}

ModelConfig tiny_seg_config() {
  ModelConfig cfg;
  cfg.task = Task::segmentation;
  cfg.n_points = 8;
  cfg.point_dim = 3;
  cfg.d_model = 16;
  cfg.d_reduced = 8;
  cfg.d_seg = 8;
  cfg.heads = 2;
  cfg.num_sortnets = 1;
  cfg.k_selected = 3;
  cfg.n_global = 4;
  cfg.num_classes = 3;
  cfg.num_categories = 4;
  cfg.lg_layers = 1;
  cfg.sortnet_radius = 0.8;
  cfg.sortnet_ball_k = 4;
  cfg.msg_radii = {0.8};
  cfg.msg_samples = {4};
  cfg.block_rff_hidden = {8};
  cfg.input_rff_hidden = {8};
  cfg.sortnet_encoder_hidden = {8};
  cfg.msg_encoder_hidden = {6};
  cfg.msg_scale_out = 6;
  cfg.seg_rff_hidden = {8};
  cfg.seg_head_hidden = {8};
  return cfg;
}

}  // namespace

TEST_CASE("init_params: kaiming weights, unit gains, zero biases, seed determinism") {
  auto cfg = small_cls_config();
  auto params = init_params<double>(cfg, 7);

  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  params.visit([&](Parameter<double>& p) {
    if (id_is_gain_or_bias(p.id)) {
      if (p.id.size() >= 5 && p.id.compare(p.id.size() - 5, 5, ".gain") == 0) {
        CHECK(p.value.minCoeff() == 1.0);
        CHECK(p.value.maxCoeff() == 1.0);
      } else {
        CHECK(p.value.cwiseAbs().maxCoeff() == 0.0);
      }
      return;
    }
    // Scale each entry back to unit variance before pooling the stats.
    const double std_dev = std::sqrt(2.0 / double(p.value.rows()));
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) {
        const double z = p.value(r, c) / std_dev;
        sum += z;
        sq += z * z;
        ++n;
      }
    }
  });
  REQUIRE(n > 10000);
  CHECK(std::abs(sum / double(n)) < 0.05);
  CHECK(std::abs(sq / double(n) - 1.0) < 0.05);

  auto again = init_params<double>(cfg, 7);
  auto other = init_params<double>(cfg, 8);
  double same_diff = 0.0;
  bool any_other_diff = false;
  auto list_a = params.parameter_list();
  auto list_b = again.parameter_list();
  auto list_c = other.parameter_list();
  REQUIRE(list_a.size() == list_b.size());
  for (std::size_t i = 0; i < list_a.size(); ++i) {
    same_diff = std::max(same_diff, max_abs_diff(list_a[i]->value, list_b[i]->value));
    if (max_abs_diff(list_a[i]->value, list_c[i]->value) > 0.0) any_other_diff = true;
  }
  CHECK(same_diff == 0.0);
  CHECK(any_other_diff);
}

TEST_CASE("config validation rejects inconsistent setups") {
  auto cfg = small_cls_config();
  cfg.heads = 5;
  CHECK_THROWS_AS(ModelParams<double>{cfg}, ConfigError);
  cfg = small_cls_config();
  cfg.msg_radii = {0.1};
  CHECK_THROWS_AS(ModelParams<double>{cfg}, ConfigError);
  cfg = small_cls_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(ModelParams<double>{cfg}, ConfigError);
  cfg = tiny_seg_config();
  cfg.d_seg = 12;
  CHECK_THROWS_AS(ModelParams<double>{cfg}, ConfigError);
  cfg = small_cls_config();
  cfg.lg_layers = 0;
  CHECK_THROWS_AS(ModelParams<double>{cfg}, ConfigError);
}

TEST_CASE("classification forward: logits 1 x C, M selections of K points") {
  RngStream rng(401);
  auto cfg = small_cls_config();
  auto params = init_params<double>(cfg, 3);
  auto cloud = random_cloud(rng, 32);
  EvalMode eval;
  Tape<double> t;
  auto out = classify_forward(t, cloud, params, eval);
  CHECK(t.value(out.logits).rows() == 1);
  CHECK(t.value(out.logits).cols() == 4);
  CHECK(out.selections.size() == 2);
  for (const auto& sel : out.selections) {
    CHECK(sel.size() == 6);
    CHECK(std::set<Index>(sel.begin(), sel.end()).size() == 6);
  }
}

TEST_CASE("classification logits are invariant to cloud permutation") {
  RngStream rng(409);
  auto cfg = small_cls_config();
  auto params = init_params<double>(cfg, 11);
  auto cloud = random_cloud(rng, 40);
  EvalMode eval;
  Tape<double> t;
  auto base = classify_forward(t, cloud, params, eval);
  for (int trial = 0; trial < 10; ++trial) {
    auto perm = random_permutation(rng, 40);
    PointCloud<double> pc;
    pc.data = permute_rows(cloud.data, perm);
    Tape<double> t2;
    auto got = classify_forward(t2, pc, params, eval);
    CHECK(max_abs_diff(t.value(base.logits), t2.value(got.logits)) < 1e-10);
  }
}

TEST_CASE("fps and nosample global modes forward, stay invariant, and round-trip") {
  RngStream rng(421);
  auto cloud = random_cloud(rng, 40);
  EvalMode eval;
  for (const GlobalMode gm : {GlobalMode::fps, GlobalMode::nosample}) {
    CAPTURE(to_string(gm));
    auto cfg = small_cls_config();
    cfg.global_mode = gm;
    auto params = init_params<double>(cfg, 17);
    CHECK(!params.msg.has_value());
    REQUIRE(params.global_input_rff.has_value());
    CHECK(params.global_input_rff->in_dim() == 6);
    CHECK(params.global_input_rff->out_dim() == cfg.d_model);

    Tape<double> t;
    Var<double> g = global_branch(t, cloud, raw_global_features(t, cloud), params, eval);
    CHECK(t.value(g).rows() == (gm == GlobalMode::fps ? cfg.n_global : 40));
    CHECK(t.value(g).cols() == cfg.d_model);
    auto base = classify_forward(t, cloud, params, eval);
    CHECK(t.value(base.logits).cols() == 4);

    for (int trial = 0; trial < 5; ++trial) {
      auto perm = random_permutation(rng, 40);
      PointCloud<double> pc;
      pc.data = permute_rows(cloud.data, perm);
      Tape<double> t2;
      auto got = classify_forward(t2, pc, params, eval);
      CHECK(max_abs_diff(t.value(base.logits), t2.value(got.logits)) < 1e-10);
    }

    const std::string path =
        (std::filesystem::temp_directory_path() / "pf_globalmode.ckpt").string();
    save_checkpoint(path, params);
    auto loaded = load_checkpoint<double>(path);
    CHECK(loaded.cfg.global_mode == gm);
    REQUIRE(loaded.global_input_rff.has_value());
    CHECK(loaded.global_input_rff->weights[0].value == params.global_input_rff->weights[0].value);
    Tape<double> t3;
    auto again = classify_forward(t3, cloud, loaded, eval);
    CHECK(t.value(base.logits) == t3.value(again.logits));
  }

  SUBCASE("msg mode allocates only the grouping parameters") {
    auto cfg = small_cls_config();
    auto params = init_params<double>(cfg, 17);
    CHECK(params.msg.has_value());
    CHECK(!params.global_input_rff.has_value());
  }
}

TEST_CASE("local-only pipeline: selection rows feed the head directly") {
  RngStream rng(431);
  auto cfg = small_cls_config();
  cfg.local_only = true;
  auto params = init_params<double>(cfg, 23);
  CHECK(!params.msg.has_value());
  CHECK(!params.global_input_rff.has_value());
  CHECK(params.global_blocks.empty());
  CHECK(params.lg_cross.empty());
  CHECK(params.head.in_dim() == cfg.num_sortnets * cfg.k_selected * cfg.d_model);

  auto cloud = random_cloud(rng, 40);
  EvalMode eval;
  Tape<double> t;
  auto base = classify_forward(t, cloud, params, eval);
  CHECK(t.value(base.logits).rows() == 1);
  CHECK(t.value(base.logits).cols() == 4);

  for (int trial = 0; trial < 5; ++trial) {
    auto perm = random_permutation(rng, 40);
    PointCloud<double> pc;
    pc.data = permute_rows(cloud.data, perm);
    Tape<double> t2;
    auto got = classify_forward(t2, pc, params, eval);
    CHECK(max_abs_diff(t.value(base.logits), t2.value(got.logits)) < 1e-10);
  }

  const std::string path = (std::filesystem::temp_directory_path() / "pf_localonly.ckpt").string();
  save_checkpoint(path, params);
  auto loaded = load_checkpoint<double>(path);
  CHECK(loaded.cfg.local_only);
  Tape<double> t3;
  auto again = classify_forward(t3, cloud, loaded, eval);
  CHECK(t.value(base.logits) == t3.value(again.logits));

  SUBCASE("segmentation rejects local_only") {
    auto seg = tiny_seg_config();
    seg.local_only = true;
    CHECK_THROWS_AS(ModelParams<double>{seg}, ConfigError);
  }
}

TEST_CASE("tiny local-only model passes a full finite-difference gradient check") {
  RngStream rng(433);
  ModelConfig cfg;
  cfg.task = Task::classification;
  cfg.local_only = true;
  cfg.n_points = 8;
  cfg.point_dim = 3;
  cfg.d_model = 16;
  cfg.d_reduced = 8;
  cfg.heads = 2;
  cfg.num_sortnets = 1;
  cfg.k_selected = 4;
  cfg.num_classes = 3;
  cfg.sortnet_radius = 0.8;
  cfg.sortnet_ball_k = 4;
  cfg.head_hidden = {16};
  cfg.score_hidden = {8};
  auto params = init_params<double>(cfg, 29);
  PointCloud<double> cloud;
  cloud.data = random_mat<double>(rng, 8, 3, 0.5);
  Mat W = random_mat<double>(rng, 1, 3);
  EvalMode eval;

  auto plist = params.parameter_list();
  auto loss = [&](bool accumulate) {
    Tape<double> t;
    auto out = classify_forward(t, cloud, params, eval);
    auto l = sum_all(t, mul_mask(t, out.logits, W));
    const double lv = t.value(l)(0, 0);
    if (accumulate) t.backward(l);
    return lv;
  };
  auto rep = check_gradients<double>(loss, plist, 1e-6);
  INFO("worst: ", rep.worst_param, " autodiff=", rep.autodiff, " numeric=", rep.numeric);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("segmentation forward: logits N x C, equivariant to permutation") {
  RngStream rng(419);
  auto cfg = tiny_seg_config();
  cfg.n_points = 20;
  auto params = init_params<double>(cfg, 5);
  PointCloud<double> cloud;
  cloud.data = random_mat<double>(rng, 20, 3, 0.5);
  EvalMode eval;
  Tape<double> t;
  auto base = segment_forward(t, cloud, Index(2), params, eval);
  CHECK(t.value(base.logits).rows() == 20);
  CHECK(t.value(base.logits).cols() == 3);

  for (int trial = 0; trial < 10; ++trial) {
    auto perm = random_permutation(rng, 20);
    PointCloud<double> pc;
    pc.data = permute_rows(cloud.data, perm);
    Tape<double> t2;
    auto got = segment_forward(t2, pc, Index(2), params, eval);
    CHECK(max_abs_diff(t2.value(got.logits), permute_rows(t.value(base.logits), perm)) < 1e-10);
  }
}

TEST_CASE("category one-hot changes segmentation output and is range-checked") {
  RngStream rng(421);
  auto cfg = tiny_seg_config();
  auto params = init_params<double>(cfg, 9);
  PointCloud<double> cloud;
  cloud.data = random_mat<double>(rng, 8, 3, 0.5);
  EvalMode eval;
  Tape<double> ta, tb;
  auto a = segment_forward(ta, cloud, Index(0), params, eval);
  auto b = segment_forward(tb, cloud, Index(3), params, eval);
  CHECK(max_abs_diff(ta.value(a.logits), tb.value(b.logits)) > 0.0);
  Tape<double> tc;
  CHECK_THROWS_AS(segment_forward(tc, cloud, Index(4), params, eval), UsageError);
  CHECK_THROWS_AS(segment_forward(tc, cloud, Index(-1), params, eval), UsageError);
}

TEST_CASE("task mismatch between model and forward raises") {
  RngStream rng(431);
  auto cls = init_params<double>(small_cls_config(), 1);
  auto seg = init_params<double>(tiny_seg_config(), 1);
  auto cloud6 = random_cloud(rng, 32);
  PointCloud<double> cloud3;
  cloud3.data = random_mat<double>(rng, 8, 3);
  EvalMode eval;
  Tape<double> t;
  CHECK_THROWS_AS(segment_forward(t, cloud6, Index(0), cls, eval), UsageError);
  CHECK_THROWS_AS(classify_forward(t, cloud3, seg, eval), UsageError);
  // Cloud dimension must match the configured point_dim.
  CHECK_THROWS_AS(classify_forward(t, cloud3, cls, eval), ShapeError);
}

TEST_CASE("reference-scale classification shapes: 256 local rows, 128 global rows, 40 logits") {
  RngStream rng(433);
  ModelConfig cfg;
  cfg.task = Task::classification;
  cfg.n_points = 1024;
  cfg.point_dim = 6;
  cfg.d_model = 512;
  cfg.d_reduced = 64;
  cfg.heads = 8;
  cfg.num_sortnets = 4;
  cfg.k_selected = 64;
  cfg.n_global = 128;
  cfg.num_classes = 40;
  cfg.lg_layers = 4;
  cfg.sortnet_radius = 0.2;
  cfg.sortnet_ball_k = 32;
  cfg.msg_radii = {0.1, 0.2, 0.4};
  cfg.msg_samples = {16, 32, 64};
  cfg.input_rff_hidden = {64, 128};
  cfg.block_rff_hidden = {512};
  cfg.head_hidden = {4096, 1024, 512, 128};
  cfg.msg_scale_out = 128;
  auto params = init_params<double>(cfg, 21);
  auto cloud = random_cloud(rng, 1024);
  EvalMode eval;
  Tape<double> t;

  auto local = local_branch(t, cloud, params, eval);
  CHECK(t.value(local.rows).rows() == 256);  // M * K = 4 * 64
  CHECK(t.value(local.rows).cols() == 512);
  auto g = global_branch(t, cloud, raw_global_features(t, cloud), params, eval);
  CHECK(t.value(g).rows() == 128);
  CHECK(t.value(g).cols() == 512);
  auto lg = local_global_attention(t, local.rows, g, params, eval);
  CHECK(t.value(lg).rows() == 256);
  CHECK(t.value(lg).cols() == 64);
  auto logits = rff_forward(t, flatten_rows(t, lg), params.head, eval);
  CHECK(t.value(logits).rows() == 1);
  CHECK(t.value(logits).cols() == 40);
}

TEST_CASE("reference-scale segmentation shapes: 160 local rows, 50 part logits per point") {
  RngStream rng(439);
  ModelConfig cfg;
  cfg.task = Task::segmentation;
  cfg.n_points = 512;
  cfg.point_dim = 3;
  cfg.d_model = 512;
  cfg.d_reduced = 256;
  cfg.d_seg = 256;
  cfg.heads = 8;
  cfg.num_sortnets = 10;
  cfg.k_selected = 16;
  cfg.n_global = 64;
  cfg.num_classes = 50;
  cfg.num_categories = 16;
  cfg.lg_layers = 2;
  cfg.sortnet_radius = 0.2;
  cfg.sortnet_ball_k = 32;
  cfg.msg_radii = {0.1, 0.2, 0.4};
  cfg.msg_samples = {16, 32, 64};
  cfg.block_rff_hidden = {512};
  cfg.seg_head_hidden = {256, 128};
  auto params = init_params<double>(cfg, 23);
  PointCloud<double> cloud;
  cloud.data = random_mat<double>(rng, 512, 3, 0.5);
  EvalMode eval;
  Tape<double> t;
  auto out = segment_forward(t, cloud, Index(4), params, eval);
  CHECK(t.value(out.logits).rows() == 512);
  CHECK(t.value(out.logits).cols() == 50);
  CHECK(out.selections.size() == 10);
  for (const auto& sel : out.selections) CHECK(sel.size() == 16);
}

TEST_CASE("tiny segmentation model passes a full finite-difference gradient check") {
  RngStream rng(443);
  auto cfg = tiny_seg_config();
  auto params = init_params<double>(cfg, 13);
  PointCloud<double> cloud;
  cloud.data = random_mat<double>(rng, 8, 3, 0.5);
  Mat W = random_mat<double>(rng, 8, 3);
  EvalMode eval;

  auto plist = params.parameter_list();
  auto loss = [&](bool accumulate) {
    Tape<double> t;
    auto out = segment_forward(t, cloud, Index(1), params, eval);
    auto l = sum_all(t, mul_mask(t, out.logits, W));
    const double lv = t.value(l)(0, 0);
    if (accumulate) t.backward(l);
    return lv;
  };
  auto rep = check_gradients<double>(loss, plist, 1e-6);
  INFO("worst: ", rep.worst_param, " autodiff=", rep.autodiff, " numeric=", rep.numeric);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("checkpoint round-trip restores config, tensors and outputs exactly") {
  RngStream rng(449);
  auto cfg = small_cls_config();
  cfg.dropout = 0.25;
  auto params = init_params<double>(cfg, 31);
  const std::string path = "model_test_roundtrip.ckpt";
  save_checkpoint(path, params);
  auto loaded = load_checkpoint<double>(path);

  CHECK(loaded.cfg.task == params.cfg.task);
  CHECK(loaded.cfg.d_model == params.cfg.d_model);
  CHECK(loaded.cfg.head_hidden == params.cfg.head_hidden);
  CHECK(loaded.cfg.dropout == params.cfg.dropout);
  CHECK(loaded.cfg.msg_radii == params.cfg.msg_radii);

  auto la = params.parameter_list();
  auto lb = loaded.parameter_list();
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i]->id == lb[i]->id);
    CHECK(max_abs_diff(la[i]->value, lb[i]->value) == 0.0);
  }

  auto cloud = random_cloud(rng, 32);
  EvalMode eval;
  Tape<double> ta, tb;
  auto a = classify_forward(ta, cloud, params, eval);
  auto b = classify_forward(tb, cloud, loaded, eval);
  CHECK(max_abs_diff(ta.value(a.logits), tb.value(b.logits)) == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects garbage and truncation") {
  const std::string path = "model_test_bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE this is not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint<double>(path), DataError);

  auto params = init_params<double>(small_cls_config(), 2);
  save_checkpoint(path, params);
  // Truncate the tail.
  {
    std::ifstream is(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os(path, std::ios::binary);
    os.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint<double>(path), DataError);
  CHECK_THROWS_AS(load_checkpoint<double>("does_not_exist.ckpt"), DataError);
  std::remove(path.c_str());
}

TEST_CASE("float model forward stays finite") {
  RngStream rng(457);
  auto cfg = small_cls_config();
  auto params = init_params<float>(cfg, 17);
  PointCloud<float> cloud;
  cloud.data = random_mat<float>(rng, 32, 6, 0.5);
  for (Index i = 0; i < 32; ++i) cloud.data.row(i).tail(3).normalize();
  EvalMode eval;
  Tape<float> t;
  auto out = classify_forward(t, cloud, params, eval);
  CHECK(t.value(out.logits).allFinite());
}
