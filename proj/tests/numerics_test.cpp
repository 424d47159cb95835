#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pointformer/gradcheck.hpp"
#include "pointformer/rff.hpp"
#include "pointformer/rng.hpp"
#include "pointformer/tape.hpp"

#include <cmath>
#include <vector>

using namespace pf;

namespace {

using Mat = Matrix2D<double>;

Mat random_mat(RngStream& rng, Index r, Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i) {
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.gaussian();
  }
  return m;
}

// Independent oracle: triple-loop matrix product.
Mat matmul_oracle(const Mat& a, const Mat& b) {
  Mat out = Mat::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      for (Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
    }
  }
  return out;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

// Finite-difference check of a single tape op: loss = sum(op(inputs) .* W)
// with a fixed random weighting so reduction-invariant outputs (softmax,
// layer norm) still produce nonzero input gradients.
template <class BuildFn>
GradCheckReport fd_check(std::vector<Parameter<double>*> params, BuildFn build, double eps = 1e-6) {
  auto loss = [&](bool accumulate) {
    Tape<double> t;
    Var<double> out = build(t);
    double l = t.value(out)(0, 0);
    if (accumulate) t.backward(out);
    return l;
  };
  return check_gradients<double>(loss, params, eps);
}

}  // namespace

TEST_CASE("matmul matches the triple-loop oracle") {
  RngStream rng(7);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 4, 5}, {7, 2, 9}, {5, 8, 1}}) {
    Mat A = random_mat(rng, m, k);
    Mat B = random_mat(rng, k, n);
    Tape<double> t;
    auto out = matmul(t, t.constant(A), t.constant(B));
    CHECK(max_abs_diff(t.value(out), matmul_oracle(A, B)) < 1e-12);
  }
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  Tape<double> t;
  auto a = t.constant(Mat::Zero(3, 4));
  auto b = t.constant(Mat::Zero(5, 2));
  try {
    matmul(t, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("3x4") != std::string::npos);
    CHECK(msg.find("5x2") != std::string::npos);
  }
}

TEST_CASE("matmul_nt equals matmul with explicit transpose") {
  RngStream rng(11);
  Mat A = random_mat(rng, 4, 6);
  Mat B = random_mat(rng, 3, 6);
  Tape<double> t;
  auto out = matmul_nt(t, t.constant(A), t.constant(B));
  Mat Bt = B.transpose();
  CHECK(max_abs_diff(t.value(out), matmul_oracle(A, Bt)) < 1e-12);
}

TEST_CASE("matmul and matmul_nt gradients match central differences") {
  RngStream rng(13);
  Parameter<double> a("a", 3, 4);
  Parameter<double> b("b", 4, 5);
  a.value = random_mat(rng, 3, 4);
  b.value = random_mat(rng, 4, 5);
  Mat W = random_mat(rng, 3, 5);
  auto rep = fd_check({&a, &b}, [&](Tape<double>& t) {
    auto prod = matmul(t, t.leaf(a), t.leaf(b));
    return sum_all(t, mul_mask(t, prod, W));
  });
  CHECK(rep.max_rel_err < 1e-6);

  Parameter<double> c("c", 5, 4);
  c.value = random_mat(rng, 5, 4);
  Mat W2 = random_mat(rng, 3, 5);
  auto rep2 = fd_check({&a, &c}, [&](Tape<double>& t) {
    auto prod = matmul_nt(t, t.leaf(a), t.leaf(c));
    return sum_all(t, mul_mask(t, prod, W2));
  });
  CHECK(rep2.max_rel_err < 1e-6);
}

TEST_CASE("add, add_rowvec and scale forward and backward") {
  RngStream rng(17);
  Parameter<double> x("x", 4, 3);
  Parameter<double> y("y", 4, 3);
  Parameter<double> bias("bias", 1, 3);
  x.value = random_mat(rng, 4, 3);
  y.value = random_mat(rng, 4, 3);
  bias.value = random_mat(rng, 1, 3);

  Tape<double> t;
  auto s = add(t, t.leaf(x), t.leaf(y));
  CHECK(max_abs_diff(t.value(s), x.value + y.value) < 1e-15);
  auto sb = add_rowvec(t, s, t.leaf(bias));
  Mat expect = x.value + y.value;
  for (Index r = 0; r < 4; ++r) expect.row(r) += bias.value.row(0);
  CHECK(max_abs_diff(t.value(sb), expect) < 1e-15);

  Mat W = random_mat(rng, 4, 3);
  auto rep = fd_check({&x, &y, &bias}, [&](Tape<double>& t2) {
    auto v = add_rowvec(t2, add(t2, t2.leaf(x), t2.leaf(y)), t2.leaf(bias));
    return sum_all(t2, mul_mask(t2, scale(t2, v, 1.7), W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("relu clamps negatives and routes gradient through positives") {
  Parameter<double> x("x", 2, 3);
  x.value << -1.0, 0.5, 2.0, 3.0, -0.25, 1.0;
  Tape<double> t;
  auto out = relu(t, t.leaf(x));
  Mat expect(2, 3);
  expect << 0.0, 0.5, 2.0, 3.0, 0.0, 1.0;
  CHECK(max_abs_diff(t.value(out), expect) < 1e-15);

  RngStream rng(19);
  Mat W = random_mat(rng, 2, 3);
  auto rep = fd_check({&x}, [&](Tape<double>& t2) {
    return sum_all(t2, mul_mask(t2, relu(t2, t2.leaf(x)), W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows: analytic values, normalisation, shift invariance") {
  Tape<double> t;
  Mat x(2, 3);
  x << 0.0, 0.0, 0.0, std::log(1.0), std::log(2.0), std::log(3.0);
  auto out = softmax_rows(t, t.constant(x));
  const Mat& s = t.value(out);
  CHECK(s(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(s(1, 0) == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(s(1, 1) == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(s(1, 2) == doctest::Approx(3.0 / 6).epsilon(1e-12));

  RngStream rng(23);
  Mat a = random_mat(rng, 5, 7, 3.0);
  Mat shifted = a;
  for (Index r = 0; r < 5; ++r) shifted.row(r).array() += 10.0 * rng.gaussian();
  Tape<double> t2;
  auto sa = softmax_rows(t2, t2.constant(a));
  auto sb = softmax_rows(t2, t2.constant(shifted));
  CHECK(max_abs_diff(t2.value(sa), t2.value(sb)) < 1e-12);
  for (Index r = 0; r < 5; ++r) {
    CHECK(t2.value(sa).row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Large magnitudes stay finite thanks to the max shift.
  Tape<double> t3;
  Mat big(1, 3);
  big << 1000.0, 999.0, -1000.0;
  auto sbig = softmax_rows(t3, t3.constant(big));
  CHECK(t3.value(sbig).allFinite());
  CHECK(t3.value(sbig)(0, 0) > 0.7);
}

TEST_CASE("softmax gradient matches central differences") {
  RngStream rng(29);
  Parameter<double> x("x", 4, 6);
  x.value = random_mat(rng, 4, 6, 2.0);
  Mat W = random_mat(rng, 4, 6);
  auto rep = fd_check({&x}, [&](Tape<double>& t) {
    return sum_all(t, mul_mask(t, softmax_rows(t, t.leaf(x)), W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm output rows have mean 0 and variance 1") {
  RngStream rng(31);
  Mat x = random_mat(rng, 6, 16, 4.0);
  Parameter<double> gain("g", 1, 16);
  Parameter<double> bias("b", 1, 16);
  gain.value.setOnes();
  bias.value.setZero();
  Tape<double> t;
  const double eps = 1e-8;
  auto out = layer_norm(t, t.constant(x), t.leaf(gain), t.leaf(bias), eps);
  for (Index r = 0; r < 6; ++r) {
    const auto row = t.value(out).row(r);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().sum() / 16.0;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm applies gain and bias after normalisation") {
  Mat x(1, 4);
  x << 1.0, 2.0, 3.0, 4.0;
  Parameter<double> gain("g", 1, 4);
  Parameter<double> bias("b", 1, 4);
  gain.value << 2.0, 2.0, 2.0, 2.0;
  bias.value << 1.0, 1.0, 1.0, 1.0;
  Tape<double> t;
  auto out = layer_norm(t, t.constant(x), t.leaf(gain), t.leaf(bias), 1e-12);
  // x normalised: mean 2.5, sd sqrt(1.25).
  const double sd = std::sqrt(1.25);
  for (Index c = 0; c < 4; ++c) {
    const double xhat = (x(0, c) - 2.5) / sd;
    CHECK(t.value(out)(0, c) == doctest::Approx(2.0 * xhat + 1.0).epsilon(1e-9));
  }
}

TEST_CASE("layer_norm gradients (input, gain, bias) match central differences") {
  RngStream rng(37);
  Parameter<double> x("x", 5, 8);
  Parameter<double> gain("g", 1, 8);
  Parameter<double> bias("b", 1, 8);
  x.value = random_mat(rng, 5, 8, 2.0);
  gain.value = random_mat(rng, 1, 8);
  bias.value = random_mat(rng, 1, 8);
  Mat W = random_mat(rng, 5, 8);
  auto rep = fd_check({&x, &gain, &bias}, [&](Tape<double>& t) {
    auto out = layer_norm(t, t.leaf(x), t.leaf(gain), t.leaf(bias), 1e-5);
    return sum_all(t, mul_mask(t, out, W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("concat_cols and concat_rows stack blocks and split gradients") {
  RngStream rng(41);
  Parameter<double> a("a", 3, 2);
  Parameter<double> b("b", 3, 4);
  a.value = random_mat(rng, 3, 2);
  b.value = random_mat(rng, 3, 4);
  Tape<double> t;
  auto cc = concat_cols(t, {t.leaf(a), t.leaf(b)});
  CHECK(t.value(cc).rows() == 3);
  CHECK(t.value(cc).cols() == 6);
  CHECK(max_abs_diff((Mat)t.value(cc).block(0, 0, 3, 2), a.value) == 0.0);
  CHECK(max_abs_diff((Mat)t.value(cc).block(0, 2, 3, 4), b.value) == 0.0);

  Mat W = random_mat(rng, 3, 6);
  auto rep = fd_check({&a, &b}, [&](Tape<double>& t2) {
    auto v = concat_cols(t2, {t2.leaf(a), t2.leaf(b)});
    return sum_all(t2, mul_mask(t2, v, W));
  });
  CHECK(rep.max_rel_err < 1e-6);

  Parameter<double> c("c", 2, 3);
  c.value = random_mat(rng, 2, 3);
  Parameter<double> d("d", 4, 3);
  d.value = random_mat(rng, 4, 3);
  Mat W2 = random_mat(rng, 6, 3);
  auto rep2 = fd_check({&c, &d}, [&](Tape<double>& t2) {
    auto v = concat_rows(t2, {t2.leaf(c), t2.leaf(d)});
    return sum_all(t2, mul_mask(t2, v, W2));
  });
  CHECK(rep2.max_rel_err < 1e-6);

  Tape<double> t3;
  CHECK_THROWS_AS(concat_cols(t3, {t3.constant(Mat::Zero(2, 2)), t3.constant(Mat::Zero(3, 2))}),
                  ShapeError);
  CHECK_THROWS_AS(concat_rows(t3, {t3.constant(Mat::Zero(2, 2)), t3.constant(Mat::Zero(2, 3))}),
                  ShapeError);
}

TEST_CASE("gather_rows accumulates gradients for repeated indices") {
  Parameter<double> x("x", 4, 2);
  x.value << 1, 2, 3, 4, 5, 6, 7, 8;
  Tape<double> t;
  auto out = gather_rows(t, t.leaf(x), {2, 0, 2, 2});
  CHECK(t.value(out).rows() == 4);
  CHECK(t.value(out)(0, 0) == 5.0);
  CHECK(t.value(out)(3, 1) == 6.0);
  auto loss = sum_all(t, out);
  t.backward(loss);
  // Row 2 gathered three times, row 0 once, rows 1 and 3 never.
  CHECK(x.grad(2, 0) == 3.0);
  CHECK(x.grad(0, 0) == 1.0);
  CHECK(x.grad(1, 0) == 0.0);
  CHECK(x.grad(3, 1) == 0.0);

  Tape<double> t2;
  CHECK_THROWS_AS(gather_rows(t2, t2.constant(Mat::Zero(3, 2)), {3}), UsageError);
}

TEST_CASE("colwise_max takes per-column maxima and routes gradient to the first argmax") {
  Parameter<double> x("x", 3, 2);
  x.value << 1.0, 5.0, 4.0, 5.0, 4.0, 2.0;
  Tape<double> t;
  auto out = colwise_max(t, t.leaf(x));
  CHECK(t.value(out)(0, 0) == 4.0);
  CHECK(t.value(out)(0, 1) == 5.0);
  auto loss = sum_all(t, out);
  t.backward(loss);
  // Column 0 max is tied between rows 1 and 2; the first wins.
  CHECK(x.grad(1, 0) == 1.0);
  CHECK(x.grad(2, 0) == 0.0);
  CHECK(x.grad(0, 1) == 1.0);
  CHECK(x.grad(1, 1) == 0.0);
}

TEST_CASE("flatten_rows is row-major and invertible in the gradient") {
  Parameter<double> x("x", 2, 3);
  x.value << 1, 2, 3, 4, 5, 6;
  Tape<double> t;
  auto out = flatten_rows(t, t.leaf(x));
  CHECK(t.value(out).rows() == 1);
  CHECK(t.value(out).cols() == 6);
  for (Index i = 0; i < 6; ++i) CHECK(t.value(out)(0, i) == double(i + 1));

  RngStream rng(43);
  Mat W = random_mat(rng, 1, 6);
  auto rep = fd_check({&x}, [&](Tape<double>& t2) {
    return sum_all(t2, mul_mask(t2, flatten_rows(t2, t2.leaf(x)), W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("sum_all and mean_all reduce correctly") {
  Parameter<double> x("x", 2, 2);
  x.value << 1, 2, 3, 4;
  Tape<double> t;
  auto s = sum_all(t, t.leaf(x));
  CHECK(t.value(s)(0, 0) == 10.0);
  Tape<double> t2;
  auto m = mean_all(t2, t2.leaf(x));
  CHECK(t2.value(m)(0, 0) == 2.5);
  t2.backward(m);
  CHECK(x.grad(0, 0) == doctest::Approx(0.25));
}

TEST_CASE("dropout is identity in eval mode and a scaled mask in training") {
  RngStream rng(47);
  Mat x = random_mat(rng, 20, 30);
  Tape<double> t;
  auto xv = t.constant(x);
  auto out_eval = dropout(t, xv, 0.5, nullptr, false);
  CHECK(out_eval.id == xv.id);

  RngStream drop_rng(123);
  auto out_train = dropout(t, xv, 0.5, &drop_rng, true);
  const Mat& y = t.value(out_train);
  int kept = 0;
  for (Index r = 0; r < y.rows(); ++r) {
    for (Index c = 0; c < y.cols(); ++c) {
      if (y(r, c) != 0.0) {
        CHECK(y(r, c) == doctest::Approx(2.0 * x(r, c)));
        ++kept;
      }
    }
  }
  // Keep ratio near 0.5 for 600 draws.
  CHECK(kept > 230);
  CHECK(kept < 370);

  // Same stream state gives the same mask.
  RngStream r1(9), r2(9);
  Tape<double> ta, tb;
  auto oa = dropout(ta, ta.constant(x), 0.3, &r1, true);
  auto ob = dropout(tb, tb.constant(x), 0.3, &r2, true);
  CHECK(max_abs_diff(ta.value(oa), tb.value(ob)) == 0.0);

  CHECK_THROWS_AS(dropout(t, xv, 1.0, &drop_rng, true), UsageError);
  CHECK_THROWS_AS(dropout(t, xv, 0.5, nullptr, true), UsageError);
}

TEST_CASE("backward requires a scalar loss and refuses to run twice") {
  Parameter<double> x("x", 2, 2);
  x.value << 1, 2, 3, 4;
  Tape<double> t;
  auto v = t.leaf(x);
  CHECK_THROWS_AS(t.backward(v), UsageError);

  Tape<double> t2;
  auto loss = sum_all(t2, t2.leaf(x));
  t2.backward(loss);
  CHECK_THROWS_AS(t2.backward(loss), UsageError);
}

TEST_CASE("parameter gradients accumulate across tapes until zeroed") {
  Parameter<double> x("x", 1, 2);
  x.value << 2.0, 3.0;
  x.zero_grad();
  {
    Tape<double> t;
    t.backward(sum_all(t, t.leaf(x)));
  }
  {
    Tape<double> t;
    t.backward(sum_all(t, scale(t, t.leaf(x), 2.0)));
  }
  CHECK(x.grad(0, 0) == 3.0);
  CHECK(x.grad(0, 1) == 3.0);
  x.zero_grad();
  x.ensure_grad();
  CHECK(x.grad(0, 0) == 0.0);
}

TEST_CASE("rff matches a hand-rolled dense forward") {
  RngStream rng(53);
  RffParams<double> p("ff", {3, 5, 2});
  for (auto& w : p.weights) w.value = random_mat(rng, w.value.rows(), w.value.cols());
  for (auto& b : p.biases) b.value = random_mat(rng, 1, b.value.cols());
  Mat x = random_mat(rng, 4, 3);

  Tape<double> t;
  EvalMode eval;
  auto out = rff_forward(t, t.constant(x), p, eval);

  // Oracle: per-row loops, ReLU on the hidden layer only.
  Mat h = matmul_oracle(x, p.weights[0].value);
  for (Index r = 0; r < h.rows(); ++r) h.row(r) += p.biases[0].value.row(0);
  h = h.cwiseMax(0.0);
  Mat o = matmul_oracle(h, p.weights[1].value);
  for (Index r = 0; r < o.rows(); ++r) o.row(r) += p.biases[1].value.row(0);
  CHECK(max_abs_diff(t.value(out), o) < 1e-12);

  // relu_last applies the activation to the output layer too.
  RffParams<double> p2("ff2", {3, 5, 2}, true);
  for (std::size_t i = 0; i < 2; ++i) {
    p2.weights[i].value = p.weights[i].value;
    p2.biases[i].value = p.biases[i].value;
  }
  Tape<double> t2;
  auto out2 = rff_forward(t2, t2.constant(x), p2, eval);
  CHECK(max_abs_diff(t2.value(out2), o.cwiseMax(0.0)) < 1e-12);

  CHECK_THROWS_AS(RffParams<double>("bad", {4}), UsageError);
  Tape<double> t3;
  CHECK_THROWS_AS(rff_forward(t3, t3.constant(Mat::Zero(2, 7)), p, eval), ShapeError);
}

TEST_CASE("rff gradients flow through all layers") {
  RngStream rng(59);
  RffParams<double> p("ff", {4, 6, 3});
  for (auto& w : p.weights) w.value = random_mat(rng, w.value.rows(), w.value.cols(), 0.5);
  for (auto& b : p.biases) b.value = random_mat(rng, 1, b.value.cols(), 0.1);
  Parameter<double> x("x", 5, 4);
  x.value = random_mat(rng, 5, 4);
  Mat W = random_mat(rng, 5, 3);

  std::vector<Parameter<double>*> params{&x};
  p.visit([&](Parameter<double>& q) { params.push_back(&q); });
  EvalMode eval;
  auto rep = fd_check(params, [&](Tape<double>& t) {
    auto out = rff_forward(t, t.leaf(x), p, eval);
    return sum_all(t, mul_mask(t, out, W));
  });
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("check_gradients reports a planted gradient corruption") {
  Parameter<double> w("w", 2, 2);
  w.value << 1.0, -2.0, 0.5, 3.0;
  Mat mask(2, 2);
  mask << 0.3, -1.2, 2.0, 0.7;
  auto loss = [&](bool accumulate) {
    Tape<double> t;
    auto out = sum_all(t, mul_mask(t, t.leaf(w), mask));
    double l = t.value(out)(0, 0);
    if (accumulate) {
      t.backward(out);
      w.grad(0, 0) += 0.5;  // deliberate corruption
    }
    return l;
  };
  auto rep = check_gradients<double>(loss, {&w}, 1e-6);
  CHECK(rep.max_rel_err > 0.1);
  CHECK(rep.worst_param == "w");
  CHECK(rep.worst_row == 0);
  CHECK(rep.worst_col == 0);
}

TEST_CASE("float instantiation works end to end") {
  RngStream rng(61);
  Parameter<float> a("a", 3, 3);
  for (Index r = 0; r < 3; ++r) {
    for (Index c = 0; c < 3; ++c) a.value(r, c) = float(rng.gaussian());
  }
  Tape<float> t;
  auto out = sum_all(t, softmax_rows(t, matmul(t, t.leaf(a), t.leaf(a))));
  t.backward(out);
  CHECK(t.value(out)(0, 0) == doctest::Approx(3.0f).epsilon(1e-5));
  CHECK(a.grad.allFinite());
}

TEST_CASE("rng gaussian moments and determinism") {
  RngStream a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.gaussian() == b.gaussian());

  RngStream rng(99);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double g = rng.gaussian();
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  // uniform_index covers the whole range without bias toward 0.
  RngStream u(5);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[u.uniform_index(5)];
  for (int c : counts) CHECK(c > 800);
}
