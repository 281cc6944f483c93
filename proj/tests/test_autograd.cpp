// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/autograd.hpp"
#include "mstar/nn.hpp"
#include "mstar/stats.hpp"

#include <doctest.h>

#include <random>

using namespace mstar;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

/// Random parameters plus a fixed random projection so every op reduces to
/// a scalar with non-trivial upstream gradient.
struct Fixture {
  ad::ParamStore ps;
  Mat probe;
  explicit Fixture(int rows, int cols, std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    ps.add("a", nn::normal_matrix(rows, cols, 1.0, rng));
    ps.add("b", nn::normal_matrix(rows, cols, 1.0, rng));
    probe = nn::normal_matrix(rows, cols, 1.0, rng);
  }
};

double check_unary(const std::function<Var(Var)>& op, int rows = 3, int cols = 4) {
  Fixture f(rows, cols);
  auto loss = [&](Tape& t) {
    Var y = op(t.param(f.ps.at("a")));
    // Fixed, uneven weights: the same on every evaluation.
    const Mat w = Mat::NullaryExpr(y.rows(), y.cols(), [](Eigen::Index i, Eigen::Index j) {
      return 1.0 + 0.1 * static_cast<double>((3 * i + 7 * j) % 5);
    });
    return ad::sum(ad::mul_const(y, w));
  };
  return stats::grad_check(loss, f.ps, 12);
}

}  // namespace

TEST_CASE("elementwise ops pass finite differences") {
  CHECK(check_unary([](Var a) { return ad::tanh(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::sigmoid(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::exp(ad::scale(a, 0.5)); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::gelu(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::log(ad::add_scalar(ad::mul(a, a), 1.0)); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::sqrt(ad::add_scalar(ad::mul(a, a), 0.5)); }) < 1e-6);
}

TEST_CASE("row-wise ops pass finite differences") {
  CHECK(check_unary([](Var a) { return ad::softmax_rows(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::log_softmax_rows(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::row_l2_normalize(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::row_norms(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::mean_rows(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::row_sums(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::transpose(a); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::gather_rows(a, {2, 0, 2}); }) < 1e-6);
  CHECK(check_unary([](Var a) { return ad::slice_cols(ad::slice_rows(a, 1, 2), 1, 2); }) < 1e-6);
}

TEST_CASE("matmul and layer norm pass finite differences") {
  Fixture f(4, 6);
  std::mt19937_64 rng(4);
  f.ps.add("w", nn::normal_matrix(6, 5, 0.5, rng));
  f.ps.add("g", nn::normal_matrix(1, 6, 1.0, rng));
  f.ps.add("beta", nn::normal_matrix(1, 6, 1.0, rng));
  auto loss = [&](Tape& t) {
    Var x = ad::layer_norm(t.param(f.ps.at("a")), t.param(f.ps.at("g")), t.param(f.ps.at("beta")));
    Var y = ad::matmul(x, t.param(f.ps.at("w")));
    Var z = ad::matmul_nt(y, y);
    return ad::sum(ad::mul(z, z));
  };
  CHECK(stats::grad_check(loss, f.ps, 30) < 1e-6);
}

TEST_CASE("masked multi-head attention passes finite differences") {
  std::mt19937_64 rng(6);
  ad::ParamStore ps;
  ps.add("q", nn::normal_matrix(2, 8, 1.0, rng));
  ps.add("kv", nn::normal_matrix(5, 8, 1.0, rng));
  const Mat probe = nn::normal_matrix(2, 8, 1.0, rng);
  const std::vector<std::uint8_t> keep{1, 0, 1, 1, 0};
  auto loss = [&](Tape& t) {
    Var kv = t.param(ps.at("kv"));
    return ad::sum(ad::mul_const(ad::multihead_attention(t.param(ps.at("q")), kv, kv, 2, keep), probe));
  };
  CHECK(stats::grad_check(loss, ps, 30) < 1e-6);
}

TEST_CASE("masked keys receive no attention") {
  Tape t(false);
  Mat k = Mat::Random(3, 4);
  Mat v = Mat::Random(3, 4);
  Mat v2 = v;
  v2.row(1).setConstant(100.0);
  const Mat q = Mat::Random(2, 4);
  const std::vector<std::uint8_t> keep{1, 0, 1};
  const Mat a = ad::multihead_attention(t.constant(q), t.constant(k), t.constant(v), 2, keep).value();
  const Mat b = ad::multihead_attention(t.constant(q), t.constant(k), t.constant(v2), 2, keep).value();
  CHECK((a - b).norm() == 0.0);
}

TEST_CASE("cross entropy passes finite differences and matches closed form") {
  Fixture f(4, 3);
  const std::vector<int> y{0, 2, 1, 2};
  auto loss = [&](Tape& t) { return ad::cross_entropy(t.param(f.ps.at("a")), y); };
  CHECK(stats::grad_check(loss, f.ps, 12) < 1e-6);

  Tape t;
  const double v = ad::cross_entropy(t.constant(Mat::Zero(2, 4)), {1, 3}).scalar();
  CHECK(v == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("transformer block passes finite differences") {
  ad::ParamStore ps;
  std::mt19937_64 rng(9);
  nn::add_transformer_block(ps, "blk", 8, 16, rng);
  ps.add("x", nn::normal_matrix(4, 8, 1.0, rng));
  const Mat probe = nn::normal_matrix(4, 8, 1.0, rng);
  auto loss = [&](Tape& t) {
    return ad::sum(ad::mul_const(nn::transformer_block(t, t.param(ps.at("x")), ps, "blk", 2, {1, 1, 0, 1}), probe));
  };
  CHECK(stats::grad_check(loss, ps, 40, 1e-4) < 1e-5);
}

TEST_CASE("frozen parameters enter as constants") {
  ad::ParamStore ps;
  ps.add("w", Mat::Ones(2, 2), true);
  ps.add("v", Mat::Ones(2, 2));
  ps.zero_grad();
  Tape t;
  t.backward(ad::sum(ad::mul(t.param(ps.at("w")), t.param(ps.at("v")))));
  CHECK(ps.at("w").grad.norm() == 0.0);
  CHECK(ps.at("v").grad.isApprox(Mat::Ones(2, 2)));
}

TEST_CASE("no-grad tape computes the same values") {
  ad::ParamStore ps;
  ps.add("w", Mat::Random(3, 3));
  Tape a, b(false);
  const Mat x = Mat::Random(2, 3);
  const Mat ya = ad::softmax_rows(ad::matmul(a.constant(x), a.param(ps.at("w")))).value();
  const Mat yb = ad::softmax_rows(ad::matmul(b.constant(x), b.param(ps.at("w")))).value();
  CHECK((ya - yb).norm() == 0.0);
}

TEST_CASE("cosine schedule and seed mixing") {
  CHECK(nn::cosine_lr(1.0, 0, 10) == doctest::Approx(1.0));
  CHECK(nn::cosine_lr(1.0, 10, 10) == doctest::Approx(0.0));
  CHECK(nn::cosine_lr(1.0, 5, 10) == doctest::Approx(0.5));
  // Four warmup steps, then cosine over the remaining ten.
  CHECK(nn::cosine_lr(1.0, 0, 14, 4) == doctest::Approx(0.25));
  CHECK(nn::cosine_lr(1.0, 3, 14, 4) == doctest::Approx(1.0));
  CHECK(nn::cosine_lr(1.0, 4, 14, 4) == doctest::Approx(1.0));
  CHECK(nn::cosine_lr(1.0, 9, 14, 4) == doctest::Approx(0.5));
  CHECK(nn::cosine_lr(1.0, 14, 14, 4) == doctest::Approx(0.0));
  CHECK(nn::mix_seed(1, 2) == nn::mix_seed(1, 2));
  CHECK(nn::mix_seed(1, 2) != nn::mix_seed(2, 1));
}

TEST_CASE("Adam moves a parameter towards the minimum") {
  ad::ParamStore ps;
  ps.add("w", Mat::Constant(1, 1, 3.0));
  nn::Adam opt({0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 200; ++i) {
    ps.zero_grad();
    Tape t;
    Var w = t.param(ps.at("w"));
    t.backward(ad::sum(ad::mul(w, w)));
    opt.step(ps, 0.05);
  }
  CHECK(std::abs(ps.at("w").value(0, 0)) < 0.1);
}
