// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/autograd.hpp"
#include "mstar/errors.hpp"
#include "mstar/stats.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace mstar;

TEST_CASE("macro_auc trivial cases") {
  Eigen::MatrixXd s(4, 2);
  s << 0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9;
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(stats::macro_auc(s, y) == 1.0);
  CHECK(stats::macro_auc(Eigen::MatrixXd::Constant(4, 2, 0.3), y) == 0.5);
  CHECK_THROWS_AS(stats::macro_auc(s, std::vector<int>{1, 1, 1, 1}), DataError);
}

TEST_CASE("macro_auc matches the pairwise oracle") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 50, C = 3;
    Eigen::MatrixXd s(n, C);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % C);
      // Coarse rounding creates ties on purpose.
      for (int c = 0; c < C; ++c) s(i, c) = std::round(n01(rng) * 4) / 4 + (c == y[static_cast<std::size_t>(i)]) * 0.5;
    }
    CHECK(std::abs(stats::macro_auc(s, y) - oracle::macro_auc(s, y)) <= 1e-12);
  }
}

TEST_CASE("macro_auc skips classes absent from the labels") {
  Eigen::MatrixXd s(4, 3);
  s.setRandom();
  std::vector<int> skipped;
  const double v = stats::macro_auc(s, std::vector<int>{0, 0, 1, 1}, &skipped);
  CHECK(skipped == std::vector<int>{2});
  CHECK(std::abs(v - oracle::macro_auc(s, {0, 0, 1, 1})) <= 1e-12);
}

TEST_CASE("c_index trivial cases") {
  const std::vector<std::uint8_t> ev{1, 1};
  CHECK(stats::c_index(std::vector<double>{2, 1}, std::vector<double>{1, 2}, ev) == 1.0);
  CHECK(stats::c_index(std::vector<double>{1, 1}, std::vector<double>{1, 2}, ev) == 0.5);
}

TEST_CASE("c_index matches the pairwise oracle with censoring and ties") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 200;
    std::vector<double> r(n), t(n);
    std::vector<std::uint8_t> e(n);
    for (int i = 0; i < n; ++i) {
      r[static_cast<std::size_t>(i)] = std::round(u(rng) * 30);
      t[static_cast<std::size_t>(i)] = std::round(u(rng) * 50);
      e[static_cast<std::size_t>(i)] = u(rng) < 0.7;
    }
    CHECK(std::abs(stats::c_index(r, t, e) - oracle::c_index(r, t, e)) <= 1e-12);
  }
}

TEST_CASE("rank metrics are invariant under increasing transforms") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  const int n = 60;
  Eigen::MatrixXd s(n, 2);
  std::vector<int> y(n);
  std::vector<double> r(n), r2(n), t(n);
  std::vector<std::uint8_t> e(n);
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % 2;
    s(i, 0) = n01(rng);
    s(i, 1) = n01(rng);
    r[static_cast<std::size_t>(i)] = n01(rng);
    r2[static_cast<std::size_t>(i)] = std::exp(3 * r[static_cast<std::size_t>(i)]) + 1;
    t[static_cast<std::size_t>(i)] = std::abs(n01(rng));
    e[static_cast<std::size_t>(i)] = i % 3 != 0;
  }
  const Eigen::MatrixXd s2 = s.array().exp() * 2.0 - 1.0;
  CHECK(stats::macro_auc(s, y) == stats::macro_auc(s2, y));
  CHECK(stats::c_index(r, t, e) == stats::c_index(r2, t, e));
}

TEST_CASE("bootstrap_ci trivial properties") {
  stats::IndexMetric constant = [](std::span<const std::size_t>) -> std::optional<double> { return 0.25; };
  const auto c = stats::bootstrap_ci(constant, 30, 200, 1);
  CHECK(c.point == 0.25);
  CHECK(c.lo == 0.25);
  CHECK(c.hi == 0.25);

  std::vector<double> x{1, 4, 2, 8, 5, 7};
  stats::IndexMetric mean = [&](std::span<const std::size_t> idx) -> std::optional<double> {
    double s = 0;
    for (std::size_t i : idx) s += x[i];
    return s / static_cast<double>(idx.size());
  };
  const auto a = stats::bootstrap_ci(mean, x.size(), 500, 9);
  const auto b = stats::bootstrap_ci(mean, x.size(), 500, 9);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  CHECK(a.lo <= a.point);
  CHECK(a.point <= a.hi);
}

TEST_CASE("percentile interpolates between order statistics") {
  CHECK(stats::percentile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(stats::percentile({4, 1, 3, 2}, 0.0) == 1.0);
  CHECK(stats::percentile({4, 1, 3, 2}, 1.0) == 4.0);
}

TEST_CASE("wilcoxon examples") {
  const std::vector<double> x{1.1, 2.3, 3.2, 4.6, 5.5}, y{1, 2, 3, 4, 5};
  CHECK(stats::wilcoxon_one_sided(x, y) == doctest::Approx(1.0 / 32).epsilon(1e-12));
  // Symmetric alternating differences: W+ sits at the centre of the null.
  const std::vector<double> a{1.01, 2.00, 3.02, 4.00, 5.03, 6.00}, b{1.00, 2.01, 3.00, 4.02, 5.00, 6.03};
  CHECK(stats::wilcoxon_one_sided(a, b) == doctest::Approx(0.5).epsilon(0.15));
  CHECK_THROWS_AS(stats::wilcoxon_one_sided(y, y), DataError);
}

TEST_CASE("wilcoxon exact path equals full sign enumeration") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 1 + static_cast<int>(rng() % 10);
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      // Rounded values produce tied magnitudes and zero differences.
      x[static_cast<std::size_t>(i)] = std::round(n01(rng) * 3) / 3;
      y[static_cast<std::size_t>(i)] = std::round(n01(rng) * 3) / 3;
    }
    bool any = false;
    for (int i = 0; i < n; ++i) any = any || x[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(i)];
    if (!any) continue;
    CHECK(std::abs(stats::wilcoxon_one_sided(x, y) - oracle::wilcoxon_enumerate(x, y)) <= 1e-12);
  }
}

TEST_CASE("midranks agree with counting ranks") {
  const std::vector<double> v{3, 1, 3, 2, 5, 3};
  const auto r = stats::midranks(v);
  const auto o = oracle::ranks_by_counting(v);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(r[i] == o[i]);
}

TEST_CASE("avg_rank_cd examples") {
  Eigen::MatrixXd t(3, 3);
  t << 0.9, 0.8, 0.7, 0.95, 0.6, 0.6, 0.99, 0.5, 0.1;
  const auto r = stats::avg_rank_cd(t, 2.0);
  CHECK(r.avg_ranks[0] == 1.0);
  CHECK(r.avg_ranks[1] == doctest::Approx((2 + 2.5 + 2) / 3.0));
  CHECK(r.avg_ranks[2] == doctest::Approx((3 + 2.5 + 3) / 3.0));
  const auto cd = stats::avg_rank_cd(Eigen::MatrixXd::Zero(12, 5), 2.0);
  CHECK(std::abs(cd.cd - 1.2910) <= 1e-4);
  for (double v : cd.avg_ranks) CHECK(v == 3.0);
}

TEST_CASE("grad_check is exact for a quadratic") {
  ad::ParamStore ps;
  ps.add("w", Eigen::MatrixXd::Random(3, 2));
  const Eigen::MatrixXd target = Eigen::MatrixXd::Random(3, 2);
  auto loss = [&](ad::Tape& t) {
    auto d = ad::sub(t.param(ps.at("w")), t.constant(target));
    return ad::sum(ad::mul(d, d));
  };
  CHECK(stats::grad_check(loss, ps, 6) < 1e-8);
}
