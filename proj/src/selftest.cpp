// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/selftest.hpp"

#include "mstar/corpus.hpp"
#include "mstar/downstream.hpp"
#include "mstar/stage1.hpp"
#include "mstar/stage2.hpp"
#include "mstar/stats.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

namespace mstar::selftest {

namespace {

struct Check {
  std::string name;
  std::function<bool()> fn;
};

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace

bool run(std::ostream& out) {
  using ad::Mat;
  const std::vector<Check> checks = {
      {"info_nce orthonormal pair at tau=1",
       [] {
         ad::Tape t;
         const Mat I = Mat::Identity(2, 2);
         const double v = stage1::info_nce_pair(t.constant(I), t.constant(I), 1.0).value()(0, 0);
         return near(v, -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-6);
       }},
      {"triplet hinge with violated margin",
       [] {
         ad::Tape t;
         Mat b(4, 1);
         b << 0.0, 0.2, 1.0, 0.25;
         stage1::AnchorSet s{t.constant(b), {0, 0, 1, 1}, 0.3};
         // anchor 0: dpos 0.2, dneg 0.25 -> 0.25; anchor 1: dpos 0.2, dneg 0.05 -> 0.45;
         // anchor 2: dpos 0.75, dneg 0.8 -> 0.25; anchor 3: dpos 0.75, dneg 0.05 -> 1.0.
         const double v = stage1::triplet_hard(s).value()(0, 0);
         return near(v, (0.25 + 0.45 + 0.25 + 1.0) / 4.0, 1e-12);
       }},
      {"survival nll with h=0.5 uncensored in bin 1",
       [] {
         Eigen::RowVectorXd l = Eigen::RowVectorXd::Zero(4);
         return near(downstream::nll_surv_value(l, 1, 0), std::log(2.0), 1e-9);
       }},
      {"survival nll with h=0.5 censored in bin 1",
       [] {
         Eigen::RowVectorXd l = Eigen::RowVectorXd::Zero(4);
         return near(downstream::nll_surv_value(l, 1, 1), std::log(2.0), 1e-9);
       }},
      {"critical difference k=5 N=12 q=2",
       [] {
         const Mat table = Mat::Zero(12, 5);
         return near(stats::avg_rank_cd(table, 2.0).cd, 1.2910, 1e-4);
       }},
      {"c-index of perfectly ordered risks",
       [] {
         const std::vector<double> r{3, 2, 1}, t{1, 2, 3};
         const std::vector<std::uint8_t> e{1, 1, 1};
         return stats::c_index(r, t, e) == 1.0;
       }},
      {"distill loss at lambda 0.6",
       [] {
         ad::Tape t;
         const Mat fp = Mat::Constant(2, 3, 1.0), teach = Mat::Zero(2, 3);
         const Mat st = Mat::Constant(2, 3, 2.0), ema = Mat::Constant(2, 3, 1.75);
         const auto d = stage2::distill_loss(t.constant(fp), t.constant(teach), t.constant(st), t.constant(ema), 0.6,
                                             stage2::Reduction::sum);
         return near(d.loss.value()(0, 0), 0.6 * 6.0 + 0.4 * 1.5, 1e-12);
       }},
      {"MSTR round trip",
       [] {
         corpus::FMat m(2, 3);
         m << 1.5f, -0.0f, 3.25f, 1e-30f, 7.0f, -2.0f;
         const auto back = corpus::decode_mstr(corpus::encode_mstr(m));
         return back.rows() == 2 && back.cols() == 3 && std::memcmp(back.data(), m.data(), sizeof(float) * 6) == 0;
       }},
  };
  bool ok = true;
  for (const auto& c : checks) {
    bool pass = false;
    try {
      pass = c.fn();
    } catch (const std::exception&) {
      pass = false;
    }
    out << (pass ? "PASS " : "FAIL ") << c.name << "\n";
    ok = ok && pass;
  }
  return ok;
}

}  // namespace mstar::selftest
