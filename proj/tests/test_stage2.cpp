// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/corpus.hpp"
#include "mstar/errors.hpp"
#include "mstar/nn.hpp"
#include "mstar/stage1.hpp"
#include "mstar/stage2.hpp"
#include "mstar/stats.hpp"

#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <random>

using namespace mstar;
using ad::Mat;
using ad::Tape;
namespace fs = std::filesystem;

namespace {

stage2::DistillTerms distill(const Mat& fp, const Mat& teacher, const Mat& s, const Mat& e, double lambda,
                             stage2::Reduction r = stage2::Reduction::mean) {
  Tape t;
  return stage2::distill_loss(t.constant(fp), t.constant(teacher), t.constant(s), t.constant(e), lambda, r);
}

/// Moves every entry at least `gap` away from its counterpart so the L1
/// terms stay off their kinks.
Mat away_from(const Mat& ref, Mat m, double gap) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double d = m.data()[i] - ref.data()[i];
    if (std::abs(d) < gap) m.data()[i] = ref.data()[i] + (d < 0 ? -gap : gap);
  }
  return m;
}

}  // namespace

TEST_CASE("distill loss examples") {
  const Mat x = Mat::Random(3, 4), y = Mat::Random(3, 5);
  CHECK(distill(x, x, y, y, 0.6).loss.scalar() == 0.0);
  Mat hat(2, 1);
  hat << 1, -1;
  CHECK(distill(Mat::Zero(2, 1), hat, Mat::Zero(2, 1), Mat::Zero(2, 1), 1.0).loss.scalar() == 1.0);
  const auto sum = distill(Mat::Zero(2, 1), hat, Mat::Ones(2, 1), Mat::Zero(2, 1), 0.5, stage2::Reduction::sum);
  CHECK(sum.loss.scalar() == doctest::Approx(0.5 * 2 + 0.5 * 2));
  CHECK(sum.teacher_l1 == 1.0);
  CHECK(sum.ema_l1 == 1.0);
  CHECK_THROWS_AS(distill(x, x, y, y, 1.2), DataError);
  CHECK_THROWS_AS(distill(x, Mat::Zero(2, 4), y, y, 0.5), DataError);
}

TEST_CASE("distill loss gradient matches finite differences off the kinks") {
  std::mt19937_64 rng(1);
  ad::ParamStore ps;
  const Mat teacher = nn::normal_matrix(4, 3, 1.0, rng);
  const Mat ema = nn::normal_matrix(4, 5, 1.0, rng);
  ps.add("fp", away_from(teacher, nn::normal_matrix(4, 3, 1.0, rng), 1e-2));
  ps.add("s", away_from(ema, nn::normal_matrix(4, 5, 1.0, rng), 1e-2));
  for (auto red : {stage2::Reduction::mean, stage2::Reduction::sum}) {
    auto loss = [&](Tape& t) {
      return stage2::distill_loss(t.param(ps.at("fp")), t.constant(teacher), t.param(ps.at("s")), t.constant(ema), 0.6,
                                  red)
          .loss;
    };
    CHECK(stats::grad_check(loss, ps, 32) <= 1e-4);
  }
}

TEST_CASE("distill loss is unchanged by a shared patch permutation") {
  std::mt19937_64 rng(2);
  const Mat a = nn::normal_matrix(5, 3, 1.0, rng), b = nn::normal_matrix(5, 3, 1.0, rng);
  const Mat c = nn::normal_matrix(5, 2, 1.0, rng), d = nn::normal_matrix(5, 2, 1.0, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> p(5);
  p.indices() << 4, 2, 0, 1, 3;
  CHECK(distill(a, b, c, d, 0.6).loss.scalar() ==
        doctest::Approx(distill(p * a, p * b, p * c, p * d, 0.6).loss.scalar()).epsilon(1e-14));
}

TEST_CASE("teacher re-embedding is deterministic and row-equivariant") {
  encoders::EncoderConfig ec;
  ec.seed = 4;
  const encoders::Encoders enc(ec);
  const Mat bag = Mat::Random(7, 64);
  CHECK(stage2::teacher_reembed(enc, bag) == stage2::teacher_reembed(enc, bag));
  Eigen::PermutationMatrix<Eigen::Dynamic> p(7);
  p.indices() << 6, 0, 5, 1, 4, 2, 3;
  const Mat a = p * stage2::teacher_reembed(enc, bag);
  const Mat b = stage2::teacher_reembed(enc, p * bag);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("teacher targets round-trip through the cache") {
  corpus::SynthConfig sc;
  sc.n_cases = 2;
  sc.seed = 5;
  const auto co = corpus::synth_cohort(sc);
  encoders::EncoderConfig ec;
  ec.seed = 5;
  const encoders::Encoders enc(ec);
  const fs::path dir = fs::temp_directory_path() / "mstar_test_teacher_cache";
  fs::remove_all(dir);
  const auto fresh = stage2::teacher_targets(enc, co.cases[0], 32, 9, dir);
  CHECK(fs::exists(dir / (co.cases[0].case_id + ".mstr")));
  const auto cached = stage2::teacher_targets(enc, co.cases[0], 32, 9, dir);
  const auto uncached = stage2::teacher_targets(enc, co.cases[0], 32, 9);
  CHECK(fresh.tokens == cached.tokens);
  CHECK(fresh.tokens == uncached.tokens);
  CHECK(fresh.plan == uncached.plan);
}

TEST_CASE("stage-2 training shrinks the teacher gap and freezes everything else") {
  corpus::SynthConfig sc;
  sc.n_cases = 24;
  sc.seed = 6;
  sc.patches_per_case = {20, 40};
  const auto co = corpus::synth_cohort(sc);
  encoders::EncoderConfig ec;
  ec.seed = 6;
  encoders::Encoders enc(ec);
  std::vector<std::size_t> tr(16), te(8);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), 16);
  const auto before = stage2::heldout_teacher_l1(enc, co, te, 32, 1);
  const auto frozen = [&] {
    std::uint64_t h = 0;
    for (const char* p : {"base.", "agg.", "text.", "gene.", "proj.slide.", "proj.text.", "proj.gene.", "logit_scale"}) {
      h = h * 31 + ad::hash_params(enc.params(), p);
    }
    return h;
  };
  const auto h0 = frozen();
  stage2::Stage2Config cfg;
  cfg.epochs = 8;
  cfg.m_fix = 32;
  cfg.seed = 1;
  const auto log = stage2::train_stage2(enc, co, tr, cfg);
  CHECK(log.back().teacher_l1 < log.front().teacher_l1);
  CHECK(stage2::heldout_teacher_l1(enc, co, te, 32, 1) < before);
  CHECK(frozen() == h0);
  // The EMA branch trails the student.
  const Mat s = enc.params().at("student.fc1.w").value, e = enc.params().at("ema.fc1.w").value,
            b = enc.params().at("base.fc1.w").value;
  CHECK((e - b).norm() > 0);
  CHECK((e - b).norm() < (s - b).norm());
}

TEST_CASE("stage2 config parsing") {
  const auto c = nlohmann::json{{"lambda", 0.3}, {"loss_reduction", "sum"}}.get<stage2::Stage2Config>();
  CHECK(c.lambda == 0.3);
  CHECK(c.reduction == stage2::Reduction::sum);
  CHECK(c.ema_decay == 0.999);
  CHECK_THROWS_AS((nlohmann::json{{"lambda", 2.0}}.get<stage2::Stage2Config>()), DataError);
  CHECK_THROWS_AS(stage2::reduction_from_string("median"), DataError);
}
