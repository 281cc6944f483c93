// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/corpus.hpp"
#include "mstar/errors.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

using namespace mstar;
using corpus::FMat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mstar_test_" + name);
  fs::remove_all(p);
  return p;
}

bool same_bits(const FMat& a, const FMat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_cases(const corpus::Cohort& a, const corpus::Cohort& b) {
  if (a.cases.size() != b.cases.size()) return false;
  for (std::size_t i = 0; i < a.cases.size(); ++i) {
    const auto &x = a.cases[i], &y = b.cases[i];
    if (x.case_id != y.case_id || x.cancer_type != y.cancer_type || x.class_label != y.class_label ||
        x.report_tokens != y.report_tokens || x.os_months != y.os_months || x.censor != y.censor ||
        x.has_report != y.has_report || x.has_gene != y.has_gene || !same_bits(x.patch_raw, y.patch_raw) ||
        !same_bits(x.patch_feat, y.patch_feat) || !same_bits(x.gene_expr, y.gene_expr)) {
      return false;
    }
  }
  return true;
}

corpus::Cohort labelled(const std::vector<int>& labels) {
  corpus::Cohort c;
  c.n_cancer_types = 1 + *std::max_element(labels.begin(), labels.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    corpus::Case cs;
    cs.case_id = "c" + std::to_string(i);
    cs.cancer_type = labels[i];
    cs.class_label = labels[i];
    c.cases.push_back(cs);
  }
  return c;
}

}  // namespace

TEST_CASE("synth_cohort is deterministic and respects its invariants") {
  corpus::SynthConfig cfg;
  cfg.n_cases = 40;
  cfg.seed = 7;
  cfg.report_dropout = 0.2;
  const auto a = corpus::synth_cohort(cfg);
  const auto b = corpus::synth_cohort(cfg);
  CHECK(same_cases(a, b));
  for (const auto& c : a.cases) {
    CHECK(c.n_patches() >= cfg.patches_per_case.first);
    CHECK(c.n_patches() <= cfg.patches_per_case.second);
    CHECK((c.censor == 0 || c.censor == 1));
    if (c.has_gene) CHECK(c.gene_expr.minCoeff() >= 0.0f);
    for (int t : c.report_tokens) CHECK((t >= 0 && t < cfg.vocab_size));
  }
  cfg.seed = 8;
  CHECK_FALSE(same_cases(a, corpus::synth_cohort(cfg)));
}

TEST_CASE("synth_cohort rejects invalid configs") {
  corpus::SynthConfig cfg;
  cfg.patches_per_case = {10, 5};
  CHECK_THROWS_AS(corpus::synth_cohort(cfg), DataError);
  cfg = {};
  cfg.informative_patch_frac = 1.5;
  CHECK_THROWS_AS(corpus::synth_cohort(cfg), DataError);
  cfg = {};
  cfg.n_cases = -1;
  CHECK_THROWS_AS(corpus::synth_cohort(cfg), DataError);
}

TEST_CASE("noiseless patch bag mean is a linear image of the latent") {
  corpus::SynthConfig cfg;
  cfg.n_cases = 30;
  cfg.noise_sigma = 0;
  cfg.informative_patch_frac = 1;
  cfg.seed = 3;
  const auto co = corpus::synth_cohort(cfg);
  // Stack [z | bag mean]; the means lie in the span of the z's, so the rank
  // of [Z | B] equals the rank of Z.
  Eigen::MatrixXd Z(cfg.n_cases, cfg.latent_dim), B(cfg.n_cases, cfg.patch_raw_dim);
  for (int i = 0; i < cfg.n_cases; ++i) {
    Z.row(i) = co.latents[static_cast<std::size_t>(i)].transpose();
    B.row(i) = corpus::to_double(co.cases[static_cast<std::size_t>(i)].patch_raw).colwise().mean();
  }
  Eigen::MatrixXd ZB(cfg.n_cases, cfg.latent_dim + cfg.patch_raw_dim);
  ZB << Z, B;
  Eigen::FullPivLU<Eigen::MatrixXd> lu_z(Z), lu_zb(ZB);
  lu_z.setThreshold(1e-5);
  lu_zb.setThreshold(1e-5);
  CHECK(lu_z.rank() == cfg.latent_dim);
  CHECK(lu_zb.rank() == lu_z.rank());
}

namespace {

/// Ridge one-hot regression fitted on rows [0, n_fit) and scored by argmax on
/// rows [from, to).
int ridge_probe_hits(const Eigen::MatrixXd& X, const std::vector<int>& y, int C, double ridge, int n_fit, int from,
                     int to) {
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n_fit, C);
  for (int i = 0; i < n_fit; ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1;
  const Eigen::MatrixXd A = X.topRows(n_fit);
  const Eigen::MatrixXd W =
      (A.transpose() * A + ridge * Eigen::MatrixXd::Identity(X.cols(), X.cols())).ldlt().solve(A.transpose() * Y);
  const Eigen::MatrixXd P = X.middleRows(from, to - from) * W;
  int right = 0;
  for (int i = 0; i < to - from; ++i) {
    Eigen::Index arg;
    P.row(i).maxCoeff(&arg);
    right += static_cast<int>(arg) == y[static_cast<std::size_t>(from + i)];
  }
  return right;
}

}  // namespace

TEST_CASE("a linear probe on gene expression recovers the class label") {
  corpus::SynthConfig cfg;
  cfg.n_cases = 500;
  cfg.seed = 1;
  const auto co = corpus::synth_cohort(cfg);
  // log1p features plus a bias column; the ridge strength is picked on cases
  // 300..399 with the fit on 0..299, then refit on 0..399 and scored on the
  // last 100.
  const int G = cfg.n_genes, C = co.n_classes;
  Eigen::MatrixXd X(500, G + 1);
  std::vector<int> y;
  for (int i = 0; i < 500; ++i) {
    const auto& c = co.cases[static_cast<std::size_t>(i)];
    for (int g = 0; g < G; ++g) X(i, g) = std::log1p(static_cast<double>(c.gene_expr(0, g)));
    X(i, G) = 1;
    y.push_back(c.class_label);
  }
  double best_ridge = 0;
  int best_hits = -1;
  for (double ridge : {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4}) {
    const int hits = ridge_probe_hits(X, y, C, ridge, 300, 300, 400);
    if (hits > best_hits) {
      best_hits = hits;
      best_ridge = ridge;
    }
  }
  CAPTURE(best_ridge);
  CHECK(ridge_probe_hits(X, y, C, best_ridge, 400, 400, 500) > 90);
}

TEST_CASE("MSTR files have a 16-byte header and round-trip bitwise") {
  FMat m(3, 4);
  for (int i = 0; i < 12; ++i) m.data()[i] = static_cast<float>(i) * 0.37f - 1.0f;
  m(0, 0) = -0.0f;
  m(2, 3) = std::numeric_limits<float>::denorm_min();
  const auto dir = scratch("mstr");
  fs::create_directories(dir);
  corpus::write_mstr(dir / "a.mstr", m);
  CHECK(fs::file_size(dir / "a.mstr") == 16 + 48);
  CHECK(same_bits(corpus::read_mstr(dir / "a.mstr"), m));
  const auto bytes = corpus::encode_mstr(m);
  CHECK(std::memcmp(bytes.data(), "MSTR", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 4);
}

TEST_CASE("MSTR decoding reports distinct errors") {
  FMat m = FMat::Ones(2, 2);
  auto code_of = [](const std::vector<std::uint8_t>& b) {
    try {
      corpus::decode_mstr(b);
    } catch (const FormatError& e) {
      return static_cast<int>(e.code());
    }
    return -1;
  };
  auto bad_magic = corpus::encode_mstr(m);
  bad_magic[0] = 'X';
  auto bad_version = corpus::encode_mstr(m);
  bad_version[4] = 2;
  auto truncated = corpus::encode_mstr(m);
  truncated.pop_back();
  auto trailing = corpus::encode_mstr(m);
  trailing.push_back(0);
  CHECK(code_of(bad_magic) == static_cast<int>(FormatErrc::bad_magic));
  CHECK(code_of(bad_version) == static_cast<int>(FormatErrc::bad_version));
  CHECK(code_of(truncated) == static_cast<int>(FormatErrc::truncated));
  CHECK(code_of(trailing) == static_cast<int>(FormatErrc::trailing_bytes));
  CHECK(code_of(std::vector<std::uint8_t>{'M', 'S'}) == static_cast<int>(FormatErrc::truncated));
}

TEST_CASE("cohort directories round-trip") {
  corpus::SynthConfig cfg;
  cfg.n_cases = 50;
  cfg.seed = 2;
  cfg.report_dropout = 0.2;
  cfg.gene_dropout = 0.2;
  auto co = corpus::synth_cohort(cfg);
  for (auto& c : co.cases) c.patch_feat = c.patch_raw.leftCols(5) * 2.0f;
  const auto dir = scratch("cohort");
  corpus::write_cohort(co, dir);
  const auto back = corpus::read_cohort(dir);
  CHECK(same_cases(co, back));
  CHECK(back.n_cancer_types == co.n_cancer_types);
  CHECK(back.n_classes == co.n_classes);

  corpus::Cohort empty;
  empty.n_cancer_types = 1;
  empty.n_classes = 1;
  const auto dir2 = scratch("cohort_empty");
  corpus::write_cohort(empty, dir2);
  CHECK(corpus::read_cohort(dir2).cases.empty());
}

TEST_CASE("cohort reader flags missing files and manifest mismatches") {
  corpus::SynthConfig cfg;
  cfg.n_cases = 3;
  const auto co = corpus::synth_cohort(cfg);
  const auto dir = scratch("cohort_broken");
  corpus::write_cohort(co, dir);
  fs::remove(dir / "raw" / (co.cases[1].case_id + ".mstr"));
  try {
    corpus::read_cohort(dir);
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(e.code() == FormatErrc::missing_file);
  }
  corpus::write_cohort(co, dir);
  // A gene file with the wrong width no longer matches the manifest.
  corpus::write_mstr(dir / "gene" / (co.cases[0].case_id + ".mstr"), FMat::Ones(1, 3));
  try {
    corpus::read_cohort(dir);
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(e.code() == FormatErrc::manifest_mismatch);
  }
}

TEST_CASE("split_cohort examples") {
  auto count = [](const corpus::SplitAssignment& s, corpus::Split w) {
    int n = 0;
    for (const auto& [id, v] : s) n += v == w;
    return n;
  };
  const auto one = corpus::split_cohort(labelled(std::vector<int>(10, 0)));
  CHECK(count(one, corpus::Split::train) == 7);
  CHECK(count(one, corpus::Split::val) == 1);
  CHECK(count(one, corpus::Split::test) == 2);

  std::vector<int> two(100);
  for (int i = 0; i < 100; ++i) two[static_cast<std::size_t>(i)] = i % 2;
  const auto co = labelled(two);
  const auto s = corpus::split_cohort(co, {7, 1, 2}, corpus::StratifyKey::class_label, 4);
  CHECK(count(s, corpus::Split::train) == 70);
  CHECK(count(s, corpus::Split::val) == 10);
  CHECK(count(s, corpus::Split::test) == 20);
  for (int c = 0; c < 2; ++c) {
    std::map<corpus::Split, int> per;
    for (const auto& cs : co.cases) {
      if (cs.class_label == c) per[s.at(cs.case_id)]++;
    }
    CHECK(per[corpus::Split::train] == 35);
    CHECK(per[corpus::Split::val] == 5);
    CHECK(per[corpus::Split::test] == 10);
  }
  CHECK_THROWS_AS(corpus::split_cohort(labelled({0, 0, 1, 1, 1})), DataError);
}

TEST_CASE("split_cohort keeps every stratum within one case of the target") {
  std::mt19937_64 rng(1023);
  std::vector<int> labels(1023);
  for (auto& l : labels) {
    const double u = std::uniform_real_distribution<double>(0, 1)(rng);
    l = u < 0.6 ? 0 : u < 0.85 ? 1 : u < 0.97 ? 2 : 3;
  }
  const auto co = labelled(labels);
  const auto s = corpus::split_cohort(co, {7, 1, 2}, corpus::StratifyKey::cancer_type, 9);
  CHECK(s.size() == co.cases.size());
  for (int c = 0; c < 4; ++c) {
    std::map<corpus::Split, double> per;
    double total = 0;
    for (const auto& cs : co.cases) {
      if (cs.cancer_type != c) continue;
      per[s.at(cs.case_id)] += 1;
      total += 1;
    }
    CHECK(std::abs(per[corpus::Split::train] - 0.7 * total) <= 1.0);
    CHECK(std::abs(per[corpus::Split::val] - 0.1 * total) <= 1.0);
    CHECK(std::abs(per[corpus::Split::test] - 0.2 * total) <= 1.0);
  }
  CHECK(s == corpus::split_cohort(co, {7, 1, 2}, corpus::StratifyKey::cancer_type, 9));
}

TEST_CASE("fix_bag examples") {
  Eigen::MatrixXd x(2, 2);
  x << 0, 0, 2, 4;
  const auto padded = corpus::fix_bag(x, 4, 0);
  REQUIRE(padded.rows() == 4);
  CHECK(padded.row(2) == Eigen::RowVector2d(1, 2));
  CHECK(padded.row(3) == Eigen::RowVector2d(1, 2));
  CHECK(padded.topRows(2) == x);
  CHECK(padded.colwise().mean().isApprox(x.colwise().mean()));

  const Eigen::MatrixXd same = Eigen::MatrixXd::Random(5, 3);
  CHECK(corpus::fix_bag(same, 5, 1) == same);
  CHECK_THROWS_AS(corpus::fix_bag(same, 0, 1), DataError);
}

TEST_CASE("fix_bag subsampling is seeded and draws distinct input rows") {
  Eigen::MatrixXd x(100, 2);
  for (int i = 0; i < 100; ++i) x.row(i) << i, -i;
  const auto a = corpus::fix_bag(x, 10, 42);
  CHECK(a == corpus::fix_bag(x, 10, 42));
  std::set<int> rows;
  for (int r = 0; r < 10; ++r) {
    const double v = a(r, 0);
    CHECK(v == std::floor(v));
    CHECK(a(r, 1) == -v);
    rows.insert(static_cast<int>(v));
  }
  CHECK(rows.size() == 10);
  CHECK_FALSE(a == corpus::fix_bag(x, 10, 43));
}
