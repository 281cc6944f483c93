// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/corpus.hpp"
#include "mstar/encoders.hpp"
#include "mstar/errors.hpp"
#include "mstar/stats.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace mstar;
using encoders::EncoderConfig;
using encoders::Encoders;
using encoders::Mat;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_config(std::uint64_t seed = 1) {
  EncoderConfig c;
  c.seed = seed;
  return c;
}

Mat permute_rows(const Mat& m, const std::vector<int>& perm) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(perm[i]);
  return out;
}

}  // namespace

TEST_CASE("base extractor examples") {
  const Encoders enc(small_config());
  const Mat zero = encoders::base_extract(enc, Mat::Zero(3, 32));
  CHECK((zero.row(0) - zero.row(1)).norm() < 1e-12);
  CHECK((zero.row(0) - zero.row(2)).norm() < 1e-12);
  const Mat x = Mat::Random(5, 32);
  CHECK(encoders::base_extract(enc, x) == encoders::base_extract(enc, x));
  CHECK(encoders::extract_eval(enc, x, "student") == encoders::base_extract(enc, x));
  CHECK(enc.params().at("base.fc1.w").frozen);
  CHECK(enc.params().at("gene.id_emb").frozen);
  CHECK_FALSE(enc.params().at("student.fc1.w").frozen);
}

TEST_CASE("slide aggregator is permutation invariant without positions") {
  const Encoders enc(small_config(2));
  const Mat f = Mat::Random(9, 64);
  const std::vector<int> perm{3, 8, 0, 1, 7, 2, 6, 5, 4};
  const auto a = encoders::slide_aggregate_eval(enc, f);
  const auto b = encoders::slide_aggregate_eval(enc, permute_rows(f, perm));
  CHECK((a.cls - b.cls).cwiseAbs().maxCoeff() < 1e-5);
  CHECK((permute_rows(a.tokens, perm) - b.tokens).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("slide aggregator gradient matches finite differences") {
  Encoders enc(small_config(3));
  std::mt19937_64 rng(3);
  ad::ParamStore feats;
  feats.add("f", Mat::Random(4, 64));
  auto loss = [&](ad::Tape& t) { return ad::sum(encoders::slide_aggregate(t, enc, t.param(feats.at("f"))).cls); };
  CHECK(stats::grad_check(loss, feats, 40) <= 1e-4);
}

TEST_CASE("text encoder masks pads and windows deterministically") {
  const Encoders enc(small_config(4));
  const auto pads = encoders::text_encode_eval(enc, std::vector<int>(6, corpus::TokenLayout::kPad));
  const auto empty = encoders::text_encode_eval(enc, {});
  CHECK((pads - empty).cwiseAbs().maxCoeff() < 1e-12);

  std::vector<int> long_report(100);
  std::iota(long_report.begin(), long_report.end(), 2);
  std::mt19937_64 r1(7), r2(7);
  const auto a = encoders::prepare_text(long_report, 64, 256, &r1);
  const auto b = encoders::prepare_text(long_report, 64, 256, &r2);
  CHECK(a.ids == b.ids);
  CHECK(a.ids.size() == 64);
  CHECK(encoders::prepare_text(long_report, 64, 256).ids.front() == 2);
  CHECK_THROWS_AS(encoders::prepare_text({300}, 64, 256), DataError);
}

TEST_CASE("gene tokenization examples") {
  const encoders::GeneBinning b{0.5, 2.5, 8};
  const std::vector<double> zeros(5, 0.0);
  for (int t : encoders::gene_tokenize(zeros, b).bins) CHECK(t == 0);
  const std::vector<double> edge{std::expm1(0.5), std::expm1(2.5), std::expm1(9.0), std::expm1(0.1)};
  const auto t = encoders::gene_tokenize(edge, b).bins;
  CHECK(t[0] == 1);
  CHECK(t[1] == 7);
  CHECK(t[2] == 7);
  CHECK(t[3] == 1);
  CHECK_THROWS_AS(encoders::gene_tokenize(std::vector<double>{-1.0}, b), DataError);
}

TEST_CASE("gene bins are monotone in expression") {
  std::mt19937_64 rng(12);
  std::exponential_distribution<double> ex(0.3);
  std::vector<double> v(300);
  for (auto& x : v) x = ex(rng);
  v[0] = 0;
  const encoders::GeneBinning b{0.2, 3.0, 8};
  const auto bins = encoders::gene_tokenize(v, b).bins;
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return v[a] < v[c]; });
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(bins[order[i - 1]] <= bins[order[i]]);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK((bins[i] == 0) == (v[i] == 0));
}

TEST_CASE("gene encoder depends on bins and on gene identity") {
  EncoderConfig c = small_config(5);
  c.n_genes = 6;
  const Encoders enc(c);
  encoders::GeneTokens a{{0, 3, 3, 5, 1, 0}};
  CHECK(encoders::gene_encode_eval(enc, a) == encoders::gene_encode_eval(enc, a));
  // Same bins reached from different raw values.
  const encoders::GeneBinning b{0.0, 3.0, 8};
  const auto t1 = encoders::gene_tokenize(std::vector<double>{1.0, 5.0}, b);
  const auto t2 = encoders::gene_tokenize(std::vector<double>{1.01, 5.01}, b);
  CHECK(t1.bins == t2.bins);
  encoders::GeneTokens p{{3, 0, 3, 5, 1, 0}};
  CHECK((encoders::gene_encode_eval(enc, a) - encoders::gene_encode_eval(enc, p)).norm() > 1e-6);
}

TEST_CASE("gene bin embedding gradient matches finite differences") {
  EncoderConfig c = small_config(6);
  c.n_genes = 5;
  Encoders enc(c);
  const encoders::GeneTokens tok{{0, 2, 7, 2, 1}};
  auto loss = [&](ad::Tape& t) { return ad::sum(encoders::gene_encode(t, enc, tok)); };
  ad::ParamStore& ps = enc.params();
  // Probe only the bin table by freezing everything else for the check.
  std::vector<ad::Parameter*> toggled;
  for (auto* p : ps.all()) {
    if (p->name != "gene.bin_emb" && !p->frozen) {
      p->frozen = true;
      toggled.push_back(p);
    }
  }
  CHECK(stats::grad_check(loss, ps, 40) <= 1e-4);
  for (auto* p : toggled) p->frozen = false;
}

TEST_CASE("projection of zero is the bias") {
  const Encoders enc(small_config(7));
  const Mat z = encoders::project_eval(enc, Mat::Zero(1, 64), encoders::Head::text);
  CHECK(z == enc.params().at("proj.text.b").value);
}

TEST_CASE("ema_update examples") {
  ad::ParamStore ps;
  ps.add("s.w", Mat::Constant(2, 2, 1.0));
  ps.add("e.w", Mat::Zero(2, 2));
  encoders::ema_update(ps, "s.", "e.", 1.0);
  CHECK(ps.at("e.w").value == Mat::Zero(2, 2));
  encoders::ema_update(ps, "s.", "e.", 0.9);
  CHECK(ps.at("e.w").value.isApprox(Mat::Constant(2, 2, 0.1), 1e-15));
  encoders::ema_update(ps, "s.", "e.", 0.0);
  CHECK(ps.at("e.w").value == ps.at("s.w").value);
  CHECK_THROWS_AS(encoders::ema_update(ps, "s.", "e.", 1.5), DataError);
}

TEST_CASE("frozen guard detects modified tensors") {
  Encoders enc(small_config(8));
  encoders::FrozenGuard guard(enc.params(), {"base.", "gene.id_emb"});
  CHECK_NOTHROW(guard.verify(enc.params()));
  enc.params().at("student.fc1.w").value(0, 0) += 1.0;
  CHECK_NOTHROW(guard.verify(enc.params()));
  enc.params().at("base.fc1.w").value(0, 0) += 1e-12;
  CHECK_THROWS_AS(guard.verify(enc.params()), FrozenParameterError);
}

TEST_CASE("checkpoints round-trip parameter-exact") {
  Encoders enc(small_config(9));
  enc.params().at("agg.cls").value(0, 3) = std::nextafter(1.0, 2.0);
  enc.set_binning({0.25, 3.75, 8});
  const fs::path dir = fs::temp_directory_path() / "mstar_test_ckpt";
  fs::create_directories(dir);
  encoders::save_encoders(dir / "a.ckpt", enc, {{"m_fix", 64}});
  nlohmann::json extra;
  const Encoders back = encoders::load_encoders(dir / "a.ckpt", &extra);
  CHECK(extra.at("m_fix") == 64);
  CHECK(back.params().size() == enc.params().size());
  for (const auto* p : enc.params().all()) {
    const auto& q = back.params().at(p->name);
    CHECK(q.frozen == p->frozen);
    CHECK(q.value == p->value);
  }
  CHECK(back.binning().lo == 0.25);
  CHECK(back.binning().hi == 3.75);
  CHECK(ad::hash_params(back.params()) == ad::hash_params(enc.params()));
}

TEST_CASE("checkpoint reader rejects damaged files") {
  const Encoders enc(small_config(10));
  const fs::path dir = fs::temp_directory_path() / "mstar_test_ckpt_bad";
  fs::create_directories(dir);
  encoders::save_encoders(dir / "ok.ckpt", enc);
  std::ifstream in(dir / "ok.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream(dir / name, std::ios::binary) << b;
    return dir / name;
  };
  auto code = [](const fs::path& p) {
    try {
      encoders::load_encoders(p);
    } catch (const FormatError& e) {
      return static_cast<int>(e.code());
    }
    return -1;
  };
  CHECK(code(write("magic.ckpt", "XSCK" + bytes.substr(4))) == static_cast<int>(FormatErrc::bad_magic));
  CHECK(code(write("trunc.ckpt", bytes.substr(0, bytes.size() - 5))) == static_cast<int>(FormatErrc::truncated));
  CHECK(code(write("trail.ckpt", bytes + "x")) == static_cast<int>(FormatErrc::trailing_bytes));
  CHECK_THROWS_AS(encoders::load_encoders(dir / "missing.ckpt"), DataError);
}

TEST_CASE("encoder construction is deterministic in the seed") {
  const Encoders a(small_config(11)), b(small_config(11)), c(small_config(12));
  CHECK(ad::hash_params(a.params()) == ad::hash_params(b.params()));
  CHECK(ad::hash_params(a.params()) != ad::hash_params(c.params()));
}
