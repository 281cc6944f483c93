// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/stage1.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace mstar::stage1 {

using encoders::Encoders;
using encoders::Head;

namespace {

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite input");
}

std::vector<int> iota_targets(Eigen::Index n) {
  std::vector<int> t(static_cast<std::size_t>(n));
  std::iota(t.begin(), t.end(), 0);
  return t;
}

Var symmetric_ce(Var logits) {
  const auto targets = iota_targets(logits.rows());
  Var a = ad::cross_entropy(logits, targets);
  Var b = ad::cross_entropy(ad::transpose(logits), targets);
  return ad::scale(ad::add(a, b), 0.5);
}

void check_pair(Var A, Var B) {
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw DataError("info_nce_pair: shape mismatch");
  if (A.rows() < 2) throw DataError("info_nce_pair: need at least 2 pairs");
  require_finite(A.value(), "info_nce_pair");
  require_finite(B.value(), "info_nce_pair");
}

}  // namespace

Var info_nce_pair(Var A, Var B, Var log_scale) {
  check_pair(A, B);
  Var sim = ad::matmul_nt(ad::row_l2_normalize(A), ad::row_l2_normalize(B));
  return symmetric_ce(ad::scale_by(sim, ad::exp(log_scale)));
}

Var info_nce_pair(Var A, Var B, double tau) {
  if (!(tau > 0)) throw DataError("info_nce_pair: tau must be positive");
  check_pair(A, B);
  Var sim = ad::matmul_nt(ad::row_l2_normalize(A), ad::row_l2_normalize(B));
  return symmetric_ce(ad::scale(sim, 1.0 / tau));
}

std::vector<MinedTriplet> mine_hard(const Mat& a, const std::vector<int>& labels) {
  const auto n = static_cast<int>(a.rows());
  if (static_cast<int>(labels.size()) != n) throw DataError("mine_hard: label count mismatch");
  std::vector<MinedTriplet> out;
  for (int i = 0; i < n; ++i) {
    int pos = -1, neg = -1;
    double dpos = -1, dneg = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (a.row(i) - a.row(j)).norm();
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        if (d > dpos) dpos = d, pos = j;
      } else if (d < dneg) {
        dneg = d, neg = j;
      }
    }
    if (pos >= 0 && neg >= 0) out.push_back({i, pos, neg});
  }
  return out;
}

Var triplet_hard(const AnchorSet& s) {
  require_finite(s.a.value(), "triplet_hard");
  const auto mined = mine_hard(s.a.value(), s.cancer);
  if (mined.empty()) throw DataError("triplet_hard: no anchor has both a positive and a negative in the batch");
  std::vector<int> ia, ip, in;
  for (const auto& m : mined) {
    ia.push_back(m.anchor);
    ip.push_back(m.positive);
    in.push_back(m.negative);
  }
  Var anchors = ad::gather_rows(s.a, ia);
  Var dpos = ad::row_norms(ad::sub(anchors, ad::gather_rows(s.a, ip)));
  Var dneg = ad::row_norms(ad::sub(anchors, ad::gather_rows(s.a, in)));
  return ad::mean(ad::relu(ad::add_scalar(ad::sub(dpos, dneg), s.margin)));
}

Stage1Loss stage1_loss(Tape& t, const EmbeddingBatch& b, Var log_scale, double margin) {
  const std::size_t n = b.size();
  auto flags_ok = [&](const std::vector<std::uint8_t>& f) { return f.size() == n; };
  if (!flags_ok(b.has_slide) || !flags_ok(b.has_report) || !flags_ok(b.has_gene)) {
    throw DataError("stage1_loss: availability flags do not match batch size");
  }
  Stage1Loss out;
  Var total = t.constant(Mat::Zero(1, 1));

  auto pair_term = [&](Var X, const std::vector<std::uint8_t>& fx, Var Y, const std::vector<std::uint8_t>& fy,
                       double& slot) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (fx[i] && fy[i]) rows.push_back(static_cast<int>(i));
    }
    if (rows.size() < 2) return;
    Var l = info_nce_pair(ad::gather_rows(X, rows), ad::gather_rows(Y, rows), log_scale);
    slot = l.scalar();
    total = ad::add(total, l);
  };
  pair_term(b.P, b.has_slide, b.T, b.has_report, out.pt);
  pair_term(b.P, b.has_slide, b.Gm, b.has_gene, out.pg);
  pair_term(b.T, b.has_report, b.Gm, b.has_gene, out.tg);

  std::vector<int> full;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    if (b.has_slide[i] && b.has_report[i] && b.has_gene[i]) {
      full.push_back(static_cast<int>(i));
      labels.push_back(b.cancer[i]);
    }
  }
  if (!full.empty()) {
    Var a = ad::concat_cols({ad::row_l2_normalize(ad::gather_rows(b.P, full)),
                             ad::row_l2_normalize(ad::gather_rows(b.T, full)),
                             ad::row_l2_normalize(ad::gather_rows(b.Gm, full))});
    if (!mine_hard(a.value(), labels).empty()) {
      Var l = triplet_hard({a, labels, margin});
      out.tri = l.scalar();
      out.triplet_used = true;
      total = ad::add(total, l);
    }
  }
  out.total = total;
  return out;
}

// ---- config -------------------------------------------------------------------

void to_json(nlohmann::json& j, const Stage1Config& c) {
  j = nlohmann::json{{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"weight_decay", c.weight_decay}, {"m_fix", c.m_fix}, {"margin", c.margin},
                     {"token_drop", c.token_drop}, {"warmup_epochs", c.warmup_epochs}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, Stage1Config& c) {
  Stage1Config d;
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.m_fix = j.value("m_fix", d.m_fix);
  d.margin = j.value("margin", d.margin);
  d.token_drop = j.value("token_drop", d.token_drop);
  d.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  d.seed = j.value("seed", d.seed);
  if (d.epochs < 0 || d.batch_size < 1 || d.m_fix < 1 || !(d.lr > 0) || d.margin < 0 ||
      !(d.token_drop >= 0 && d.token_drop < 1) || d.warmup_epochs < 0 || d.warmup_epochs > d.epochs) {
    throw DataError("invalid stage-1 config");
  }
  c = d;
}

// ---- training -----------------------------------------------------------------

Mat base_features(const Encoders& enc, const corpus::Case& c) {
  if (c.patch_feat.size() > 0 && c.patch_feat.cols() == enc.config().d_feat &&
      c.patch_feat.rows() == c.patch_raw.rows()) {
    return corpus::to_double(c.patch_feat);
  }
  return encoders::base_extract(enc, corpus::to_double(c.patch_raw));
}

namespace {

const std::vector<std::string> kTrainable = {"agg.", "text.", "gene.", "proj.slide.", "proj.text.", "proj.gene.",
                                             "logit_scale"};

struct CaseCache {
  Mat feats;
  encoders::GeneTokens genes;
};

EmbeddingBatch embed_batch(Tape& t, Encoders& enc, const corpus::Cohort& cohort, const std::vector<CaseCache>& cache,
                           const std::vector<std::size_t>& idx, int m_fix, std::uint64_t bag_seed,
                           std::mt19937_64* text_rng, double token_drop) {
  const auto& c = enc.config();
  EmbeddingBatch b;
  std::vector<Var> P, T, G;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& cs = cohort.cases[idx[k]];
    const auto& cc = cache[idx[k]];
    const Mat bag = corpus::fix_bag(cc.feats, m_fix, nn::mix_seed(bag_seed, idx[k]));
    P.push_back(encoders::project(t, enc, encoders::slide_aggregate(t, enc, t.constant(bag)).cls, Head::slide));
    if (cs.has_report) {
      auto in = encoders::prepare_text(cs.report_tokens, c.max_len, c.vocab_size, text_rng);
      if (text_rng != nullptr && token_drop > 0) {
        std::bernoulli_distribution drop(token_drop);
        for (auto& k : in.keep) {
          if (drop(*text_rng)) k = 0;
        }
      }
      T.push_back(encoders::project(t, enc, encoders::text_encode(t, enc, in), Head::text));
    } else {
      T.push_back(t.constant(Mat::Zero(1, c.d_shared)));
    }
    if (cs.has_gene) {
      G.push_back(encoders::project(t, enc, encoders::gene_encode(t, enc, cc.genes), Head::gene));
    } else {
      G.push_back(t.constant(Mat::Zero(1, c.d_shared)));
    }
    b.cancer.push_back(cs.cancer_type);
    b.has_slide.push_back(1);
    b.has_report.push_back(cs.has_report ? 1 : 0);
    b.has_gene.push_back(cs.has_gene ? 1 : 0);
  }
  b.P = ad::concat_rows(P);
  b.T = ad::concat_rows(T);
  b.Gm = ad::concat_rows(G);
  return b;
}

std::vector<CaseCache> build_cache(const Encoders& enc, const corpus::Cohort& cohort,
                                   const std::vector<std::size_t>& cases) {
  std::vector<CaseCache> cache(cohort.cases.size());
  for (std::size_t i : cases) {
    const auto& cs = cohort.cases[i];
    cache[i].feats = base_features(enc, cs);
    if (cs.has_gene) {
      cache[i].genes = encoders::gene_tokenize(
          std::span<const float>(cs.gene_expr.data(), static_cast<std::size_t>(cs.gene_expr.size())), enc.binning());
    }
  }
  return cache;
}

}  // namespace

std::vector<EpochLog> train_stage1(Encoders& enc, const corpus::Cohort& cohort,
                                   const std::vector<std::size_t>& train_cases, const Stage1Config& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_cases.empty()) throw DataError("train_stage1: empty training split");
  enc.set_binning(encoders::fit_gene_binning(cohort, train_cases, enc.config().n_bins));
  const auto cache = build_cache(enc, cohort, train_cases);
  const encoders::FrozenGuard guard(enc.params(), {"base.", "gene.id_emb"});

  nn::Adam opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0x51));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((train_cases.size() + bs - 1) / bs);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  const double max_log_scale = std::log(enc.config().max_logit_scale);

  std::vector<EpochLog> log;
  std::vector<std::size_t> order = train_cases;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog row;
    row.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      enc.params().zero_grad();
      Tape t;
      const auto batch = embed_batch(t, enc, cohort, cache, idx, cfg.m_fix,
                                     nn::mix_seed(cfg.seed, static_cast<std::uint64_t>(step) + 1000), &rng,
                                     cfg.token_drop);
      const auto loss = stage1_loss(t, batch, t.param(enc.params().at("logit_scale")), cfg.margin);
      const double total = loss.total.scalar();
      if (!std::isfinite(total)) {
        throw NumericalError("stage-1 loss is non-finite at epoch " + std::to_string(epoch));
      }
      t.backward(loss.total);
      opt.step(enc.params(), nn::cosine_lr(cfg.lr, step, total_steps, warmup_steps), kTrainable);
      auto& ls = enc.params().at("logit_scale").value(0, 0);
      ls = std::min(ls, max_log_scale);
      ++step;
      row.pt += loss.pt;
      row.pg += loss.pg;
      row.tg += loss.tg;
      row.tri += loss.tri;
      row.total += total;
      ++batches;
    }
    guard.verify(enc.params());
    for (double* v : {&row.pt, &row.pg, &row.tg, &row.tri, &row.total}) *v /= std::max(1, batches);
    log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return log;
}

// ---- evaluation ---------------------------------------------------------------

SharedEmbeddings embed_cases(const Encoders& enc, const corpus::Cohort& cohort, const std::vector<std::size_t>& cases,
                             int m_fix, std::uint64_t seed) {
  const auto& c = enc.config();
  const auto n = static_cast<Eigen::Index>(cases.size());
  SharedEmbeddings e;
  e.P = Mat::Zero(n, c.d_shared);
  e.T = Mat::Zero(n, c.d_shared);
  e.G = Mat::Zero(n, c.d_shared);
  auto unit = [](Mat v) {
    const double nrm = v.norm();
    return nrm > 0 ? Mat(v / nrm) : v;
  };
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& cs = cohort.cases[cases[static_cast<std::size_t>(k)]];
    const Mat bag = corpus::fix_bag(base_features(enc, cs), m_fix, nn::mix_seed(seed, cases[static_cast<std::size_t>(k)]));
    const Mat cls = encoders::slide_aggregate_eval(enc, bag).cls;
    e.P.row(k) = unit(encoders::project_eval(enc, cls, Head::slide));
    if (cs.has_report) {
      const Mat tv = encoders::text_encode_eval(enc, cs.report_tokens);
      e.T.row(k) = unit(encoders::project_eval(enc, tv, Head::text));
    }
    if (cs.has_gene) {
      const auto toks = encoders::gene_tokenize(
          std::span<const float>(cs.gene_expr.data(), static_cast<std::size_t>(cs.gene_expr.size())), enc.binning());
      const Mat gv = encoders::gene_encode_eval(enc, toks);
      e.G.row(k) = unit(encoders::project_eval(enc, gv, Head::gene));
    }
    e.cancer.push_back(cs.cancer_type);
    e.has_report.push_back(cs.has_report ? 1 : 0);
    e.has_gene.push_back(cs.has_gene ? 1 : 0);
  }
  return e;
}

double recall_at_1(const Mat& A, const Mat& B) {
  if (A.rows() != B.rows() || A.rows() == 0) throw DataError("recall_at_1: galleries must be equal and nonempty");
  const Mat sim = A * B.transpose();
  int hits = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = 0;
    sim.row(i).maxCoeff(&best);
    hits += best == i ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

AnchorDistances anchor_distances(const SharedEmbeddings& e) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < e.cancer.size(); ++i) {
    if (e.has_report[i] && e.has_gene[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  Mat a(static_cast<Eigen::Index>(rows.size()), e.P.cols() * 3);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    a.row(static_cast<Eigen::Index>(k)) << e.P.row(rows[k]), e.T.row(rows[k]), e.G.row(rows[k]);
  }
  double intra = 0, inter = 0;
  long n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      const double d = (a.row(static_cast<Eigen::Index>(i)) - a.row(static_cast<Eigen::Index>(j))).norm();
      if (e.cancer[static_cast<std::size_t>(rows[i])] == e.cancer[static_cast<std::size_t>(rows[j])]) {
        intra += d, ++n_intra;
      } else {
        inter += d, ++n_inter;
      }
    }
  }
  if (n_intra == 0 || n_inter == 0) throw DataError("anchor_distances: need both same- and cross-cancer pairs");
  return {intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter)};
}

}  // namespace mstar::stage1
