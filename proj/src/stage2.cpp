// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/stage2.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"
#include "mstar/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mstar::stage2 {

using encoders::Encoders;
using encoders::Head;

Mat teacher_reembed(const Encoders& teacher, const Mat& base_bag) {
  return encoders::slide_aggregate_eval(teacher, base_bag).tokens;
}

Reduction reduction_from_string(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw DataError("unknown loss reduction '" + s + "' (expected mean or sum)");
}

DistillTerms distill_loss(Var fp, Var teacher, Var student, Var ema, double lambda, Reduction reduction) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DataError("distill_loss: lambda must lie in [0, 1]");
  if (fp.rows() != teacher.rows() || fp.cols() != teacher.cols() || student.rows() != ema.rows() ||
      student.cols() != ema.cols() || fp.rows() != student.rows()) {
    throw DataError("distill_loss: inconsistent shapes");
  }
  if (fp.rows() < 1) throw DataError("distill_loss: no patches");
  const double denom = reduction == Reduction::mean ? static_cast<double>(fp.rows()) : 1.0;
  Var t_term = ad::sum(ad::abs(ad::sub(fp, teacher)));
  Var e_term = ad::sum(ad::abs(ad::sub(student, ema)));
  DistillTerms out;
  out.teacher_l1 = t_term.scalar() / static_cast<double>(fp.rows());
  out.ema_l1 = e_term.scalar() / static_cast<double>(fp.rows());
  out.loss = ad::scale(ad::add(ad::scale(t_term, lambda), ad::scale(e_term, 1.0 - lambda)), 1.0 / denom);
  return out;
}

void to_json(nlohmann::json& j, const Stage2Config& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"lambda", c.lambda},
                     {"ema_decay", c.ema_decay},
                     {"m_fix", c.m_fix},
                     {"loss_reduction", c.reduction == Reduction::mean ? "mean" : "sum"},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, Stage2Config& c) {
  Stage2Config d;
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.lambda = j.value("lambda", d.lambda);
  d.ema_decay = j.value("ema_decay", d.ema_decay);
  d.m_fix = j.value("m_fix", d.m_fix);
  if (j.contains("loss_reduction")) d.reduction = reduction_from_string(j.at("loss_reduction").get<std::string>());
  d.seed = j.value("seed", d.seed);
  if (d.epochs < 0 || d.batch_size < 1 || d.m_fix < 1 || !(d.lr > 0)) throw DataError("invalid stage-2 config");
  if (!(d.lambda >= 0 && d.lambda <= 1)) throw DataError("stage-2 lambda must lie in [0, 1]");
  if (!(d.ema_decay >= 0 && d.ema_decay <= 1)) throw DataError("stage-2 ema_decay must lie in [0, 1]");
  c = d;
}

TeacherTargets teacher_targets(const Encoders& enc, const corpus::Case& c, int m_fix, std::uint64_t seed,
                               const std::filesystem::path& cache_dir) {
  TeacherTargets out;
  out.plan = corpus::fix_bag_plan(c.n_patches(), m_fix, seed);
  std::filesystem::path file;
  if (!cache_dir.empty()) {
    file = cache_dir / (c.case_id + ".mstr");
    if (std::filesystem::exists(file)) {
      out.tokens = corpus::to_double(corpus::read_mstr(file));
      if (out.tokens.rows() != m_fix || out.tokens.cols() != enc.config().d_model) {
        throw DataError("teacher cache entry has the wrong shape: " + file.string());
      }
      return out;
    }
  }
  const Mat bag = corpus::apply_bag_plan(stage1::base_features(enc, c), out.plan);
  const corpus::FMat rounded = corpus::to_float(teacher_reembed(enc, bag));
  if (!file.empty()) {
    std::filesystem::create_directories(cache_dir);
    corpus::write_mstr(file, rounded);
  }
  out.tokens = corpus::to_double(rounded);
  return out;
}

namespace {

struct Prepared {
  Mat raw;       // real rows of the fixed bag, in bag order
  Mat teacher;   // matching teacher rows
};

Prepared prepare(const Encoders& enc, const corpus::Case& c, int m_fix, std::uint64_t seed,
                 const std::filesystem::path& cache_dir) {
  const auto tt = teacher_targets(enc, c, m_fix, seed, cache_dir);
  std::vector<Eigen::Index> real;
  for (std::size_t r = 0; r < tt.plan.size(); ++r) {
    if (tt.plan[r] >= 0) real.push_back(static_cast<Eigen::Index>(r));
  }
  Prepared p;
  p.raw.resize(static_cast<Eigen::Index>(real.size()), c.patch_raw.cols());
  p.teacher.resize(static_cast<Eigen::Index>(real.size()), tt.tokens.cols());
  for (std::size_t k = 0; k < real.size(); ++k) {
    const auto r = real[k];
    p.raw.row(static_cast<Eigen::Index>(k)) = c.patch_raw.row(tt.plan[static_cast<std::size_t>(r)]).cast<double>();
    p.teacher.row(static_cast<Eigen::Index>(k)) = tt.tokens.row(r);
  }
  return p;
}

std::uint64_t case_seed(std::uint64_t seed, std::size_t index) { return nn::mix_seed(seed, 0x7ea0000 + index); }

}  // namespace

std::vector<EpochLog> train_stage2(Encoders& enc, const corpus::Cohort& cohort,
                                   const std::vector<std::size_t>& train_cases, const Stage2Config& cfg,
                                   const std::filesystem::path& cache_dir,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_cases.empty()) throw DataError("train_stage2: empty training split");
  enc.reset_student_from_base();
  const encoders::FrozenGuard guard(enc.params(), {"base.", "agg.", "text.", "gene.", "proj.slide.", "proj.text.",
                                                   "proj.gene.", "logit_scale"});
  std::vector<Prepared> prepared(cohort.cases.size());
  for (std::size_t i : train_cases) prepared[i] = prepare(enc, cohort.cases[i], cfg.m_fix, case_seed(cfg.seed, i), cache_dir);

  nn::Adam opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0x52));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long total_steps = static_cast<long>((train_cases.size() + bs - 1) / bs) * cfg.epochs;
  const std::vector<std::string> trainable = {"student.", "proj.distill."};

  std::vector<EpochLog> log;
  std::vector<std::size_t> order = train_cases;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog row;
    row.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      enc.params().zero_grad();
      Tape t;
      std::vector<Var> terms;
      double tl1 = 0, el1 = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& p = prepared[order[k]];
        Var student = encoders::extract(t, enc, t.constant(p.raw), "student");
        Var fp = encoders::project(t, enc, student, Head::distill);
        Var ema = t.constant(encoders::extract_eval(enc, p.raw, "ema"));
        auto d = distill_loss(fp, t.constant(p.teacher), student, ema, cfg.lambda, cfg.reduction);
        terms.push_back(d.loss);
        tl1 += d.teacher_l1;
        el1 += d.ema_l1;
      }
      const double nb = static_cast<double>(stop - start);
      Var loss = terms.front();
      for (std::size_t k = 1; k < terms.size(); ++k) loss = ad::add(loss, terms[k]);
      loss = ad::scale(loss, 1.0 / nb);
      const double total = loss.scalar();
      if (!std::isfinite(total)) throw NumericalError("stage-2 loss is non-finite at epoch " + std::to_string(epoch));
      t.backward(loss);
      opt.step(enc.params(), nn::cosine_lr(cfg.lr, step, total_steps), trainable);
      encoders::ema_update(enc.params(), "student.", "ema.", cfg.ema_decay);
      ++step;
      row.teacher_l1 += tl1 / nb;
      row.ema_l1 += el1 / nb;
      row.total += total;
      ++batches;
    }
    guard.verify(enc.params());
    for (double* v : {&row.teacher_l1, &row.ema_l1, &row.total}) *v /= std::max(1, batches);
    log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return log;
}

double heldout_teacher_l1(const Encoders& enc, const corpus::Cohort& cohort, const std::vector<std::size_t>& cases,
                          int m_fix, std::uint64_t seed, const std::filesystem::path& cache_dir) {
  if (cases.empty()) throw DataError("heldout_teacher_l1: no cases");
  double sum = 0;
  long rows = 0;
  for (std::size_t i : cases) {
    const auto p = prepare(enc, cohort.cases[i], m_fix, case_seed(seed, i), cache_dir);
    const Mat fp = encoders::project_eval(enc, encoders::extract_eval(enc, p.raw, "student"), Head::distill);
    sum += (fp - p.teacher).cwiseAbs().sum();
    rows += fp.rows();
  }
  return sum / static_cast<double>(rows);
}

}  // namespace mstar::stage2
