// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/downstream.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"
#include "mstar/stage1.hpp"
#include "mstar/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mstar::downstream {

HeadKind head_from_string(const std::string& s) {
  if (s == "abmil") return HeadKind::abmil;
  if (s == "transmil") return HeadKind::transmil;
  throw DataError("unknown MIL head '" + s + "' (expected abmil or transmil)");
}

Task task_from_string(const std::string& s) {
  if (s == "classify") return Task::classify;
  if (s == "survival") return Task::survival;
  throw DataError("unknown task '" + s + "' (expected classify or survival)");
}

const char* to_string(HeadKind h) { return h == HeadKind::abmil ? "abmil" : "transmil"; }
const char* to_string(Task t) { return t == Task::classify ? "classify" : "survival"; }

MILConfig MILConfig::published_preset() {
  MILConfig c;
  c.hidden_dim = 512;
  c.attn_dim = 256;
  c.transmil_heads = 8;
  return c;
}

void MILConfig::validate() const {
  if (input_dim < 1 || hidden_dim < 1 || attn_dim < 1 || epochs < 0 || n_boot < 0) {
    throw DataError("invalid MIL config: sizes must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw DataError("invalid MIL config: dropout must lie in [0, 1)");
  if (!(lr > 0)) throw DataError("invalid MIL config: lr must be positive");
  if (optimizer != "adam") throw DataError("invalid MIL config: only the adam optimizer is available");
  if (scheduler != "cosine" && scheduler != "constant") {
    throw DataError("invalid MIL config: scheduler must be cosine or constant");
  }
  if (task == Task::classify && n_classes < 2) throw DataError("invalid MIL config: n_classes must be >= 2");
  if (task == Task::survival && n_bins < 1) throw DataError("invalid MIL config: n_bins must be >= 1");
  if (head == HeadKind::transmil && hidden_dim % transmil_heads != 0) {
    throw DataError("invalid MIL config: hidden_dim must be divisible by transmil_heads");
  }
}

void to_json(nlohmann::json& j, const MILConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim}, {"hidden_dim", c.hidden_dim},   {"attn_dim", c.attn_dim},
                     {"dropout", c.dropout},     {"epochs", c.epochs},           {"lr", c.lr},
                     {"weight_decay", c.weight_decay}, {"optimizer", c.optimizer}, {"scheduler", c.scheduler},
                     {"task", to_string(c.task)},       {"head", to_string(c.head)}, {"n_classes", c.n_classes},
                     {"n_bins", c.n_bins},       {"transmil_heads", c.transmil_heads},
                     {"transmil_layers", c.transmil_layers}, {"n_boot", c.n_boot}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MILConfig& c) {
  MILConfig d = j.value("preset", std::string()) == "published" ? MILConfig::published_preset() : MILConfig{};
  d.input_dim = j.value("input_dim", d.input_dim);
  d.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  d.attn_dim = j.value("attn_dim", d.attn_dim);
  d.dropout = j.value("dropout", d.dropout);
  d.epochs = j.value("epochs", d.epochs);
  d.lr = j.value("lr", d.lr);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.optimizer = j.value("optimizer", d.optimizer);
  d.scheduler = j.value("scheduler", d.scheduler);
  if (j.contains("task")) d.task = task_from_string(j.at("task").get<std::string>());
  if (j.contains("head")) d.head = head_from_string(j.at("head").get<std::string>());
  d.n_classes = j.value("n_classes", d.n_classes);
  d.n_bins = j.value("n_bins", d.n_bins);
  d.transmil_heads = j.value("transmil_heads", d.transmil_heads);
  d.transmil_layers = j.value("transmil_layers", d.transmil_layers);
  d.n_boot = j.value("n_boot", d.n_boot);
  d.seed = j.value("seed", d.seed);
  d.validate();
  c = d;
}

// ---- heads ----------------------------------------------------------------------

void add_abmil(ParamStore& ps, const MILConfig& cfg, std::mt19937_64& rng) {
  nn::add_linear(ps, "mil.fc", cfg.input_dim, cfg.hidden_dim, rng);
  nn::add_linear(ps, "mil.attn_v", cfg.hidden_dim, cfg.attn_dim, rng);
  nn::add_linear(ps, "mil.attn_u", cfg.hidden_dim, cfg.attn_dim, rng);
  nn::add_linear(ps, "mil.attn_w", cfg.attn_dim, 1, rng);
  nn::add_linear(ps, "mil.out", cfg.hidden_dim, cfg.n_outputs(), rng);
}

void add_transmil(ParamStore& ps, const MILConfig& cfg, std::mt19937_64& rng) {
  nn::add_linear(ps, "mil.fc", cfg.input_dim, cfg.hidden_dim, rng);
  ps.add("mil.cls", nn::normal_matrix(1, cfg.hidden_dim, 0.02, rng));
  for (int l = 0; l < cfg.transmil_layers; ++l) {
    nn::add_transformer_block(ps, "mil.blocks." + std::to_string(l), cfg.hidden_dim, cfg.hidden_dim, rng);
  }
  nn::add_layer_norm(ps, "mil.ln_f", cfg.hidden_dim);
  nn::add_linear(ps, "mil.out", cfg.hidden_dim, cfg.n_outputs(), rng);
}

AbmilOut abmil_forward(Tape& t, ParamStore& ps, Var features, double dropout, std::mt19937_64* rng) {
  if (features.rows() < 1) throw DataError("abmil_forward: empty bag");
  Var h = nn::dropout(ad::relu(nn::linear(t, features, ps, "mil.fc")), dropout, rng);
  Var gate = ad::mul(ad::tanh(nn::linear(t, h, ps, "mil.attn_v")), ad::sigmoid(nn::linear(t, h, ps, "mil.attn_u")));
  Var a = ad::softmax_rows(ad::transpose(nn::linear(t, gate, ps, "mil.attn_w")));
  return {ad::matmul(a, h), a};
}

MILModel::MILModel(const MILConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(nn::mix_seed(seed, 0x3a11));
  if (cfg_.head == HeadKind::abmil) {
    add_abmil(params_, cfg_, rng);
  } else {
    add_transmil(params_, cfg_, rng);
  }
}

Var MILModel::forward(Tape& t, Var features, std::mt19937_64* rng) {
  if (features.cols() != cfg_.input_dim) {
    throw DataError("MIL input width " + std::to_string(features.cols()) + " != input_dim " +
                    std::to_string(cfg_.input_dim));
  }
  Var embed;
  if (cfg_.head == HeadKind::abmil) {
    embed = abmil_forward(t, params_, features, cfg_.dropout, rng).embed;
  } else {
    Var h = nn::dropout(ad::relu(nn::linear(t, features, params_, "mil.fc")), cfg_.dropout, rng);
    h = ad::concat_rows({t.param(params_.at("mil.cls")), h});
    for (int l = 0; l < cfg_.transmil_layers; ++l) {
      h = nn::transformer_block(t, h, params_, "mil.blocks." + std::to_string(l), cfg_.transmil_heads);
    }
    embed = ad::slice_rows(nn::layer_norm(t, h, params_, "mil.ln_f"), 0, 1);
  }
  return nn::linear(t, embed, params_, "mil.out");
}

Eigen::RowVectorXd MILModel::predict(const Mat& features) const {
  Tape t(false);
  return const_cast<MILModel*>(this)->forward(t, t.constant(features)).value().row(0);
}

// ---- survival ---------------------------------------------------------------------

int SurvivalSpec::bin_of(double time) const {
  if (edges.size() < 2) throw DataError("SurvivalSpec: no bins");
  const auto it = std::upper_bound(edges.begin(), edges.end(), time);
  const auto b = static_cast<int>(it - edges.begin());
  return std::clamp(b, 1, n_bins());
}

SurvivalSpec surv_bins(std::span<const double> times, std::span<const std::uint8_t> events, int n_bins) {
  if (times.size() != events.size()) throw DataError("surv_bins: times and events differ in length");
  if (n_bins < 1) throw DataError("surv_bins: need at least one bin");
  std::vector<double> ev;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (events[i]) ev.push_back(times[i]);
  }
  if (static_cast<int>(ev.size()) < n_bins) {
    throw DataError("surv_bins: " + std::to_string(ev.size()) + " uncensored events, need at least " +
                    std::to_string(n_bins));
  }
  SurvivalSpec s;
  s.edges.push_back(-std::numeric_limits<double>::infinity());
  for (int k = 1; k < n_bins; ++k) s.edges.push_back(stats::percentile(ev, static_cast<double>(k) / n_bins));
  s.edges.push_back(std::numeric_limits<double>::infinity());
  if (n_bins > 1 && !(s.edges[1] > *std::min_element(ev.begin(), ev.end()))) {
    throw DataError("surv_bins: degenerate quantiles (event times too concentrated)");
  }
  for (std::size_t k = 1; k < s.edges.size(); ++k) {
    if (!(s.edges[k] > s.edges[k - 1])) throw DataError("surv_bins: degenerate quantiles (edges not increasing)");
  }
  return s;
}

namespace {

constexpr double kFloor = 1e-7;

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log S(k) = sum_{j<=k} log(1 - h_j) = -sum_{j<=k} softplus(l_j); log h = -softplus(-l).
struct SurvTerms {
  double value = 0;
  Eigen::RowVectorXd grad;
};

SurvTerms surv_terms(const Eigen::RowVectorXd& l, int b, int c) {
  const auto B = static_cast<int>(l.size());
  if (b < 1 || b > B) throw DataError("nll_surv_loss: bin index outside 1..B");
  if (c != 0 && c != 1) throw DataError("nll_surv_loss: censor flag must be 0 or 1");
  const double log_floor = std::log(kFloor);
  SurvTerms out;
  out.grad = Eigen::RowVectorXd::Zero(B);
  auto add_log_s = [&](int k, double weight) {
    double ls = 0;
    for (int j = 0; j < k; ++j) ls -= softplus(l(j));
    if (ls > log_floor) {
      for (int j = 0; j < k; ++j) out.grad(j) -= weight * -sigmoid(l(j));
    } else {
      ls = log_floor;
    }
    out.value -= weight * ls;
  };
  if (c == 1) {
    add_log_s(b, 1.0);
  } else {
    add_log_s(b - 1, 1.0);
    double lh = -softplus(-l(b - 1));
    if (lh > log_floor) {
      out.grad(b - 1) -= 1.0 - sigmoid(l(b - 1));
    } else {
      lh = log_floor;
    }
    out.value -= lh;
  }
  return out;
}

}  // namespace

Var nll_surv_loss(Var logits, int b, int censor) {
  if (logits.rows() != 1) throw DataError("nll_surv_loss: logits must be a single row");
  const Eigen::RowVectorXd l = logits.value().row(0);
  auto terms = surv_terms(l, b, censor);
  Tape& t = *logits.tape();
  const int il = logits.id();
  Mat g = terms.grad;
  return t.push(Mat::Constant(1, 1, terms.value), {logits},
                [il, g](Tape& t, const Mat& up) { t.accum(il, g * up(0, 0)); });
}

double nll_surv_value(const Eigen::RowVectorXd& logits, int b, int censor) {
  return surv_terms(logits, b, censor).value;
}

double survival_risk(const Eigen::RowVectorXd& logits) {
  double s = 1.0, total = 0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    s *= 1.0 - sigmoid(logits(k));
    total += s;
  }
  return -total;
}

// ---- training -----------------------------------------------------------------------

double evaluate(const MILModel& model, const MILData& data, const std::vector<std::size_t>& idx,
                const SurvivalSpec* spec, std::vector<Prediction>* preds) {
  const auto& cfg = model.config();
  Mat scores(static_cast<Eigen::Index>(idx.size()), cfg.n_outputs());
  std::vector<int> labels;
  std::vector<double> risks, times;
  std::vector<std::uint8_t> events;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const std::size_t i = idx[k];
    const Eigen::RowVectorXd logit = model.predict(data.bags[i]);
    Prediction p;
    p.case_id = data.ids.empty() ? std::to_string(i) : data.ids[i];
    if (cfg.task == Task::classify) {
      const Eigen::RowVectorXd e = (logit.array() - logit.maxCoeff()).exp();
      const Eigen::RowVectorXd prob = e / e.sum();
      scores.row(static_cast<Eigen::Index>(k)) = prob;
      p.scores.assign(prob.data(), prob.data() + prob.size());
      p.label = data.labels[i];
      labels.push_back(data.labels[i]);
    } else {
      for (Eigen::Index j = 0; j < logit.size(); ++j) p.scores.push_back(sigmoid(logit(j)));
      p.risk = survival_risk(logit);
      p.time = data.times[i];
      p.censor = data.censor[i];
      p.label = spec ? spec->bin_of(p.time) : 0;
      risks.push_back(p.risk);
      times.push_back(p.time);
      events.push_back(data.censor[i] ? 0 : 1);
    }
    if (preds) preds->push_back(std::move(p));
  }
  if (cfg.task == Task::classify) return stats::macro_auc(scores, labels);
  return stats::c_index(risks, times, events);
}

namespace {

void check_split(const MILData& data, const std::vector<std::size_t>& idx, const char* name) {
  if (idx.empty()) throw DataError(std::string("train_mil: empty ") + name + " split");
  for (std::size_t i : idx) {
    if (i >= data.bags.size()) throw DataError("train_mil: case index out of range");
  }
}

}  // namespace

MILReport train_mil(const MILData& data, const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                    const std::vector<std::size_t>& test, const MILConfig& cfg_in, MILModel* best_model) {
  check_split(data, train, "train");
  check_split(data, val, "validation");
  check_split(data, test, "test");
  MILConfig cfg = cfg_in;
  cfg.input_dim = static_cast<int>(data.bags[train.front()].cols());

  MILReport report;
  SurvivalSpec spec;
  std::vector<int> targets(data.bags.size(), 0);
  if (cfg.task == Task::classify) {
    report.metric = "macro_auc";
    std::set<int> seen;
    for (std::size_t i : train) seen.insert(data.labels[i]);
    if (seen.size() < 2) throw DataError("train_mil: training fold holds a single class");
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
      if (data.labels[i] < 0 || data.labels[i] >= cfg.n_classes) throw DataError("train_mil: label out of range");
      targets[i] = data.labels[i];
    }
  } else {
    report.metric = "c_index";
    std::vector<double> tt;
    std::vector<std::uint8_t> ee;
    for (std::size_t i : train) {
      tt.push_back(data.times[i]);
      ee.push_back(data.censor[i] ? 0 : 1);
    }
    spec = surv_bins(tt, ee, cfg.n_bins);
    report.bin_edges = spec.edges;
    for (std::size_t i = 0; i < data.bags.size(); ++i) targets[i] = spec.bin_of(data.times[i]);
  }

  MILModel model(cfg, cfg.seed);
  MILModel best = model;
  nn::Adam opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0x3a12));
  const long total_steps = static_cast<long>(train.size()) * cfg.epochs;
  long step = 0;
  std::vector<std::size_t> order = train;
  report.best_val = -1;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      model.params().zero_grad();
      Tape t;
      Var logits = model.forward(t, t.constant(data.bags[i]), &rng);
      Var loss = cfg.task == Task::classify ? ad::cross_entropy(logits, {targets[i]})
                                            : nll_surv_loss(logits, targets[i], data.censor[i]);
      if (!std::isfinite(loss.scalar())) throw NumericalError("MIL loss is non-finite at epoch " + std::to_string(epoch));
      t.backward(loss);
      const double lr = cfg.scheduler == "cosine" ? nn::cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
      opt.step(model.params(), lr);
      ++step;
    }
    const double v = evaluate(model, data, val, cfg.task == Task::survival ? &spec : nullptr);
    report.val_curve.push_back(v);
    if (v > report.best_val) {
      report.best_val = v;
      report.best_epoch = epoch;
      best = model;
    }
  }
  if (cfg.epochs == 0) report.best_val = evaluate(best, data, val, cfg.task == Task::survival ? &spec : nullptr);

  const SurvivalSpec* sp = cfg.task == Task::survival ? &spec : nullptr;
  report.test.point = evaluate(best, data, test, sp, &report.predictions);
  if (cfg.n_boot > 0) {
    const auto& preds = report.predictions;
    const int n_out = cfg.n_outputs();
    stats::IndexMetric metric = [&](std::span<const std::size_t> rs) -> std::optional<double> {
      if (cfg.task == Task::classify) {
        Mat s(static_cast<Eigen::Index>(rs.size()), n_out);
        std::vector<int> l;
        std::set<int> cls;
        for (std::size_t k = 0; k < rs.size(); ++k) {
          const auto& p = preds[rs[k]];
          for (int c = 0; c < n_out; ++c) s(static_cast<Eigen::Index>(k), c) = p.scores[static_cast<std::size_t>(c)];
          l.push_back(p.label);
          cls.insert(p.label);
        }
        if (cls.size() < 2) return std::nullopt;
        return stats::macro_auc(s, l);
      }
      std::vector<double> r, tm;
      std::vector<std::uint8_t> ev;
      for (std::size_t k : rs) {
        r.push_back(preds[k].risk);
        tm.push_back(preds[k].time);
        ev.push_back(preds[k].censor ? 0 : 1);
      }
      try {
        return stats::c_index(r, tm, ev);
      } catch (const DataError&) {
        return std::nullopt;
      }
    };
    const auto ci = stats::bootstrap_ci(metric, preds.size(), cfg.n_boot, nn::mix_seed(cfg.seed, 0xb007));
    report.test.lo = ci.lo;
    report.test.hi = ci.hi;
  } else {
    report.test.lo = report.test.hi = report.test.point;
  }
  if (best_model) *best_model = best;
  return report;
}

// ---- feature sources -----------------------------------------------------------------

FeatureSource feature_source_from_string(const std::string& s) {
  if (s == "base") return FeatureSource::base;
  if (s == "student") return FeatureSource::student;
  if (s == "teacher") return FeatureSource::teacher;
  throw DataError("unknown feature source '" + s + "' (expected base, student or teacher)");
}

const char* to_string(FeatureSource f) {
  switch (f) {
    case FeatureSource::base: return "base";
    case FeatureSource::student: return "student";
    case FeatureSource::teacher: return "teacher";
  }
  return "?";
}

Mat case_features(const encoders::Encoders& enc, const corpus::Case& c, FeatureSource src, int m_fix,
                  std::uint64_t seed) {
  switch (src) {
    case FeatureSource::base: return stage1::base_features(enc, c);
    case FeatureSource::student: return encoders::extract_eval(enc, corpus::to_double(c.patch_raw), "student");
    case FeatureSource::teacher:
      return stage2::teacher_reembed(enc, corpus::fix_bag(stage1::base_features(enc, c), m_fix, seed));
  }
  throw DataError("unknown feature source");
}

MILData build_mil_data(const encoders::Encoders& enc, const corpus::Cohort& cohort, FeatureSource src, int m_fix,
                       std::uint64_t seed) {
  MILData d;
  for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
    const auto& c = cohort.cases[i];
    d.ids.push_back(c.case_id);
    d.bags.push_back(case_features(enc, c, src, m_fix, nn::mix_seed(seed, i)));
    d.labels.push_back(c.class_label);
    d.times.push_back(c.os_months);
    d.censor.push_back(static_cast<std::uint8_t>(c.censor));
  }
  return d;
}

}  // namespace mstar::downstream
