// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/shot.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"
#include "mstar/stage1.hpp"
#include "mstar/stage2.hpp"
#include "mstar/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace mstar::shot {

using corpus::TokenLayout;
using encoders::Head;

void PromptSet::validate() const {
  if (templates.empty()) throw DataError("prompt set needs at least one template");
  if (classnames.empty()) throw DataError("prompt set needs at least one class");
  for (const auto& t : templates) {
    if (std::find(t.begin(), t.end(), TokenLayout::kClassnameSentinel) == t.end()) {
      throw DataError("prompt template without a CLASSNAME slot");
    }
  }
  for (std::size_t c = 0; c < classnames.size(); ++c) {
    if (classnames[c].empty()) throw DataError("class " + std::to_string(c) + " has no classname");
  }
}

PromptSet PromptSet::synthetic(int n_classes, int n_templates, std::uint64_t seed) {
  if (n_classes < 1 || n_classes > TokenLayout::kMaxClasses) throw DataError("synthetic prompts: bad class count");
  std::mt19937_64 rng(nn::mix_seed(seed, 0x9e0));
  std::uniform_int_distribution<int> filler(TokenLayout::kFillerBegin, TokenLayout::kFillerEnd - 1);
  std::uniform_int_distribution<int> len(3, 7);
  PromptSet p;
  for (int t = 0; t < n_templates; ++t) {
    std::vector<int> tmpl(static_cast<std::size_t>(len(rng)));
    for (int& id : tmpl) id = filler(rng);
    tmpl[std::uniform_int_distribution<std::size_t>(0, tmpl.size() - 1)(rng)] = TokenLayout::kClassnameSentinel;
    p.templates.push_back(std::move(tmpl));
  }
  for (int c = 0; c < n_classes; ++c) {
    std::vector<std::vector<int>> names;
    for (int s = 0; s < TokenLayout::kDiagPerClass; ++s) names.push_back({TokenLayout::diag_token(c, s)});
    p.classnames.push_back(std::move(names));
  }
  return p;
}

void to_json(nlohmann::json& j, const PromptSet& p) {
  j = nlohmann::json{{"classname_sentinel", TokenLayout::kClassnameSentinel},
                     {"templates", p.templates},
                     {"classnames", p.classnames}};
}

void from_json(const nlohmann::json& j, PromptSet& p) {
  if (j.value("classname_sentinel", TokenLayout::kClassnameSentinel) != TokenLayout::kClassnameSentinel) {
    throw DataError("prompt set uses a different CLASSNAME sentinel id");
  }
  j.at("templates").get_to(p.templates);
  j.at("classnames").get_to(p.classnames);
  p.validate();
}

std::vector<int> instantiate(const std::vector<int>& tmpl, const std::vector<int>& classname) {
  std::vector<int> out;
  for (int id : tmpl) {
    if (id == TokenLayout::kClassnameSentinel) {
      out.insert(out.end(), classname.begin(), classname.end());
    } else {
      out.push_back(id);
    }
  }
  return out;
}

Mat normalize_rows(Mat m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0) m.row(i) /= n;
  }
  return m;
}

ClassPrototypes build_text_prototypes(const PromptSet& prompts, const encoders::Encoders& enc) {
  prompts.validate();
  const int d = enc.config().d_shared;
  ClassPrototypes out;
  out.protos = Mat::Zero(prompts.n_classes(), d);
  for (int c = 0; c < prompts.n_classes(); ++c) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
    int count = 0;
    for (const auto& tmpl : prompts.templates) {
      for (const auto& name : prompts.classnames[static_cast<std::size_t>(c)]) {
        const Mat emb = encoders::text_encode_eval(enc, instantiate(tmpl, name));
        acc += normalize_rows(encoders::project_eval(enc, emb, Head::text)).row(0);
        ++count;
      }
    }
    out.protos.row(c) = acc / static_cast<double>(count);
  }
  out.protos = normalize_rows(out.protos);
  return out;
}

int default_k(int m) { return std::max(1, static_cast<int>(std::ceil(0.05 * static_cast<double>(m)))); }

namespace {

void check_k(int k, Eigen::Index m, const char* what) {
  if (k < 1 || k > m) {
    throw DataError(std::string(what) + ": K=" + std::to_string(k) + " must lie in [1, " + std::to_string(m) + "]");
  }
}

std::vector<double> topk_mean_scores(const Mat& sim, int k) {
  std::vector<double> scores(static_cast<std::size_t>(sim.cols()));
  std::vector<double> col(static_cast<std::size_t>(sim.rows()));
  for (Eigen::Index c = 0; c < sim.cols(); ++c) {
    for (Eigen::Index m = 0; m < sim.rows(); ++m) col[static_cast<std::size_t>(m)] = sim(m, c);
    std::nth_element(col.begin(), col.begin() + (k - 1), col.end(), std::greater<>());
    std::sort(col.begin(), col.begin() + k, std::greater<>());
    double s = 0;
    for (int i = 0; i < k; ++i) s += col[static_cast<std::size_t>(i)];
    scores[static_cast<std::size_t>(c)] = s / k;
  }
  return scores;
}

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace

ShotResult mi_zero(const Mat& patches, const ClassPrototypes& protos, int k) {
  check_k(k, patches.rows(), "mi_zero");
  if (patches.cols() != protos.protos.cols()) throw DataError("mi_zero: embedding width mismatch");
  ShotResult r;
  r.scores = topk_mean_scores(patches * protos.protos.transpose(), k);
  r.pred = argmax_lowest(r.scores);
  return r;
}

ClassPrototypes build_fewshot_prototypes(const std::vector<SupportSlide>& support, const ClassPrototypes& text,
                                         int k_proto) {
  const auto n_classes = text.protos.rows();
  std::vector<std::vector<const Mat*>> by_class(static_cast<std::size_t>(n_classes));
  for (const auto& s : support) {
    if (s.label < 0 || s.label >= n_classes) throw DataError("few-shot support label out of range");
    by_class[static_cast<std::size_t>(s.label)].push_back(s.patches);
  }
  ClassPrototypes out;
  out.provenance = Provenance::fewshot;
  out.protos = Mat::Zero(n_classes, text.protos.cols());
  for (Eigen::Index c = 0; c < n_classes; ++c) {
    const auto& slides = by_class[static_cast<std::size_t>(c)];
    if (slides.empty()) throw DataError("few-shot: class " + std::to_string(c) + " has no support slide");
    Eigen::Index total = 0;
    for (const Mat* m : slides) total += m->rows();
    Mat pooled(total, text.protos.cols());
    Eigen::Index r = 0;
    for (const Mat* m : slides) {
      pooled.middleRows(r, m->rows()) = *m;
      r += m->rows();
    }
    pooled = normalize_rows(pooled);
    const Eigen::VectorXd sim = pooled * text.protos.row(c).transpose();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return sim(a) > sim(b); });
    const int k = k_proto > 0 ? k_proto : default_k(static_cast<int>(total));
    const auto take = std::min<Eigen::Index>(k, total);
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(pooled.cols());
    for (Eigen::Index i = 0; i < take; ++i) acc += pooled.row(order[static_cast<std::size_t>(i)]);
    out.protos.row(c) = acc / static_cast<double>(take);
  }
  out.protos = normalize_rows(out.protos);
  return out;
}

ShotResult mi_fewshot(const Mat& patches, const ClassPrototypes& protos, int k_vote) {
  check_k(k_vote, patches.rows(), "mi_fewshot");
  if (patches.cols() != protos.protos.cols()) throw DataError("mi_fewshot: embedding width mismatch");
  const Mat sim = patches * protos.protos.transpose();
  const auto m = sim.rows();
  std::vector<int> nearest(static_cast<std::size_t>(m));
  std::vector<double> conf(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    int best = 0;
    for (Eigen::Index c = 1; c < sim.cols(); ++c) {
      if (sim(i, c) > sim(i, best)) best = static_cast<int>(c);
    }
    nearest[static_cast<std::size_t>(i)] = best;
    conf[static_cast<std::size_t>(i)] = sim(i, best);
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
  std::vector<double> votes(static_cast<std::size_t>(sim.cols()), 0.0);
  for (int i = 0; i < k_vote; ++i) votes[static_cast<std::size_t>(nearest[order[static_cast<std::size_t>(i)]])] += 1;
  ShotResult r;
  r.pred = argmax_lowest(votes);
  r.scores = topk_mean_scores(sim, k_vote);
  return r;
}

std::vector<int> k_schedule(int smallest_class) {
  std::vector<int> ks;
  const int cap = std::min(256, smallest_class);
  for (int k = 1; k <= cap; k *= 2) ks.push_back(k);
  return ks;
}

std::vector<EpisodeResult> run_episodes(const std::vector<Mat>& slides, const std::vector<int>& labels,
                                        const ClassPrototypes& text, const std::vector<int>& k_values,
                                        const EpisodeOptions& opt, const std::function<void(const std::string&)>& log) {
  if (slides.size() != labels.size()) throw DataError("run_episodes: slides and labels differ in length");
  const auto n_classes = static_cast<int>(text.protos.rows());
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) throw DataError("run_episodes: label out of range");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  std::vector<EpisodeResult> out;
  for (std::size_t ki = 0; ki < k_values.size(); ++ki) {
    const int k = k_values[ki];
    bool ok = k >= 1;
    for (int c = 0; c < n_classes && ok; ++c) {
      if (static_cast<int>(by_class[static_cast<std::size_t>(c)].size()) < k) {
        if (log) {
          log("skipping k=" + std::to_string(k) + ": class " + std::to_string(c) + " has only " +
              std::to_string(by_class[static_cast<std::size_t>(c)].size()) + " slides");
        }
        ok = false;
      }
    }
    if (!ok) continue;
    for (int e = 0; e < opt.n_episodes; ++e) {
      std::mt19937_64 rng(nn::mix_seed(opt.seed, (static_cast<std::uint64_t>(k) << 20) + static_cast<std::uint64_t>(e)));
      std::vector<SupportSlide> support;
      std::vector<std::uint8_t> in_support(slides.size(), 0);
      EpisodeResult res;
      res.k = k;
      res.episode = e;
      for (int c = 0; c < n_classes; ++c) {
        auto pool = by_class[static_cast<std::size_t>(c)];
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int s = 0; s < k; ++s) {
          const std::size_t i = pool[static_cast<std::size_t>(s)];
          support.push_back({&slides[i], c});
          in_support[i] = 1;
          res.support.push_back(i);
        }
      }
      const auto protos = build_fewshot_prototypes(support, text, opt.k_proto);
      std::vector<std::size_t> query;
      for (std::size_t i = 0; i < slides.size(); ++i) {
        if (!in_support[i]) query.push_back(i);
      }
      Mat scores(static_cast<Eigen::Index>(query.size()), n_classes);
      std::vector<int> ql;
      for (std::size_t q = 0; q < query.size(); ++q) {
        const Mat& s = slides[query[q]];
        const int kv = opt.k_vote > 0 ? std::min<int>(opt.k_vote, static_cast<int>(s.rows()))
                                      : default_k(static_cast<int>(s.rows()));
        const auto r = mi_fewshot(s, protos, kv);
        for (int c = 0; c < n_classes; ++c) scores(static_cast<Eigen::Index>(q), c) = r.scores[static_cast<std::size_t>(c)];
        ql.push_back(labels[query[q]]);
      }
      res.n_query = query.size();
      try {
        res.auc = stats::macro_auc(scores, ql);
      } catch (const DataError& err) {
        if (log) log("skipping k=" + std::to_string(k) + " episode " + std::to_string(e) + ": " + err.what());
        continue;
      }
      out.push_back(std::move(res));
    }
  }
  return out;
}

std::vector<KSummary> summarize(const std::vector<EpisodeResult>& results) {
  std::map<int, std::vector<double>> by_k;
  for (const auto& r : results) by_k[r.k].push_back(r.auc);
  std::vector<KSummary> out;
  for (const auto& [k, v] : by_k) {
    KSummary s;
    s.k = k;
    s.episodes = static_cast<int>(v.size());
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    out.push_back(s);
  }
  return out;
}

Mat patch_embeddings(const encoders::Encoders& enc, const corpus::Case& c, const std::string& source, int m_fix,
                     std::uint64_t seed) {
  Mat tokens;
  if (source == "teacher") {
    tokens = stage2::teacher_reembed(enc, corpus::fix_bag(stage1::base_features(enc, c), m_fix, seed));
  } else if (source == "student") {
    const Mat feats = encoders::extract_eval(enc, corpus::to_double(c.patch_raw), "student");
    tokens = encoders::project_eval(enc, feats, Head::distill);
  } else if (source == "base") {
    const Mat feats = stage1::base_features(enc, c);
    tokens = feats * enc.params().at("agg.in.w").value;
    tokens.rowwise() += enc.params().at("agg.in.b").value.row(0);
  } else {
    throw DataError("unknown feature source '" + source + "' (expected base, student or teacher)");
  }
  return normalize_rows(encoders::project_eval(enc, tokens, Head::slide));
}

}  // namespace mstar::shot
