// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used by the unit and acceptance
// tests. Each favours the most literal formulation (pairwise loops, full
// enumeration) over speed and shares no code with the library.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <vector>

namespace oracle {

/// Pairwise probability P(s_pos > s_neg) + 0.5 P(tie).
inline double auc_pairwise(const std::vector<double>& s, const std::vector<int>& positive) {
  double hits = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (positive[j]) continue;
      pairs += 1;
      if (s[i] > s[j]) hits += 1;
      else if (s[i] == s[j]) hits += 0.5;
    }
  }
  return hits / pairs;
}

/// One-vs-rest mean over classes that occur in labels.
inline double macro_auc(const Eigen::MatrixXd& scores, const std::vector<int>& labels) {
  std::set<int> present(labels.begin(), labels.end());
  double total = 0;
  int used = 0;
  for (int c = 0; c < scores.cols(); ++c) {
    if (!present.count(c)) continue;
    std::vector<double> s;
    std::vector<int> pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(scores(static_cast<Eigen::Index>(i), c));
      pos.push_back(labels[i] == c);
    }
    total += auc_pairwise(s, pos);
    ++used;
  }
  return total / used;
}

/// Harrell: (i, j) comparable when t_i < t_j and i had the event; concordant
/// when r_i > r_j, half credit on equal risk.
inline double c_index(const std::vector<double>& r, const std::vector<double>& t, const std::vector<std::uint8_t>& e) {
  double num = 0;
  double den = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!e[i]) continue;
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (!(t[i] < t[j])) continue;
      den += 1;
      if (r[i] > r[j]) num += 1;
      else if (r[i] == r[j]) num += 0.5;
    }
  }
  return num / den;
}

/// Average 1-based rank by counting: 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> ranks_by_counting(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0;
    double equal = 0;
    for (double w : v) {
      if (w < v[i]) less += 1;
      else if (w == v[i]) equal += 1;
    }
    out[i] = 1 + less + (equal - 1) / 2;
  }
  return out;
}

/// P(W+ >= observed) under H0 by visiting all 2^n sign assignments.
inline double wilcoxon_enumerate(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  }
  std::vector<double> mag;
  for (double v : d) mag.push_back(std::abs(v));
  const auto r = ranks_by_counting(mag);
  double observed = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) observed += r[i];
  }
  const std::uint64_t n = d.size();
  std::uint64_t at_least = 0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    double w = 0;
    for (std::uint64_t i = 0; i < n; ++i) {
      if (mask & (std::uint64_t{1} << i)) w += r[i];
    }
    if (w >= observed - 1e-9) ++at_least;
  }
  return static_cast<double>(at_least) / static_cast<double>(std::uint64_t{1} << n);
}

/// Calls fn on every K-subset of {0..n-1}, in lexicographic order.
inline void for_each_subset(int n, int k, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
  while (true) {
    fn(idx);
    int i = k - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) return;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

/// Values of a subset in descending order.
inline std::vector<double> desc_values(const std::vector<double>& v, const std::vector<int>& subset) {
  std::vector<double> out;
  for (int i : subset) out.push_back(v[static_cast<std::size_t>(i)]);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

/// Exhaustive top-K: the K-subset whose descending value list is
/// lexicographically largest; among equals, the first subset visited.
inline std::vector<int> best_subset(const std::vector<double>& v, int k) {
  std::vector<int> best;
  std::vector<double> best_vals;
  for_each_subset(static_cast<int>(v.size()), k, [&](const std::vector<int>& s) {
    auto vals = desc_values(v, s);
    if (best.empty() || vals > best_vals) {
      best = s;
      best_vals = std::move(vals);
    }
  });
  return best;
}

inline double mean_desc(const std::vector<double>& vals) {
  double s = 0;
  for (double x : vals) s += x;
  return s / static_cast<double>(vals.size());
}

inline int argmax_first(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

struct ShotAnswer {
  std::vector<double> scores;
  int pred = 0;
};

/// Top-K mean similarity per class by subset enumeration.
inline std::vector<double> topk_scores(const Eigen::MatrixXd& sim, int k) {
  std::vector<double> scores;
  for (Eigen::Index c = 0; c < sim.cols(); ++c) {
    std::vector<double> col(sim.col(c).data(), sim.col(c).data() + sim.rows());
    scores.push_back(mean_desc(desc_values(col, best_subset(col, k))));
  }
  return scores;
}

inline ShotAnswer mi_zero(const Eigen::MatrixXd& patches, const Eigen::MatrixXd& protos, int k) {
  const Eigen::MatrixXd sim = patches * protos.transpose();
  ShotAnswer a;
  a.scores = topk_scores(sim, k);
  a.pred = argmax_first(a.scores);
  return a;
}

inline ShotAnswer mi_fewshot(const Eigen::MatrixXd& patches, const Eigen::MatrixXd& protos, int k) {
  const Eigen::MatrixXd sim = patches * protos.transpose();
  std::vector<double> conf;
  std::vector<int> nearest;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(sim.cols()));
    for (Eigen::Index c = 0; c < sim.cols(); ++c) row[static_cast<std::size_t>(c)] = sim(i, c);
    nearest.push_back(argmax_first(row));
    conf.push_back(row[static_cast<std::size_t>(nearest.back())]);
  }
  std::vector<double> votes(static_cast<std::size_t>(sim.cols()), 0.0);
  for (int i : best_subset(conf, k)) votes[static_cast<std::size_t>(nearest[static_cast<std::size_t>(i)])] += 1;
  ShotAnswer a;
  a.pred = argmax_first(votes);
  a.scores = topk_scores(sim, k);
  return a;
}

struct Mined {
  int positive = -1;
  int negative = -1;
  double d_pos = 0;
  double d_neg = 0;
};

/// For every anchor, scans all (positive, negative) pairs and keeps the
/// farthest positive and nearest negative, earliest index on ties.
inline std::vector<Mined> mine_exhaustive(const Eigen::MatrixXd& a, const std::vector<int>& labels) {
  const auto n = static_cast<int>(labels.size());
  std::vector<Mined> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Mined m;
    for (int p = 0; p < n; ++p) {
      if (p == i || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(i)]) continue;
      for (int q = 0; q < n; ++q) {
        if (labels[static_cast<std::size_t>(q)] == labels[static_cast<std::size_t>(i)]) continue;
        const double dp = (a.row(i) - a.row(p)).norm();
        const double dn = (a.row(i) - a.row(q)).norm();
        if (m.positive < 0 || dp > m.d_pos) {
          m.positive = p;
          m.d_pos = dp;
        }
        if (m.negative < 0 || dn < m.d_neg) {
          m.negative = q;
          m.d_neg = dn;
        }
      }
    }
    out[static_cast<std::size_t>(i)] = m;
  }
  return out;
}

/// Mean hinge over anchors with both a positive and a negative.
inline double triplet_value(const Eigen::MatrixXd& a, const std::vector<int>& labels, double margin) {
  double total = 0;
  int used = 0;
  for (const auto& m : mine_exhaustive(a, labels)) {
    if (m.positive < 0 || m.negative < 0) continue;
    total += std::max(0.0, m.d_pos - m.d_neg + margin);
    ++used;
  }
  return total / used;
}

}  // namespace oracle
