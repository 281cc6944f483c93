// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation statistics: Macro-AUC, Harrell's C-index, percentile bootstrap,
// one-sided Wilcoxon signed-rank, average ranks with the Bonferroni-Dunn
// critical difference, and a finite-difference gradient checker.

#pragma once

#include "mstar/autograd.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mstar::stats {

/// Mean one-vs-rest ROC AUC over the classes present in `labels`. Column c of
/// `scores` ranks class c. Ties count 1/2. Classes absent from `labels` are
/// skipped (reported through `skipped` when non-null).
double macro_auc(const Eigen::MatrixXd& scores, std::span<const int> labels,
                 std::vector<int>* skipped = nullptr);

/// Binary AUC of `scores` for positives (label true) by the rank statistic.
double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// Harrell's C-index. A pair (i,j) is comparable when t_i < t_j and event_i.
double c_index(std::span<const double> risks, std::span<const double> times,
               std::span<const std::uint8_t> events);

struct Interval {
  double point = 0;
  double lo = 0;
  double hi = 0;
};

/// Metric evaluated on a multiset of row indices; nullopt when undefined
/// (e.g. a resample containing one class only).
using IndexMetric = std::function<std::optional<double>(std::span<const std::size_t>)>;

/// Percentile bootstrap. Each replicate r draws from its own stream seeded by
/// mix_seed(seed, r); undefined resamples are redrawn up to 100 times.
/// Percentiles use linear interpolation between order statistics at
/// position q*(n_boot-1).
Interval bootstrap_ci(const IndexMetric& metric, std::size_t n, int n_boot, std::uint64_t seed,
                      double alpha = 0.05);

/// Linear-interpolation percentile of unsorted values, q in [0,1].
double percentile(std::vector<double> values, double q);

/// P(W >= W+) for the signed-rank statistic under H0, alternative x > y.
/// Exact enumeration over sign patterns when the non-zero count is <= 12,
/// otherwise the normal approximation with tie and continuity corrections.
double wilcoxon_one_sided(std::span<const double> x, std::span<const double> y);

/// W+ with midranks, zero differences dropped. Exposed for tests.
double wilcoxon_w_plus(std::span<const double> x, std::span<const double> y, int* n_nonzero = nullptr);

struct RankResult {
  std::vector<double> avg_ranks;
  double cd = 0;
};

/// Rows are datasets, columns models; larger metric is better. Ranks are 1
/// for best with midranks for ties. CD = q_alpha * sqrt(k(k+1)/(6N)).
RankResult avg_rank_cd(const Eigen::MatrixXd& table, double q_alpha);

/// Midranks (1-based, ascending) of values.
std::vector<double> midranks(std::span<const double> values);

/// Central-difference check over `probe_count` random non-frozen scalars of
/// `params`. `loss_fn` builds the loss on the given tape. Returns the max of
/// |g_a - g_fd| / max(1e-6, |g_a| + |g_fd|).
double grad_check(const std::function<ad::Var(ad::Tape&)>& loss_fn, ad::ParamStore& params,
                  int probe_count, double eps = 1e-5, std::uint64_t seed = 0);

}  // namespace mstar::stats
