// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/stats.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace mstar::stats {

std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw DataError("binary_auc: length mismatch");
  const std::vector<double> r = midranks(scores);
  double n_pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (positive[i]) {
      n_pos += 1;
      rank_sum += r[i];
    }
  }
  const double n_neg = static_cast<double>(r.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("binary_auc: needs both classes");
  return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

double macro_auc(const Eigen::MatrixXd& scores, std::span<const int> labels, std::vector<int>* skipped) {
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) {
    throw DataError("macro_auc: score rows != label count");
  }
  std::map<int, int> counts;
  for (int y : labels) counts[y]++;
  if (counts.size() < 2) throw DataError("macro_auc: labels contain a single class");
  double total = 0;
  int used = 0;
  std::vector<double> col(labels.size());
  std::vector<std::uint8_t> pos(labels.size());
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    if (!counts.count(static_cast<int>(c))) {
      if (skipped) skipped->push_back(static_cast<int>(c));
      continue;
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores(static_cast<Eigen::Index>(i), c);
      pos[i] = labels[i] == c;
    }
    total += binary_auc(col, pos);
    ++used;
  }
  if (used == 0) throw DataError("macro_auc: no scored class present in labels");
  return total / used;
}

namespace {

/// Fenwick tree of counts over compressed risk ranks.
class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) tree_[i]++;
  }
  long prefix(std::size_t i) const {  // count of ranks < i
    long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long> tree_;
};

}  // namespace

double c_index(std::span<const double> risks, std::span<const double> times,
               std::span<const std::uint8_t> events) {
  const std::size_t n = risks.size();
  if (times.size() != n || events.size() != n) throw DataError("c_index: length mismatch");
  std::vector<double> sorted_risks(risks.begin(), risks.end());
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) -
                                    sorted_risks.begin());
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  // Sweep from the longest time down; the tree holds every case with a
  // strictly larger time than the group being scored.
  Fenwick tree(sorted_risks.size());
  long inserted = 0;
  double concordant = 0, comparable = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && times[order[j + 1]] == times[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) {
      const std::size_t a = order[k];
      if (!events[a]) continue;
      const std::size_t r = rank_of(risks[a]);
      const long below = tree.prefix(r);
      const long at_or_below = tree.prefix(r + 1);
      concordant += static_cast<double>(below) + 0.5 * static_cast<double>(at_or_below - below);
      comparable += static_cast<double>(inserted);
    }
    for (std::size_t k = i; k <= j; ++k) {
      tree.add(rank_of(risks[order[k]]));
      ++inserted;
    }
    i = j + 1;
  }
  if (comparable == 0) throw DataError("c_index: no comparable pairs");
  return concordant / comparable;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Interval bootstrap_ci(const IndexMetric& metric, std::size_t n, int n_boot, std::uint64_t seed,
                      double alpha) {
  if (n == 0) throw DataError("bootstrap_ci: empty sample");
  if (n_boot < 1) throw DataError("bootstrap_ci: n_boot must be positive");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const std::optional<double> point = metric(all);
  if (!point) throw DataError("bootstrap_ci: metric undefined on the full sample");

  std::vector<double> reps;
  reps.reserve(static_cast<std::size_t>(n_boot));
  std::vector<std::size_t> idx(n);
  for (int r = 0; r < n_boot; ++r) {
    std::mt19937_64 rng(nn::mix_seed(seed, static_cast<std::uint64_t>(r)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::optional<double> value;
    for (int attempt = 0; attempt <= 100 && !value; ++attempt) {
      for (auto& v : idx) v = pick(rng);
      value = metric(idx);
    }
    if (!value) throw DataError("bootstrap_ci: resample metric undefined after 100 retries");
    reps.push_back(*value);
  }
  return {*point, percentile(reps, alpha / 2), percentile(reps, 1 - alpha / 2)};
}

double wilcoxon_w_plus(std::span<const double> x, std::span<const double> y, int* n_nonzero) {
  if (x.size() != y.size()) throw DataError("wilcoxon: samples differ in length");
  std::vector<double> d, mag;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    if (diff != 0) {
      d.push_back(diff);
      mag.push_back(std::abs(diff));
    }
  }
  if (n_nonzero) *n_nonzero = static_cast<int>(d.size());
  const std::vector<double> r = midranks(mag);
  double w = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) w += r[i];
  }
  return w;
}

double wilcoxon_one_sided(std::span<const double> x, std::span<const double> y) {
  int n = 0;
  const double w_plus = wilcoxon_w_plus(x, y, &n);
  if (n == 0) throw DataError("wilcoxon: all differences are zero");

  std::vector<double> mag;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != y[i]) mag.push_back(std::abs(x[i] - y[i]));
  }
  const std::vector<double> r = midranks(mag);

  if (n <= 12) {
    // Midranks are multiples of 1/2, so doubled ranks are integers and the
    // null distribution of 2W+ is a subset-sum count.
    std::vector<int> r2(r.size());
    int total = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      r2[i] = static_cast<int>(std::lround(2 * r[i]));
      total += r2[i];
    }
    std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
    ways[0] = 1;
    for (int v : r2) {
      for (int s = total; s >= v; --s) ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - v)];
    }
    const int obs = static_cast<int>(std::lround(2 * w_plus));
    double tail = 0;
    for (int s = obs; s <= total; ++s) tail += ways[static_cast<std::size_t>(s)];
    return tail / std::ldexp(1.0, n);
  }

  const double nn_ = n;
  const double mu = nn_ * (nn_ + 1) / 4;
  double var = nn_ * (nn_ + 1) * (2 * nn_ + 1) / 24;
  std::map<double, int> ties;
  for (double v : r) ties[v]++;
  for (const auto& [rank, t] : ties) {
    if (t > 1) var -= (static_cast<double>(t) * t * t - t) / 48;
  }
  if (var <= 0) return 1.0;
  const double z = (w_plus - mu - 0.5) / std::sqrt(var);
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

RankResult avg_rank_cd(const Eigen::MatrixXd& table, double q_alpha) {
  const Eigen::Index n = table.rows(), k = table.cols();
  if (n < 1 || k < 1) throw DataError("avg_rank_cd: empty table");
  if (!table.allFinite()) throw DataError("avg_rank_cd: incomplete table");
  RankResult res;
  res.avg_ranks.assign(static_cast<std::size_t>(k), 0.0);
  std::vector<double> row(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) row[static_cast<std::size_t>(j)] = -table(i, j);
    const auto r = midranks(row);
    for (std::size_t j = 0; j < r.size(); ++j) res.avg_ranks[j] += r[j] / static_cast<double>(n);
  }
  res.cd = q_alpha * std::sqrt(static_cast<double>(k * (k + 1)) / (6.0 * static_cast<double>(n)));
  return res;
}

// Coordinates with an exactly zero gradient (a key bias under softmax shift
// invariance) leave only rounding noise in the difference quotient; the floor
// keeps that noise from reading as a large relative error.
constexpr double kGradFloor = 1e-6;

double grad_check(const std::function<ad::Var(ad::Tape&)>& loss_fn, ad::ParamStore& params,
                  int probe_count, double eps, std::uint64_t seed) {
  params.zero_grad();
  {
    ad::Tape tape;
    ad::Var loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<std::pair<ad::Parameter*, Eigen::Index>> scalars;
  for (ad::Parameter* p : params.all()) {
    if (p->frozen) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) scalars.emplace_back(p, i);
  }
  if (scalars.empty()) throw DataError("grad_check: no trainable scalars");
  std::mt19937_64 rng(seed);
  std::shuffle(scalars.begin(), scalars.end(), rng);
  const std::size_t probes = std::min(scalars.size(), static_cast<std::size_t>(std::max(probe_count, 1)));

  auto eval = [&]() {
    ad::Tape tape;
    return loss_fn(tape).scalar();
  };
  double worst = 0;
  for (std::size_t s = 0; s < probes; ++s) {
    auto [p, i] = scalars[s];
    const double analytic = p->grad.data()[i];
    const double orig = p->value.data()[i];
    p->value.data()[i] = orig + eps;
    const double up = eval();
    p->value.data()[i] = orig - eps;
    const double down = eval();
    p->value.data()[i] = orig;
    const double fd = (up - down) / (2 * eps);
    const double rel = std::abs(analytic - fd) / std::max(kGradFloor, std::abs(analytic) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace mstar::stats
