// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// MIL heads trained from scratch on frozen patch features: gated-attention
// ABMIL and a TransMIL-style transformer head with exact attention, for slide
// classification and discrete-hazard survival.

#pragma once

#include "mstar/autograd.hpp"
#include "mstar/corpus.hpp"
#include "mstar/encoders.hpp"
#include "mstar/stats.hpp"

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace mstar::downstream {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

enum class HeadKind { abmil, transmil };
enum class Task { classify, survival };

HeadKind head_from_string(const std::string& s);
Task task_from_string(const std::string& s);
const char* to_string(HeadKind h);
const char* to_string(Task t);

struct MILConfig {
  int input_dim = 64;
  int hidden_dim = 64;
  int attn_dim = 32;
  double dropout = 0.25;
  int epochs = 30;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::string optimizer = "adam";
  std::string scheduler = "cosine";
  Task task = Task::classify;
  HeadKind head = HeadKind::abmil;
  int n_classes = 2;
  int n_bins = 4;
  int transmil_heads = 4;
  int transmil_layers = 2;
  int n_boot = 1000;
  std::uint64_t seed = 0;

  /// Published head settings (512 hidden units, attention width 256).
  static MILConfig published_preset();
  int n_outputs() const { return task == Task::classify ? n_classes : n_bins; }
  void validate() const;
};

void to_json(nlohmann::json& j, const MILConfig& c);
void from_json(const nlohmann::json& j, MILConfig& c);

// ---- heads --------------------------------------------------------------------

void add_abmil(ParamStore& ps, const MILConfig& cfg, std::mt19937_64& rng);
void add_transmil(ParamStore& ps, const MILConfig& cfg, std::mt19937_64& rng);

struct AbmilOut {
  Var embed;      // 1 x hidden
  Var attention;  // 1 x M, sums to one
};

/// Hidden projection h = ReLU(W x + b), gated attention
/// softmax_m(w^T (tanh(V h_m) * sigmoid(U h_m))), embed = sum_m a_m h_m.
AbmilOut abmil_forward(Tape& t, ParamStore& ps, Var features, double dropout = 0.0, std::mt19937_64* rng = nullptr);

class MILModel {
 public:
  MILModel(const MILConfig& cfg, std::uint64_t seed);

  const MILConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// 1 x n_outputs logits. Dropout is active only when rng is given.
  Var forward(Tape& t, Var features, std::mt19937_64* rng = nullptr);
  Eigen::RowVectorXd predict(const Mat& features) const;

 private:
  MILConfig cfg_;
  ParamStore params_;
};

// ---- survival -------------------------------------------------------------------

/// Bin edges at the 0, 1/B, ..., 1 linear-interpolation quantiles of the
/// uncensored times, outer edges at -inf and +inf.
struct SurvivalSpec {
  std::vector<double> edges;
  int n_bins() const { return static_cast<int>(edges.size()) - 1; }
  /// 1-based bin b with edges[b-1] <= t < edges[b].
  int bin_of(double time) const;
};

SurvivalSpec surv_bins(std::span<const double> times, std::span<const std::uint8_t> events, int n_bins = 4);

/// -c log S(b) - (1 - c) [log S(b-1) + log h_b], h = sigmoid(logits), with
/// each log argument floored at 1e-7. logits is 1 x B, b is 1-based.
Var nll_surv_loss(Var logits, int b, int censor);
double nll_surv_value(const Eigen::RowVectorXd& logits, int b, int censor);

/// -sum_k S(k) for k = 1..B.
double survival_risk(const Eigen::RowVectorXd& logits);

// ---- training -------------------------------------------------------------------

struct MILData {
  std::vector<std::string> ids;
  std::vector<Mat> bags;
  std::vector<int> labels;
  std::vector<double> times;
  std::vector<std::uint8_t> censor;
};

struct Prediction {
  std::string case_id;
  std::vector<double> scores;  // class probabilities, or per-bin hazards
  double risk = 0;
  int label = 0;
  double time = 0;
  int censor = 0;
};

struct MILReport {
  std::string metric;  // "macro_auc" or "c_index"
  int best_epoch = 0;
  double best_val = 0;
  std::vector<double> val_curve;
  stats::Interval test;
  std::vector<Prediction> predictions;  // test split
  std::vector<double> bin_edges;
};

/// Trains on `train`, keeps the parameters of the epoch with the best
/// validation metric (earliest on ties), and reports the test metric with a
/// percentile bootstrap interval.
MILReport train_mil(const MILData& data, const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                    const std::vector<std::size_t>& test, const MILConfig& cfg, MILModel* best_model = nullptr);

double evaluate(const MILModel& model, const MILData& data, const std::vector<std::size_t>& idx,
                const SurvivalSpec* spec, std::vector<Prediction>* preds = nullptr);

// ---- feature sources --------------------------------------------------------------

enum class FeatureSource { base, student, teacher };
FeatureSource feature_source_from_string(const std::string& s);
const char* to_string(FeatureSource f);

/// Bag of one case under a feature source. base/student keep every patch;
/// teacher re-embeds the fixed bag of size m_fix.
Mat case_features(const encoders::Encoders& enc, const corpus::Case& c, FeatureSource src, int m_fix,
                  std::uint64_t seed);

MILData build_mil_data(const encoders::Encoders& enc, const corpus::Cohort& cohort, FeatureSource src, int m_fix,
                       std::uint64_t seed);

}  // namespace mstar::downstream
