// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Slide classification without a trained head: text prototypes from prompt
// ensembles with top-K similarity pooling (zero-shot), and text-guided patch
// prototypes with top-K patch voting (few-shot), plus the k-shot episode
// protocol.

#pragma once

#include "mstar/autograd.hpp"
#include "mstar/corpus.hpp"
#include "mstar/encoders.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mstar::shot {

using ad::Mat;

/// Templates are token-id sequences containing the CLASSNAME sentinel id;
/// each class has one or more classname token sequences.
struct PromptSet {
  std::vector<std::vector<int>> templates;
  std::vector<std::vector<std::vector<int>>> classnames;

  int n_classes() const { return static_cast<int>(classnames.size()); }
  void validate() const;
  /// Prompt set for synthetic cohorts: filler-token templates, one classname
  /// per diagnostic synonym of each cancer type.
  static PromptSet synthetic(int n_classes, int n_templates = 8, std::uint64_t seed = 0);
};

void to_json(nlohmann::json& j, const PromptSet& p);
void from_json(const nlohmann::json& j, PromptSet& p);

/// Replaces every sentinel in `tmpl` with `classname`.
std::vector<int> instantiate(const std::vector<int>& tmpl, const std::vector<int>& classname);

enum class Provenance { text, fewshot };

struct ClassPrototypes {
  Mat protos;  // C x d_shared, unit rows
  Provenance provenance = Provenance::text;
};

ClassPrototypes build_text_prototypes(const PromptSet& prompts, const encoders::Encoders& enc);

struct ShotResult {
  std::vector<double> scores;
  int pred = 0;
};

/// max(1, ceil(0.05 * M)).
int default_k(int m);

/// score_c = mean of the K largest similarities to prototype c; pred is the
/// argmax with the lowest index on ties. Rows of `patches` must be unit.
ShotResult mi_zero(const Mat& patches, const ClassPrototypes& protos, int k);

struct SupportSlide {
  const Mat* patches;  // unit rows
  int label;
};

/// k_proto <= 0 selects default_k of each class's pooled patch count.
ClassPrototypes build_fewshot_prototypes(const std::vector<SupportSlide>& support, const ClassPrototypes& text,
                                         int k_proto = 0);

/// Each patch votes for its nearest prototype; the k_vote most confident
/// patches decide by majority (lowest class on ties). Scores follow mi_zero.
ShotResult mi_fewshot(const Mat& patches, const ClassPrototypes& protos, int k_vote);

/// 1, 2, 4, ... up to min(256, largest power of two <= smallest class size).
std::vector<int> k_schedule(int smallest_class);

struct EpisodeResult {
  int k = 0;
  int episode = 0;
  double auc = 0;
  std::size_t n_query = 0;
  std::vector<std::size_t> support;
};

struct KSummary {
  int k = 0;
  double mean = 0;
  double stddev = 0;
  int episodes = 0;
};

struct EpisodeOptions {
  int n_episodes = 5;
  int k_proto = 0;  // 0 selects default_k
  int k_vote = 0;   // 0 selects default_k per query slide
  std::uint64_t seed = 0;
};

/// For each k, samples k support slides per class per episode and scores the
/// remaining slides with mi_fewshot. k larger than a class is skipped and
/// reported through `log`.
std::vector<EpisodeResult> run_episodes(const std::vector<Mat>& slides, const std::vector<int>& labels,
                                        const ClassPrototypes& text, const std::vector<int>& k_values,
                                        const EpisodeOptions& opt,
                                        const std::function<void(const std::string&)>& log = {});

std::vector<KSummary> summarize(const std::vector<EpisodeResult>& results);

// ---- feature sources ----------------------------------------------------------

/// Unit-normalised shared-space patch embeddings of one case. teacher:
/// slide projection of the aggregator tokens; student: slide projection of
/// the distill head applied to student features; base: slide projection of
/// the aggregator's token projection of base features.
Mat patch_embeddings(const encoders::Encoders& enc, const corpus::Case& c, const std::string& source, int m_fix,
                     std::uint64_t seed);

Mat normalize_rows(Mat m);

}  // namespace mstar::shot
