// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Slide-level tri-modal pretraining: pairwise symmetric InfoNCE between the
// slide, report and gene embeddings plus a hard-mined triplet loss over
// concatenated anchors, and the loop that trains the aggregator and the two
// side encoders with them.

#pragma once

#include "mstar/autograd.hpp"
#include "mstar/corpus.hpp"
#include "mstar/encoders.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace mstar::stage1 {

using ad::Mat;
using ad::Tape;
using ad::Var;

/// Rows of P, T and Gm refer to the same case. Rows of an unavailable
/// modality hold placeholders and are excluded by the flags.
struct EmbeddingBatch {
  Var P;
  Var T;
  Var Gm;
  std::vector<int> cancer;
  std::vector<std::uint8_t> has_slide;
  std::vector<std::uint8_t> has_report;
  std::vector<std::uint8_t> has_gene;

  std::size_t size() const { return cancer.size(); }
};

struct AnchorSet {
  Var a;  // N x (k * d_shared)
  std::vector<int> cancer;
  double margin = 0.3;
};

/// Symmetric InfoNCE over the N x N cosine-similarity matrix scaled by
/// exp(log_scale). Rows are L2-normalised inside.
Var info_nce_pair(Var A, Var B, Var log_scale);
/// Fixed temperature variant.
Var info_nce_pair(Var A, Var B, double tau);

struct MinedTriplet {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

/// Farthest same-label and nearest other-label sample per anchor (lowest
/// index on distance ties). Anchors lacking either are omitted.
std::vector<MinedTriplet> mine_hard(const Mat& anchors, const std::vector<int>& labels);

/// Mean hinge over mined anchors. Throws DataError when no anchor is valid.
Var triplet_hard(const AnchorSet& anchors);

struct Stage1Loss {
  Var total;
  double pt = 0;   // slide-report
  double pg = 0;   // slide-gene
  double tg = 0;   // report-gene
  double tri = 0;
  bool triplet_used = false;
};

/// Each contrastive pair uses the cases holding both modalities and is skipped
/// below two such cases. Anchors concatenate the normalised slide, report and
/// gene rows of cases with all three; the triplet term is skipped when no
/// anchor is valid.
Stage1Loss stage1_loss(Tape& t, const EmbeddingBatch& batch, Var log_scale, double margin);

// ---- training ---------------------------------------------------------------

struct Stage1Config {
  int epochs = 100;
  int batch_size = 16;
  double lr = 2e-4;
  double weight_decay = 0.0;
  int m_fix = 256;
  double margin = 0.3;
  /// Probability of masking each report token during training.
  double token_drop = 0.0;
  /// Epochs of linear learning-rate warmup before the cosine decay.
  int warmup_epochs = 0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const Stage1Config& c);
void from_json(const nlohmann::json& j, Stage1Config& c);

struct EpochLog {
  int epoch = 0;
  double pt = 0;
  double pg = 0;
  double tg = 0;
  double tri = 0;
  double total = 0;
};

/// Patch features of a case under the frozen base extractor: the stored
/// feature bag when its width matches, otherwise recomputed from raw patches.
Mat base_features(const encoders::Encoders& enc, const corpus::Case& c);

/// Trains agg.*, text.*, gene.* (except the identity table), the three
/// shared-space projections and the logit scale. Fits the gene binning on
/// the training cases first. Throws NumericalError on a non-finite loss.
std::vector<EpochLog> train_stage1(encoders::Encoders& enc, const corpus::Cohort& cohort,
                                   const std::vector<std::size_t>& train_cases, const Stage1Config& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {});

// ---- evaluation ---------------------------------------------------------------

/// Unit-normalised shared-space embeddings; rows for missing modalities are
/// zero and flagged.
struct SharedEmbeddings {
  Mat P, T, G;
  std::vector<int> cancer;
  std::vector<std::uint8_t> has_report, has_gene;
};

SharedEmbeddings embed_cases(const encoders::Encoders& enc, const corpus::Cohort& cohort,
                             const std::vector<std::size_t>& cases, int m_fix, std::uint64_t seed);

/// Fraction of rows i whose most similar row of B is row i (ties count as
/// misses unless i is the lowest tied index).
double recall_at_1(const Mat& A, const Mat& B);

struct AnchorDistances {
  double intra = 0;
  double inter = 0;
};

/// Mean pairwise Euclidean distance between concatenated anchors of
/// same-cancer and different-cancer pairs.
AnchorDistances anchor_distances(const SharedEmbeddings& e);

}  // namespace mstar::stage1
