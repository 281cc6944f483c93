// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Patch-level distillation: the frozen slide aggregator re-embeds base
// features, and the student extractor learns to reproduce those re-embeddings
// through the distill head while an EMA sibling anchors it to its own past.

#pragma once

#include "mstar/autograd.hpp"
#include "mstar/corpus.hpp"
#include "mstar/encoders.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace mstar::stage2 {

using ad::Mat;
using ad::Tape;
using ad::Var;

/// Per-patch token outputs of the aggregator on an already fixed bag.
Mat teacher_reembed(const encoders::Encoders& teacher, const Mat& base_bag);

enum class Reduction { mean, sum };
Reduction reduction_from_string(const std::string& s);

/// Rows of fp/teacher and of student/ema correspond patch by patch.
struct DistillTerms {
  Var loss;
  double teacher_l1 = 0;  // mean over patches of ||f(p) - p_hat||_1
  double ema_l1 = 0;      // mean over patches of ||p - p_bar||_1
};

/// lambda * ||f(p) - p_hat||_1 + (1 - lambda) * ||p - p_bar||_1 per patch,
/// averaged (or summed) over patches. Throws DataError for lambda outside
/// [0, 1] or inconsistent shapes.
DistillTerms distill_loss(Var fp, Var teacher, Var student, Var ema, double lambda, Reduction reduction = Reduction::mean);

struct Stage2Config {
  int epochs = 20;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double lambda = 0.6;
  double ema_decay = 0.999;
  int m_fix = 256;
  Reduction reduction = Reduction::mean;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const Stage2Config& c);
void from_json(const nlohmann::json& j, Stage2Config& c);

/// Per case: the bag plan and the teacher re-embeddings of the fixed bag,
/// rounded through float32 so cached and fresh values agree bit for bit.
struct TeacherTargets {
  std::vector<int> plan;
  Mat tokens;  // m_fix x d_model
};

/// Fills or reads `cache_dir/<case_id>.mstr` when cache_dir is non-empty.
TeacherTargets teacher_targets(const encoders::Encoders& enc, const corpus::Case& c, int m_fix, std::uint64_t seed,
                               const std::filesystem::path& cache_dir = {});

struct EpochLog {
  int epoch = 0;
  double teacher_l1 = 0;
  double ema_l1 = 0;
  double total = 0;
};

/// Resets student.* and ema.* to copies of base.*, then trains student.* and
/// proj.distill.* with the EMA update after every optimizer step. Everything
/// else is verified unchanged at the end of each epoch.
std::vector<EpochLog> train_stage2(encoders::Encoders& enc, const corpus::Cohort& cohort,
                                   const std::vector<std::size_t>& train_cases, const Stage2Config& cfg,
                                   const std::filesystem::path& cache_dir = {},
                                   const std::function<void(const EpochLog&)>& on_epoch = {});

/// Mean per-patch ||f(g(raw)) - p_hat||_1 over the real rows of each case's
/// fixed bag.
double heldout_teacher_l1(const encoders::Encoders& enc, const corpus::Cohort& cohort,
                          const std::vector<std::size_t>& cases, int m_fix, std::uint64_t seed,
                          const std::filesystem::path& cache_dir = {});

}  // namespace mstar::stage2
