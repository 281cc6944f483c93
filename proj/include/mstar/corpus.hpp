// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal cohorts: per-case patch bags, token reports and gene
// expression driven by a shared latent vector, plus the on-disk layout
// (MSTR feature files + JSON manifest), stratified splits and bag fixing.

#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mstar::corpus {

/// Row-major float32 matrix; the in-memory image of an MSTR payload.
using FMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Token id layout shared by reports and prompt files.
struct TokenLayout {
  static constexpr int kPad = 0;
  static constexpr int kClassnameSentinel = 1;
  static constexpr int kFillerBegin = 2;
  static constexpr int kFillerEnd = 32;
  static constexpr int kDiagBegin = 32;
  static constexpr int kDiagPerClass = 4;
  static constexpr int kMaxClasses = 8;
  static constexpr int kLatentBegin = kDiagBegin + kDiagPerClass * kMaxClasses;
  static constexpr int kLatentLevels = 16;
  static constexpr double kLatentLo = -4.0;
  static constexpr double kLatentHi = 4.0;

  static int diag_token(int cancer_type, int synonym) {
    return kDiagBegin + kDiagPerClass * cancer_type + synonym;
  }
  static int latent_token(int dim, int level) { return kLatentBegin + kLatentLevels * dim + level; }
  static int noise_begin(int latent_dim) { return kLatentBegin + kLatentLevels * latent_dim; }
};

enum class LabelMode { nearest_mean, subtype };

struct SynthConfig {
  int n_cases = 200;
  int n_cancer_types = 4;
  int latent_dim = 8;
  int patch_raw_dim = 32;
  std::pair<int, int> patches_per_case{48, 96};
  std::pair<int, int> report_len{24, 48};
  int vocab_size = 256;
  int n_genes = 128;
  double informative_patch_frac = 0.5;
  double noise_sigma = 0.5;
  double censor_rate = 0.3;
  double report_dropout = 0.0;
  double gene_dropout = 0.0;
  std::uint64_t seed = 0;

  // Generator shape knobs.
  double class_sep = 3.0;           // pairwise distance between class means
  double background_sigma = 1.0;    // std of non-informative patches
  double stain_sigma = 0.0;         // per-case additive offset shared by all patches
  double gene_scale = 10.0;
  double gene_floor = 0.5;          // expression below this is recorded as 0
  double median_survival = 30.0;    // months at zero risk
  int tokens_per_latent = 2;
  LabelMode label_mode = LabelMode::nearest_mean;

  /// Throws DataError on invalid values.
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct Case {
  std::string case_id;
  int cancer_type = 0;
  int class_label = 0;
  FMat patch_raw;             // M x d_raw
  FMat patch_feat;            // M x d_feat (base extractor output); may be empty
  std::vector<int> report_tokens;
  FMat gene_expr;             // 1 x G; empty when has_gene is false
  double os_months = 1.0;
  int censor = 0;             // 1 = censored
  bool has_report = true;
  bool has_gene = true;

  int n_patches() const { return static_cast<int>(patch_raw.rows()); }
};

struct Cohort {
  int n_cancer_types = 0;
  int n_classes = 0;
  int vocab_size = 0;
  int n_genes = 0;
  int latent_dim = 0;
  nlohmann::json synth_config;  // provenance; null for hand-built cohorts
  std::vector<Case> cases;
  /// Latent vectors used to generate each case (not persisted).
  std::vector<Eigen::VectorXd> latents;
};

/// Deterministic in cfg (including seed). Case i draws from its own stream
/// seeded with mix_seed(seed, i + 1); global mixing matrices use stream 0.
Cohort synth_cohort(const SynthConfig& cfg);

// ---- MSTR feature files ---------------------------------------------------

/// "MSTR" | u32 version=1 | u32 rows | u32 cols | float32 LE row-major.
void write_mstr(const std::filesystem::path& path, const FMat& m);
FMat read_mstr(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_mstr(const FMat& m);
FMat decode_mstr(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<buffer>");

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort read_cohort(const std::filesystem::path& dir);

// ---- splits ---------------------------------------------------------------

enum class Split { train, val, test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

using SplitAssignment = std::map<std::string, Split>;

enum class StratifyKey { cancer_type, class_label, none };

/// Per-stratum seeded shuffle; part sizes are floors of the target shares with
/// the remainder handed out by largest fractional part (ties train, val, test).
SplitAssignment split_cohort(const Cohort& cohort, std::array<int, 3> ratios = {7, 1, 2},
                             StratifyKey key = StratifyKey::cancer_type, std::uint64_t seed = 0);

std::vector<std::size_t> cases_in(const Cohort& cohort, const SplitAssignment& split, Split which);

// ---- bag fixing -----------------------------------------------------------

/// Row plan for fixing an M-row bag to m_fix rows: source row index per output
/// row, -1 for mean padding. Subsampling keeps the original row order.
std::vector<int> fix_bag_plan(int rows, int m_fix, std::uint64_t seed);

/// Subsample (uniform, without replacement) or pad with the column mean.
Eigen::MatrixXd fix_bag(const Eigen::MatrixXd& features, int m_fix, std::uint64_t seed);
Eigen::MatrixXd apply_bag_plan(const Eigen::MatrixXd& features, const std::vector<int>& plan);

Eigen::MatrixXd to_double(const FMat& m);
FMat to_float(const Eigen::MatrixXd& m);

}  // namespace mstar::corpus
