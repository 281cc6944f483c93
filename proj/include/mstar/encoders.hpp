// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// The five networks of the pretraining pipeline and their projection heads,
// held in one ParamStore under group prefixes:
//
//   base.*     frozen patch extractor (stand-in for a pretrained extractor)
//   student.*  trainable patch extractor, initialised as a copy of base
//   ema.*      gradient-free EMA sibling of the student
//   agg.*      slide aggregator: token projection, CLS, pre-norm blocks, head
//   text.*     report encoder: token + position embeddings, blocks, CLS
//   gene.*     gene encoder: frozen identity table + bin embeddings, blocks
//   proj.*     slide/text/gene projections to the shared space, distill head
//   logit_scale  log(1/tau)

#pragma once

#include "mstar/autograd.hpp"
#include "mstar/corpus.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mstar::encoders {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

struct EncoderConfig {
  int d_raw = 32;
  int base_hidden = 64;
  int d_feat = 64;
  int d_model = 64;
  int d_shared = 64;
  int d_gene = 16;
  int n_genes = 128;
  int n_bins = 8;
  int vocab_size = 256;
  int max_len = 64;
  int heads = 4;
  int gene_heads = 2;
  int layers = 2;
  int mlp_ratio = 2;
  bool agg_positional = false;
  double tau_init = 0.07;
  bool learn_tau = true;
  double max_logit_scale = 100.0;
  std::uint64_t seed = 0;

  /// Published widths (1024-d features, 512-d shared space, 200-d gene
  /// embeddings, 17,425 genes, 512 report tokens).
  static EncoderConfig published_preset();
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Equal-width bins over the nonzero log1p range, bin 0 reserved for zeros.
struct GeneBinning {
  double lo = 0.0;
  double hi = 1.0;
  int n_bins = 8;
};

struct GeneTokens {
  std::vector<int> bins;
};

/// Fits (lo, hi) to the nonzero log1p expression values of the given cases.
GeneBinning fit_gene_binning(const corpus::Cohort& cohort, const std::vector<std::size_t>& cases, int n_bins);
GeneTokens gene_tokenize(std::span<const float> expr, const GeneBinning& binning);
GeneTokens gene_tokenize(std::span<const double> expr, const GeneBinning& binning);

class Encoders {
 public:
  explicit Encoders(EncoderConfig cfg);
  Encoders(EncoderConfig cfg, ParamStore params, GeneBinning binning);

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const GeneBinning& binning() const { return binning_; }
  void set_binning(const GeneBinning& b) { binning_ = b; }

  /// Copies every tensor under `prefix` from `other` (shapes must agree).
  void copy_group(const ParamStore& other, const std::string& prefix);
  /// Resets student.* and ema.* to copies of base.*.
  void reset_student_from_base();

  double logit_scale() const;

 private:
  EncoderConfig cfg_;
  ParamStore params_;
  GeneBinning binning_;
};

// ---- forwards ---------------------------------------------------------------

/// Frozen base extractor, evaluated without a tape.
Mat base_extract(const Encoders& enc, const Mat& raw);

/// Patch extractor forward on a tape for group "base", "student" or "ema".
Var extract(Tape& t, Encoders& enc, Var raw, const std::string& group);
Mat extract_eval(const Encoders& enc, const Mat& raw, const std::string& group);

struct AggregateOut {
  Var cls;     // 1 x d_model
  Var tokens;  // M x d_model
};

AggregateOut slide_aggregate(Tape& t, Encoders& enc, Var features);
struct AggregateValue {
  Eigen::RowVectorXd cls;
  Mat tokens;
};
AggregateValue slide_aggregate_eval(const Encoders& enc, const Mat& features);

struct TextInput {
  std::vector<int> ids;               // without the CLS slot
  std::vector<std::uint8_t> keep;     // 0 for pad positions
};

/// Truncates to max_len (random contiguous window when rng is given, prefix
/// otherwise). Pad ids are kept in place and masked.
TextInput prepare_text(const std::vector<int>& tokens, int max_len, int vocab_size, std::mt19937_64* rng = nullptr);

Var text_encode(Tape& t, Encoders& enc, const TextInput& input);
Eigen::RowVectorXd text_encode_eval(const Encoders& enc, const std::vector<int>& tokens);

Var gene_encode(Tape& t, Encoders& enc, const GeneTokens& tokens);
Eigen::RowVectorXd gene_encode_eval(const Encoders& enc, const GeneTokens& tokens);

enum class Head { slide, text, gene, distill };
const char* head_name(Head h);

/// Affine projection; slide/text/gene map d_model -> d_shared, distill maps
/// d_feat -> d_model. Normalisation is left to the consumer.
Var project(Tape& t, Encoders& enc, Var embed, Head head);
Mat project_eval(const Encoders& enc, const Mat& embed, Head head);

/// dst = m * dst + (1 - m) * src for every tensor under src_prefix, matched by
/// suffix under dst_prefix.
void ema_update(ParamStore& params, const std::string& src_prefix, const std::string& dst_prefix, double m);

// ---- frozen tensors ---------------------------------------------------------

/// Records hashes of tensors that must not change and verifies them.
class FrozenGuard {
 public:
  FrozenGuard(const ParamStore& params, std::vector<std::string> prefixes);
  /// Throws FrozenParameterError naming the first modified group.
  void verify(const ParamStore& params) const;

 private:
  std::vector<std::pair<std::string, std::uint64_t>> hashes_;
};

// ---- checkpoints ------------------------------------------------------------

/// Binary container: "MSCK" | u32 version | u64 json length | json config |
/// u32 tensor count | per tensor: u32 name length, name, u8 frozen, u32 rows,
/// u32 cols, float64 LE column-major data.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const nlohmann::json& meta);
std::pair<ParamStore, nlohmann::json> load_checkpoint(const std::filesystem::path& path);

void save_encoders(const std::filesystem::path& path, const Encoders& enc, nlohmann::json extra = {});
Encoders load_encoders(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace mstar::encoders
