// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer helpers shared by the encoders and the MIL heads. Parameters are
// registered under dotted names ("agg.blocks.0.attn.qkv.w") so checkpoints
// and the `describe` subcommand can list them.

#pragma once

#include "mstar/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace mstar::nn {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

/// Gaussian init with std 1/sqrt(fan_in) for weights, zero bias.
void add_linear(ParamStore& ps, const std::string& name, int in, int out, std::mt19937_64& rng,
                bool frozen = false);
void add_layer_norm(ParamStore& ps, const std::string& name, int dim);
void add_transformer_block(ParamStore& ps, const std::string& name, int dim, int mlp_hidden,
                           std::mt19937_64& rng);
Mat normal_matrix(int rows, int cols, double stddev, std::mt19937_64& rng);

Var linear(Tape& t, Var x, ParamStore& ps, const std::string& name);
Var layer_norm(Tape& t, Var x, ParamStore& ps, const std::string& name);

/// Dropout mask applied when rng != nullptr and p > 0 (inverted scaling).
Var dropout(Var x, double p, std::mt19937_64* rng);

/// Pre-norm block: x + MHA(LN(x)); x + MLP(LN(x)). key_keep masks keys.
Var transformer_block(Tape& t, Var x, ParamStore& ps, const std::string& name, int heads,
                      const std::vector<std::uint8_t>& key_keep = {}, double dropout_p = 0.0,
                      std::mt19937_64* rng = nullptr);

/// Adam; weight decay is added to the gradient (torch.optim.Adam semantics).
/// The learning rate is supplied per step so schedules stay outside.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  /// Updates every non-frozen parameter whose name starts with one of
  /// `prefixes` (all when empty) using its accumulated grad.
  void step(ParamStore& ps, double lr, const std::vector<std::string>& prefixes = {});
  long steps() const { return t_; }

 private:
  Options opt_;
  long t_ = 0;
  std::unordered_map<std::string, std::pair<Mat, Mat>> moments_;
};

/// Linear ramp to base_lr over the first warmup_steps, then cosine decay to 0
/// over the remaining steps.
double cosine_lr(double base_lr, long step, long total_steps, long warmup_steps = 0);

/// Derives an independent stream seed from (master, index).
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index);

}  // namespace mstar::nn
