// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mstar::nn {

Mat normal_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n(rng);
  }
  return m;
}

void add_linear(ParamStore& ps, const std::string& name, int in, int out, std::mt19937_64& rng,
                bool frozen) {
  ps.add(name + ".w", normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng), frozen);
  ps.add(name + ".b", Mat::Zero(1, out), frozen);
}

void add_layer_norm(ParamStore& ps, const std::string& name, int dim) {
  ps.add(name + ".g", Mat::Ones(1, dim));
  ps.add(name + ".b", Mat::Zero(1, dim));
}

void add_transformer_block(ParamStore& ps, const std::string& name, int dim, int mlp_hidden,
                           std::mt19937_64& rng) {
  add_layer_norm(ps, name + ".ln1", dim);
  add_linear(ps, name + ".attn.qkv", dim, 3 * dim, rng);
  add_linear(ps, name + ".attn.out", dim, dim, rng);
  add_layer_norm(ps, name + ".ln2", dim);
  add_linear(ps, name + ".mlp.fc1", dim, mlp_hidden, rng);
  add_linear(ps, name + ".mlp.fc2", mlp_hidden, dim, rng);
}

Var linear(Tape& t, Var x, ParamStore& ps, const std::string& name) {
  return ad::add_row(ad::matmul(x, t.param(ps.at(name + ".w"))), t.param(ps.at(name + ".b")));
}

Var layer_norm(Tape& t, Var x, ParamStore& ps, const std::string& name) {
  return ad::layer_norm(x, t.param(ps.at(name + ".g")), t.param(ps.at(name + ".b")));
}

Var dropout(Var x, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Mat mask(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < mask.cols(); ++j) {
    for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = keep(*rng) ? 1.0 / (1.0 - p) : 0.0;
  }
  return ad::mul_const(x, mask);
}

Var transformer_block(Tape& t, Var x, ParamStore& ps, const std::string& name, int heads,
                      const std::vector<std::uint8_t>& key_keep, double dropout_p,
                      std::mt19937_64* rng) {
  const Eigen::Index d = x.cols();
  Var h = layer_norm(t, x, ps, name + ".ln1");
  Var qkv = linear(t, h, ps, name + ".attn.qkv");
  Var att = ad::multihead_attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d),
                                    ad::slice_cols(qkv, 2 * d, d), heads, key_keep);
  att = dropout(linear(t, att, ps, name + ".attn.out"), dropout_p, rng);
  x = ad::add(x, att);
  h = layer_norm(t, x, ps, name + ".ln2");
  h = ad::gelu(linear(t, h, ps, name + ".mlp.fc1"));
  h = dropout(linear(t, h, ps, name + ".mlp.fc2"), dropout_p, rng);
  return ad::add(x, h);
}

void Adam::step(ParamStore& ps, double lr, const std::vector<std::string>& prefixes) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (ad::Parameter* p : ps.all()) {
    if (p->frozen) continue;
    if (!prefixes.empty()) {
      bool match = false;
      for (const auto& pre : prefixes) match = match || p->name.rfind(pre, 0) == 0;
      if (!match) continue;
    }
    auto [it, inserted] = moments_.try_emplace(p->name);
    auto& [m, v] = it->second;
    if (inserted) {
      m = Mat::Zero(p->value.rows(), p->value.cols());
      v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    Mat g = p->grad;
    if (opt_.weight_decay > 0) g += opt_.weight_decay * p->value;
    m = opt_.beta1 * m + (1.0 - opt_.beta1) * g;
    v = opt_.beta2 * v + (1.0 - opt_.beta2) * g.cwiseAbs2();
    p->value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt_.eps);
  }
}

double cosine_lr(double base_lr, long step, long total_steps, long warmup_steps) {
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  step -= warmup_steps;
  total_steps -= warmup_steps;
  if (total_steps <= 1) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 finaliser over the combined value
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mstar::nn
