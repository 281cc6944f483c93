// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-based reverse-mode automatic differentiation over dense
// Eigen matrices. Every value on the tape is a 2-D double matrix; scalars are
// 1x1. Parameters live in a ParamStore and are referenced (not copied) by the
// tape, so a forward pass never duplicates weights.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace mstar::ad {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;
using Vec = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  bool frozen = false;
};

/// Ordered, name-addressable collection of parameters. Pointers returned by
/// add()/at() stay valid for the lifetime of the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter& add(const std::string& name, Mat init, bool frozen = false);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void erase_prefix(const std::string& prefix);

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> with_prefix(const std::string& prefix);

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// FNV-1a over the raw bytes of every tensor whose name starts with `prefix`.
std::uint64_t hash_params(const ParamStore& store, const std::string& prefix = "");
std::uint64_t hash_matrix(const Mat& m, std::uint64_t seed = 0xcbf29ce484222325ULL);

class Tape;

class Var {
 public:
  Var() = default;
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Mat& grad)>;

  Tape() = default;
  /// With grad disabled, parameters and leaves enter as constants and no
  /// backward closures are recorded.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives gradient.
  Var constant(Mat v);
  /// Value whose gradient is retained and readable via grad() after backward.
  Var leaf(Mat v);
  /// Reference to a parameter; one node per parameter per tape. Frozen
  /// parameters enter as constants.
  Var param(Parameter& p);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output.
  void backward(Var out);
  /// Seeds with an explicit upstream gradient of out's shape.
  void backward(Var out, const Mat& seed);

  const Mat& grad(Var v) const;
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  void accum(int id, const Mat& g);

  const Mat& value(int id) const;
  std::size_t size() const { return nodes_.size(); }

  Var push(Mat value, std::initializer_list<Var> parents, BackwardFn fn);
  Var push(Mat value, const std::vector<Var>& parents, BackwardFn fn);

 private:
  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    Mat grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  bool grad_enabled_ = true;
};

// ---- elementwise / structural -------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                 // Hadamard
Var scale(Var a, double s);
Var scale_by(Var a, Var s);            // s is 1x1
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);           // broadcast 1xk row over a (n x k)
Var mul_const(Var a, const Mat& c);    // Hadamard with a constant mask
Var neg(Var a);

Var relu(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);                        // caller guarantees positivity
Var abs(Var a);                        // subgradient 0 at 0
Var sqrt(Var a);

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);           // a * b^T
Var transpose(Var a);

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var table, const std::vector<int>& ids);
Var pick(Var a, const std::vector<std::pair<int, int>>& coords);  // k x 1

Var sum(Var a);
Var mean(Var a);
Var sum_rows(Var a);                   // 1 x k column sums
Var mean_rows(Var a);                  // 1 x k column means
Var row_sums(Var a);                   // n x 1

// ---- normalisation / attention ------------------------------------------

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var row_l2_normalize(Var a, double eps = 1e-12);
Var row_norms(Var a);                  // n x 1, gradient 0 at the origin

/// Multi-head scaled dot-product attention. q: n x d, k/v: m x d; d divisible
/// by heads. key_keep (size m) masks keys with 0; empty means keep all.
Var multihead_attention(Var q, Var k, Var v, int heads,
                        const std::vector<std::uint8_t>& key_keep = {});

// ---- losses ---------------------------------------------------------------

/// Mean cross-entropy of row-wise logits against integer targets.
Var cross_entropy(Var logits, const std::vector<int>& targets);

}  // namespace mstar::ad
