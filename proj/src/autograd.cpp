// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/autograd.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace mstar::ad {

// ---- ParamStore -----------------------------------------------------------

ParamStore::ParamStore(const ParamStore& other) { *this = other; }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) {
    params_.push_back(std::make_unique<Parameter>(*p));
    index_[p->name] = params_.size() - 1;
  }
  return *this;
}

Parameter& ParamStore::add(const std::string& name, Mat init, bool frozen) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Mat::Zero(init.rows(), init.cols());
  p->value = std::move(init);
  p->frozen = frozen;
  params_.push_back(std::move(p));
  index_[name] = params_.size() - 1;
  return *params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return *params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return *params_[it->second];
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

void ParamStore::erase_prefix(const std::string& prefix) {
  std::vector<std::unique_ptr<Parameter>> kept;
  for (auto& p : params_) {
    if (p->name.rfind(prefix, 0) != 0) kept.push_back(std::move(p));
  }
  params_ = std::move(kept);
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i]->name] = i;
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParamStore::with_prefix(const std::string& prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero(p->value.rows(), p->value.cols());
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t h) {
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  mix(shape, sizeof(shape));
  mix(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  return h;
}

std::uint64_t hash_params(const ParamStore& store, const std::string& prefix) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : store.all()) {
    if (p->name.rfind(prefix, 0) != 0) continue;
    for (char c : p->name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    h = hash_matrix(p->value, h);
  }
  return h;
}

// ---- Tape -----------------------------------------------------------------

const Mat& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar on non-scalar");
  return v(0, 0);
}

const Mat& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref ? *n.ref : n.value;
}

Var Tape::constant(Mat v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Mat v) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.ref = &p.value;
  n.needs_grad = grad_enabled_ && !p.frozen;
  n.param = &p;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_[&p] = id;
  return Var(this, id);
}

Var Tape::push(Mat value, std::initializer_list<Var> parents, BackwardFn fn) {
  return push(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Tape::push(Mat value, const std::vector<Var>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error("mixing tapes");
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accum(int id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Mat& Tape::grad(Var v) const {
  static const Mat empty;
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  return n.grad.size() ? n.grad : empty;
}

void Tape::backward(Var out) {
  if (out.value().size() != 1) throw std::logic_error("backward() needs a scalar output");
  backward(out, Mat::Ones(1, 1));
}

void Tape::backward(Var out, const Mat& seed) {
  if (seed.rows() != out.rows() || seed.cols() != out.cols()) {
    throw std::logic_error("backward seed shape mismatch");
  }
  accum(out.id(), seed);
  for (int i = out.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      n.param->grad += n.grad;
    }
  }
}

// ---- ops ------------------------------------------------------------------

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Mat& g) {
    t.accum(ia, g);
    t.accum(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Mat& g) {
    t.accum(ia, g);
    if (t.needs_grad(ib)) t.accum(ib, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accum(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accum(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  int ia = a.id();
  return t.push(a.value() * s, {a}, [ia, s](Tape& t, const Mat& g) { t.accum(ia, g * s); });
}

Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw std::invalid_argument("scale_by: scale must be 1x1");
  Tape& t = *a.tape();
  int ia = a.id(), is = s.id();
  return t.push(a.value() * s.scalar(), {a, s}, [ia, is](Tape& t, const Mat& g) {
    const double sv = t.value(is)(0, 0);
    if (t.needs_grad(ia)) t.accum(ia, g * sv);
    if (t.needs_grad(is)) t.accum(is, Mat::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape();
  int ia = a.id();
  return t.push(a.value().array() + s, {a}, [ia](Tape& t, const Mat& g) { t.accum(ia, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Tape& t = *a.tape();
  int ia = a.id(), ir = row.id();
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), {a, row}, [ia, ir](Tape& t, const Mat& g) {
    t.accum(ia, g);
    if (t.needs_grad(ir)) t.accum(ir, g.colwise().sum());
  });
}

Var mul_const(Var a, const Mat& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tape& t = *a.tape();
  int ia = a.id();
  return t.push(a.value().cwiseProduct(c), {a}, [ia, c](Tape& t, const Mat& g) {
    t.accum(ia, g.cwiseProduct(c));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().cwiseMax(0.0);
  return t.push(std::move(out), {a}, [ia](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    t.accum(ia, (x.array() > 0.0).select(g, 0.0));
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat out = a.value().unaryExpr([inv_sqrt2](double x) {
    return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  });
  return t.push(std::move(out), {a}, [ia, inv_sqrt2](Tape& t, const Mat& g) {
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat d = t.value(ia).unaryExpr([&](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    });
    t.accum(ia, g.cwiseProduct(d));
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().array().tanh();
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    t.accum(ia, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    t.accum(ia, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var exp(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().array().exp();
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    t.accum(ia, g.cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().array().log();
  return t.push(std::move(out), {a}, [ia](Tape& t, const Mat& g) {
    t.accum(ia, g.cwiseQuotient(t.value(ia)));
  });
}

Var abs(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().cwiseAbs();
  return t.push(std::move(out), {a}, [ia](Tape& t, const Mat& g) {
    Mat s = t.value(ia).unaryExpr([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    t.accum(ia, g.cwiseProduct(s));
  });
}

Var sqrt(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().cwiseSqrt();
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    t.accum(ia, (0.5 * g.array() / t.value(self).array()).matrix());
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Mat out = a.value() * b.value();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accum(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accum(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Tape& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Mat out = a.value() * b.value().transpose();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accum(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accum(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  return t.push(a.value().transpose(), {a}, [ia](Tape& t, const Mat& g) { t.accum(ia, g.transpose()); });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Tape& t = *a.tape();
  int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(a.value().middleRows(start, count), {a},
                [ia, start, count, rows, cols](Tape& t, const Mat& g) {
                  Mat full = Mat::Zero(rows, cols);
                  full.middleRows(start, count) = g;
                  t.accum(ia, full);
                });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Tape& t = *a.tape();
  int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(a.value().middleCols(start, count), {a},
                [ia, start, count, rows, cols](Tape& t, const Mat& g) {
                  Mat full = Mat::Zero(rows, cols);
                  full.middleCols(start, count) = g;
                  t.accum(ia, full);
                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape& t = *parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return t.push(std::move(out), parts, [spans](Tape& t, const Mat& g) {
    for (const auto& [id, offset] : spans) {
      if (t.needs_grad(id)) t.accum(id, g.middleRows(offset, t.value(id).rows()));
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = *parts.front().tape();
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return t.push(std::move(out), parts, [spans](Tape& t, const Mat& g) {
    for (const auto& [id, offset] : spans) {
      if (t.needs_grad(id)) t.accum(id, g.middleCols(offset, t.value(id).cols()));
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape();
  const Mat& tv = table.value();
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  int it = table.id();
  const Eigen::Index rows = tv.rows(), cols = tv.cols();
  return t.push(std::move(out), {table}, [it, ids, rows, cols](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(rows, cols);
    for (std::size_t i = 0; i < ids.size(); ++i) full.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accum(it, full);
  });
}

Var pick(Var a, const std::vector<std::pair<int, int>>& coords) {
  Tape& t = *a.tape();
  const Mat& av = a.value();
  Mat out(static_cast<Eigen::Index>(coords.size()), 1);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    out(static_cast<Eigen::Index>(i), 0) = av(coords[i].first, coords[i].second);
  }
  int ia = a.id();
  const Eigen::Index rows = av.rows(), cols = av.cols();
  return t.push(std::move(out), {a}, [ia, coords, rows, cols](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(rows, cols);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      full(coords[i].first, coords[i].second) += g(static_cast<Eigen::Index>(i), 0);
    }
    t.accum(ia, full);
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.push(Mat::Constant(1, 1, a.value().sum()), {a}, [ia, rows, cols](Tape& t, const Mat& g) {
    t.accum(ia, Mat::Constant(rows, cols, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean of empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Eigen::Index rows = a.rows();
  return t.push(a.value().colwise().sum(), {a}, [ia, rows](Tape& t, const Mat& g) {
    t.accum(ia, g.replicate(rows, 1));
  });
}

Var mean_rows(Var a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows())); }

Var row_sums(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Eigen::Index cols = a.cols();
  return t.push(a.value().rowwise().sum(), {a}, [ia, cols](Tape& t, const Mat& g) {
    t.accum(ia, g.replicate(1, cols));
  });
}

namespace {

Mat softmax_rows_value(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const int self = static_cast<int>(t.size());
  return t.push(softmax_rows_value(a.value()), {a}, [ia, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    Vec dot = g.cwiseProduct(y).rowwise().sum();
    Mat d = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accum(ia, d);
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    Mat p = t.value(self).array().exp();
    Vec gs = g.rowwise().sum();
    t.accum(ia, g - p.cwiseProduct(gs.replicate(1, g.cols())));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Mat& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  }
  Mat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  Tape& t = *x.tape();
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.push(std::move(out), {x, gamma, beta},
                [ix, ig, ib, xhat, inv_std, d](Tape& t, const Mat& g) {
                  if (t.needs_grad(ig)) t.accum(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs_grad(ib)) t.accum(ib, g.colwise().sum());
                  if (t.needs_grad(ix)) {
                    Mat gx = g.array().rowwise() * t.value(ig).row(0).array();
                    Vec m1 = gx.rowwise().mean();
                    Vec m2 = gx.cwiseProduct(xhat).rowwise().mean();
                    Mat dx = gx - m1.replicate(1, d) - xhat.cwiseProduct(m2.replicate(1, d));
                    dx.array().colwise() *= inv_std.array();
                    t.accum(ix, dx);
                  }
                });
}

Var row_norms(Var a) {
  Tape& t = *a.tape();
  int ia = a.id();
  Mat out = a.value().rowwise().norm();
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    const Mat& nrm = t.value(self);
    Mat d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = nrm(i, 0);
      d.row(i) = n > 0 ? (x.row(i) * (g(i, 0) / n)).eval() : RowVec::Zero(x.cols()).eval();
    }
    t.accum(ia, d);
  });
}

Var row_l2_normalize(Var a, double eps) {
  Tape& t = *a.tape();
  int ia = a.id();
  const Mat& x = a.value();
  Vec nrm = x.rowwise().norm().cwiseMax(eps);
  Mat out = x.array().colwise() / nrm.array();
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), {a}, [ia, self, nrm](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    Vec dot = g.cwiseProduct(y).rowwise().sum();
    Mat d = g - y.cwiseProduct(dot.replicate(1, g.cols()));
    d.array().colwise() /= nrm.array();
    t.accum(ia, d);
  });
}

Var multihead_attention(Var q, Var k, Var v, int heads, const std::vector<std::uint8_t>& key_keep) {
  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();
  const Eigen::Index n = qv.rows(), m = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != m) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (!key_keep.empty() && static_cast<Eigen::Index>(key_keep.size()) != m) {
    throw std::invalid_argument("attention: mask length mismatch");
  }
  const Eigen::Index dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
  Mat out(n, d);
  for (int h = 0; h < heads; ++h) {
    Mat s = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose() * inv_scale;
    if (!key_keep.empty()) {
      for (Eigen::Index j = 0; j < m; ++j) {
        if (!key_keep[static_cast<std::size_t>(j)]) s.col(j).setConstant(-std::numeric_limits<double>::infinity());
      }
    }
    Mat p = softmax_rows_value(s);
    out.middleCols(h * dh, dh) = p * vv.middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  Tape& t = *q.tape();
  int iq = q.id(), ik = k.id(), iv = v.id();
  return t.push(std::move(out), {q, k, v},
                [iq, ik, iv, probs, heads, dh, inv_scale, n, m, d](Tape& t, const Mat& g) {
                  const Mat& qv = t.value(iq);
                  const Mat& kv = t.value(ik);
                  const Mat& vv = t.value(iv);
                  Mat dq = Mat::Zero(n, d), dk = Mat::Zero(m, d), dv = Mat::Zero(m, d);
                  for (int h = 0; h < heads; ++h) {
                    const Mat& p = (*probs)[static_cast<std::size_t>(h)];
                    const auto go = g.middleCols(h * dh, dh);
                    dv.middleCols(h * dh, dh) = p.transpose() * go;
                    Mat dp = go * vv.middleCols(h * dh, dh).transpose();
                    Vec dot = dp.cwiseProduct(p).rowwise().sum();
                    Mat ds = p.cwiseProduct(dp - dot.replicate(1, m)) * inv_scale;
                    dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
                    dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
                  }
                  t.accum(iq, dq);
                  t.accum(ik, dk);
                  t.accum(iv, dv);
                });
}

Var cross_entropy(Var logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: target count mismatch");
  }
  std::vector<std::pair<int, int>> coords;
  coords.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= logits.cols()) throw std::out_of_range("cross_entropy: bad target");
    coords.emplace_back(static_cast<int>(i), targets[i]);
  }
  return neg(mean(pick(log_softmax_rows(logits), coords)));
}

}  // namespace mstar::ad
