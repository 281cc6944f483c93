// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/encoders.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace mstar::encoders {

using nlohmann::json;

// ---- config -----------------------------------------------------------------

EncoderConfig EncoderConfig::published_preset() {
  EncoderConfig c;
  c.d_raw = 768;
  c.base_hidden = 1024;
  c.d_feat = 1024;
  c.d_model = 512;
  c.d_shared = 512;
  c.d_gene = 200;
  c.n_genes = 17425;
  c.max_len = 512;
  c.vocab_size = 28996;
  c.heads = 8;
  c.gene_heads = 8;
  return c;
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& w) { throw DataError("invalid EncoderConfig: " + w); };
  for (int v : {d_raw, base_hidden, d_feat, d_model, d_shared, d_gene, n_genes, vocab_size, max_len, heads,
                gene_heads, layers, mlp_ratio}) {
    if (v < 1) fail("all sizes must be >= 1");
  }
  if (n_bins < 2) fail("n_bins must be >= 2 (bin 0 is reserved for zero expression)");
  if (d_model % heads != 0) fail("d_model must be divisible by heads");
  if (d_gene % gene_heads != 0) fail("d_gene must be divisible by gene_heads");
  if (!(tau_init > 0) || !(max_logit_scale > 0)) fail("temperature settings must be positive");
}

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"d_raw", c.d_raw},         {"base_hidden", c.base_hidden}, {"d_feat", c.d_feat},
           {"d_model", c.d_model},     {"d_shared", c.d_shared},       {"d_gene", c.d_gene},
           {"n_genes", c.n_genes},     {"n_bins", c.n_bins},           {"vocab_size", c.vocab_size},
           {"max_len", c.max_len},     {"heads", c.heads},             {"gene_heads", c.gene_heads},
           {"layers", c.layers},       {"mlp_ratio", c.mlp_ratio},     {"agg_positional", c.agg_positional},
           {"tau_init", c.tau_init},   {"learn_tau", c.learn_tau},     {"max_logit_scale", c.max_logit_scale},
           {"seed", c.seed}};
}

void from_json(const json& j, EncoderConfig& c) {
  EncoderConfig d;
  if (j.value("preset", std::string()) == "published") d = EncoderConfig::published_preset();
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("d_raw", d.d_raw);
  get("base_hidden", d.base_hidden);
  get("d_feat", d.d_feat);
  get("d_model", d.d_model);
  get("d_shared", d.d_shared);
  get("d_gene", d.d_gene);
  get("n_genes", d.n_genes);
  get("n_bins", d.n_bins);
  get("vocab_size", d.vocab_size);
  get("max_len", d.max_len);
  get("heads", d.heads);
  get("gene_heads", d.gene_heads);
  get("layers", d.layers);
  get("mlp_ratio", d.mlp_ratio);
  get("agg_positional", d.agg_positional);
  get("tau_init", d.tau_init);
  get("learn_tau", d.learn_tau);
  get("max_logit_scale", d.max_logit_scale);
  get("seed", d.seed);
  c = d;
}

// ---- gene tokens --------------------------------------------------------------

GeneBinning fit_gene_binning(const corpus::Cohort& cohort, const std::vector<std::size_t>& cases, int n_bins) {
  GeneBinning b;
  b.n_bins = n_bins;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i : cases) {
    const auto& c = cohort.cases[i];
    if (!c.has_gene) continue;
    for (Eigen::Index g = 0; g < c.gene_expr.size(); ++g) {
      const double e = c.gene_expr.data()[g];
      if (e > 0) {
        const double v = std::log1p(e);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (std::isfinite(lo)) {
    b.lo = lo;
    b.hi = hi;
  }
  return b;
}

namespace {

template <typename T>
GeneTokens tokenize_impl(std::span<const T> expr, const GeneBinning& b) {
  GeneTokens out;
  out.bins.reserve(expr.size());
  const double width = b.hi - b.lo;
  for (T raw : expr) {
    const double e = static_cast<double>(raw);
    if (!(e >= 0)) throw DataError("gene_tokenize: negative or non-finite expression value");
    if (e == 0) {
      out.bins.push_back(0);
      continue;
    }
    const double v = std::log1p(e);
    int bin = 1;
    if (width > 0) {
      const double pos = std::floor((v - b.lo) / width * (b.n_bins - 1));
      bin = 1 + static_cast<int>(std::clamp(pos, 0.0, static_cast<double>(b.n_bins - 2)));
    }
    out.bins.push_back(bin);
  }
  return out;
}

}  // namespace

GeneTokens gene_tokenize(std::span<const float> expr, const GeneBinning& b) { return tokenize_impl(expr, b); }
GeneTokens gene_tokenize(std::span<const double> expr, const GeneBinning& b) { return tokenize_impl(expr, b); }

// ---- Encoders -------------------------------------------------------------------

namespace {

void add_extractor(ParamStore& ps, const std::string& group, const EncoderConfig& c, std::mt19937_64& rng,
                   bool frozen) {
  nn::add_linear(ps, group + ".fc1", c.d_raw, c.base_hidden, rng, frozen);
  nn::add_linear(ps, group + ".fc2", c.base_hidden, c.d_feat, rng, frozen);
}

}  // namespace

Encoders::Encoders(EncoderConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& c = cfg_;
  auto stream = [&](std::uint64_t k) { return std::mt19937_64(nn::mix_seed(c.seed, k)); };

  {
    auto rng = stream(1);
    add_extractor(params_, "base", c, rng, true);
    // base biases get a small random offset so zero input is informative about it
    for (auto* p : params_.with_prefix("base.")) {
      if (p->name.ends_with(".b")) p->value = nn::normal_matrix(1, static_cast<int>(p->value.cols()), 0.1, rng);
    }
  }
  for (auto* p : std::vector<ad::Parameter*>(params_.with_prefix("base."))) {
    const std::string suffix = p->name.substr(5);
    Mat v = p->value;
    params_.add("student." + suffix, v);
    params_.add("ema." + suffix, v, true);
  }
  {
    auto rng = stream(2);
    nn::add_linear(params_, "agg.in", c.d_feat, c.d_model, rng);
    params_.add("agg.cls", nn::normal_matrix(1, c.d_model, 0.02, rng));
    for (int l = 0; l < c.layers; ++l) {
      nn::add_transformer_block(params_, "agg.blocks." + std::to_string(l), c.d_model, c.mlp_ratio * c.d_model, rng);
    }
    nn::add_layer_norm(params_, "agg.ln_f", c.d_model);
    nn::add_linear(params_, "agg.head", c.d_model, c.d_model, rng);
  }
  {
    auto rng = stream(3);
    params_.add("text.tok_emb", nn::normal_matrix(c.vocab_size, c.d_model, 0.1, rng));
    params_.add("text.pos_emb", nn::normal_matrix(c.max_len + 1, c.d_model, 0.02, rng));
    params_.add("text.cls", nn::normal_matrix(1, c.d_model, 0.02, rng));
    for (int l = 0; l < c.layers; ++l) {
      nn::add_transformer_block(params_, "text.blocks." + std::to_string(l), c.d_model, c.mlp_ratio * c.d_model, rng);
    }
    nn::add_layer_norm(params_, "text.ln_f", c.d_model);
  }
  {
    auto rng = stream(4);
    params_.add("gene.id_emb", nn::normal_matrix(c.n_genes, c.d_gene, 1.0 / std::sqrt(c.d_gene), rng), true);
    params_.add("gene.bin_emb", nn::normal_matrix(c.n_bins, c.d_gene, 0.1, rng));
    params_.add("gene.cls", nn::normal_matrix(1, c.d_gene, 0.02, rng));
    for (int l = 0; l < c.layers; ++l) {
      nn::add_transformer_block(params_, "gene.blocks." + std::to_string(l), c.d_gene, c.mlp_ratio * c.d_gene, rng);
    }
    nn::add_layer_norm(params_, "gene.ln_f", c.d_gene);
    nn::add_linear(params_, "gene.out", c.d_gene, c.d_model, rng);
  }
  {
    auto rng = stream(5);
    nn::add_linear(params_, "proj.slide", c.d_model, c.d_shared, rng);
    nn::add_linear(params_, "proj.text", c.d_model, c.d_shared, rng);
    nn::add_linear(params_, "proj.gene", c.d_model, c.d_shared, rng);
  }
  {
    auto rng = stream(6);
    nn::add_linear(params_, "proj.distill", c.d_feat, c.d_model, rng);
  }
  params_.add("logit_scale", Mat::Constant(1, 1, std::log(1.0 / c.tau_init)), !c.learn_tau);
  binning_.n_bins = c.n_bins;
}

Encoders::Encoders(EncoderConfig cfg, ParamStore params, GeneBinning binning)
    : cfg_(cfg), params_(std::move(params)), binning_(binning) {
  cfg_.validate();
}

void Encoders::copy_group(const ParamStore& other, const std::string& prefix) {
  for (const ad::Parameter* src : other.all()) {
    if (src->name.rfind(prefix, 0) != 0) continue;
    ad::Parameter& dst = params_.at(src->name);
    if (dst.value.rows() != src->value.rows() || dst.value.cols() != src->value.cols()) {
      throw DataError("copy_group: shape mismatch for " + src->name);
    }
    dst.value = src->value;
  }
}

void Encoders::reset_student_from_base() {
  for (const ad::Parameter* p : params_.all()) {
    if (p->name.rfind("base.", 0) != 0) continue;
    const std::string suffix = p->name.substr(5);
    params_.at("student." + suffix).value = p->value;
    params_.at("ema." + suffix).value = p->value;
  }
}

double Encoders::logit_scale() const { return params_.at("logit_scale").value(0, 0); }

// ---- forwards -------------------------------------------------------------------

Mat base_extract(const Encoders& enc, const Mat& raw) { return extract_eval(enc, raw, "base"); }

Var extract(Tape& t, Encoders& enc, Var raw, const std::string& group) {
  if (raw.cols() != enc.config().d_raw) throw DataError("extract: raw patch width mismatch");
  Var h = ad::relu(nn::linear(t, raw, enc.params(), group + ".fc1"));
  return nn::linear(t, h, enc.params(), group + ".fc2");
}

Mat extract_eval(const Encoders& enc, const Mat& raw, const std::string& group) {
  if (raw.cols() != enc.config().d_raw) throw DataError("extract: raw patch width mismatch");
  const auto& ps = enc.params();
  Mat h = raw * ps.at(group + ".fc1.w").value;
  h.rowwise() += ps.at(group + ".fc1.b").value.row(0);
  h = h.cwiseMax(0.0);
  Mat out = h * ps.at(group + ".fc2.w").value;
  out.rowwise() += ps.at(group + ".fc2.b").value.row(0);
  return out;
}

namespace {

Mat sinusoidal(Eigen::Index rows, Eigen::Index dim) {
  Mat pe(rows, dim);
  for (Eigen::Index p = 0; p < rows; ++p) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe(p, i) = i % 2 == 0 ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
    }
  }
  return pe;
}

}  // namespace

AggregateOut slide_aggregate(Tape& t, Encoders& enc, Var features) {
  const auto& c = enc.config();
  if (features.cols() != c.d_feat) {
    throw DataError("slide_aggregate: feature width " + std::to_string(features.cols()) + " != d_feat " +
                    std::to_string(c.d_feat));
  }
  if (features.rows() < 1) throw DataError("slide_aggregate: empty bag");
  auto& ps = enc.params();
  Var x = nn::linear(t, features, ps, "agg.in");
  if (c.agg_positional) x = ad::add(x, t.constant(sinusoidal(x.rows(), x.cols())));
  x = ad::concat_rows({t.param(ps.at("agg.cls")), x});
  for (int l = 0; l < c.layers; ++l) x = nn::transformer_block(t, x, ps, "agg.blocks." + std::to_string(l), c.heads);
  x = nn::linear(t, nn::layer_norm(t, x, ps, "agg.ln_f"), ps, "agg.head");
  return {ad::slice_rows(x, 0, 1), ad::slice_rows(x, 1, x.rows() - 1)};
}

AggregateValue slide_aggregate_eval(const Encoders& enc, const Mat& features) {
  Tape t(false);
  auto out = slide_aggregate(t, const_cast<Encoders&>(enc), t.constant(features));
  return {out.cls.value().row(0), out.tokens.value()};
}

TextInput prepare_text(const std::vector<int>& tokens, int max_len, int vocab_size, std::mt19937_64* rng) {
  for (int id : tokens) {
    if (id < 0 || id >= vocab_size) throw DataError("text token id " + std::to_string(id) + " outside vocabulary");
  }
  std::size_t start = 0, len = tokens.size();
  if (len > static_cast<std::size_t>(max_len)) {
    if (rng != nullptr) {
      start = std::uniform_int_distribution<std::size_t>(0, len - static_cast<std::size_t>(max_len))(*rng);
    }
    len = static_cast<std::size_t>(max_len);
  }
  TextInput in;
  in.ids.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
  in.keep.reserve(in.ids.size());
  for (int id : in.ids) in.keep.push_back(id != corpus::TokenLayout::kPad);
  return in;
}

Var text_encode(Tape& t, Encoders& enc, const TextInput& input) {
  const auto& c = enc.config();
  auto& ps = enc.params();
  const auto n = static_cast<Eigen::Index>(input.ids.size());
  if (n > c.max_len) throw DataError("text_encode: sequence longer than max_len");
  std::vector<int> positions(static_cast<std::size_t>(n) + 1);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  Var x = t.param(ps.at("text.cls"));
  if (n > 0) x = ad::concat_rows({x, ad::gather_rows(t.param(ps.at("text.tok_emb")), input.ids)});
  x = ad::add(x, ad::gather_rows(t.param(ps.at("text.pos_emb")), positions));
  std::vector<std::uint8_t> keep;
  keep.reserve(positions.size());
  keep.push_back(1);
  keep.insert(keep.end(), input.keep.begin(), input.keep.end());
  for (int l = 0; l < c.layers; ++l) {
    x = nn::transformer_block(t, x, ps, "text.blocks." + std::to_string(l), c.heads, keep);
  }
  return ad::slice_rows(nn::layer_norm(t, x, ps, "text.ln_f"), 0, 1);
}

Eigen::RowVectorXd text_encode_eval(const Encoders& enc, const std::vector<int>& tokens) {
  Tape t(false);
  const auto in = prepare_text(tokens, enc.config().max_len, enc.config().vocab_size);
  return text_encode(t, const_cast<Encoders&>(enc), in).value().row(0);
}

Var gene_encode(Tape& t, Encoders& enc, const GeneTokens& tokens) {
  const auto& c = enc.config();
  auto& ps = enc.params();
  if (static_cast<int>(tokens.bins.size()) != c.n_genes) {
    throw DataError("gene_encode: expected " + std::to_string(c.n_genes) + " genes, got " +
                    std::to_string(tokens.bins.size()));
  }
  for (int b : tokens.bins) {
    if (b < 0 || b >= c.n_bins) throw DataError("gene_encode: bin index out of range");
  }
  Var emb = ad::add(t.param(ps.at("gene.id_emb")), ad::gather_rows(t.param(ps.at("gene.bin_emb")), tokens.bins));
  Var x = ad::concat_rows({t.param(ps.at("gene.cls")), emb});
  for (int l = 0; l < c.layers; ++l) x = nn::transformer_block(t, x, ps, "gene.blocks." + std::to_string(l), c.gene_heads);
  Var cls = ad::slice_rows(nn::layer_norm(t, x, ps, "gene.ln_f"), 0, 1);
  return nn::linear(t, cls, ps, "gene.out");
}

Eigen::RowVectorXd gene_encode_eval(const Encoders& enc, const GeneTokens& tokens) {
  Tape t(false);
  return gene_encode(t, const_cast<Encoders&>(enc), tokens).value().row(0);
}

const char* head_name(Head h) {
  switch (h) {
    case Head::slide: return "slide";
    case Head::text: return "text";
    case Head::gene: return "gene";
    case Head::distill: return "distill";
  }
  return "?";
}

Var project(Tape& t, Encoders& enc, Var embed, Head head) {
  return nn::linear(t, embed, enc.params(), std::string("proj.") + head_name(head));
}

Mat project_eval(const Encoders& enc, const Mat& embed, Head head) {
  const std::string name = std::string("proj.") + head_name(head);
  const auto& w = enc.params().at(name + ".w").value;
  if (embed.cols() != w.rows()) throw DataError("project: input width mismatch for head " + name);
  Mat out = embed * w;
  out.rowwise() += enc.params().at(name + ".b").value.row(0);
  return out;
}

void ema_update(ParamStore& params, const std::string& src_prefix, const std::string& dst_prefix, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw DataError("ema_update: decay must lie in [0, 1]");
  for (ad::Parameter* src : params.with_prefix(src_prefix)) {
    ad::Parameter& dst = params.at(dst_prefix + src->name.substr(src_prefix.size()));
    if (dst.value.rows() != src->value.rows() || dst.value.cols() != src->value.cols()) {
      throw DataError("ema_update: shape mismatch for " + dst.name);
    }
    dst.value = m * dst.value + (1.0 - m) * src->value;
  }
}

// ---- frozen guard -----------------------------------------------------------------

FrozenGuard::FrozenGuard(const ParamStore& params, std::vector<std::string> prefixes) {
  for (auto& p : prefixes) hashes_.emplace_back(p, ad::hash_params(params, p));
}

void FrozenGuard::verify(const ParamStore& params) const {
  for (const auto& [prefix, h] : hashes_) {
    if (ad::hash_params(params, prefix) != h) throw FrozenParameterError("frozen tensors modified: " + prefix + "*");
  }
}

// ---- checkpoints -------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'S', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& origin) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw FormatError(FormatErrc::truncated, origin + ": truncated checkpoint");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const json& meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(kCkptMagic, 4);
  put<std::uint32_t>(out, kCkptVersion);
  const std::string text = meta.dump();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const ad::Parameter* p : params.all()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint8_t>(out, p->frozen ? 1 : 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) put<double>(out, p->value.data()[i]);
  }
  if (!out) throw DataError("write failed: " + path.string());
}

std::pair<ParamStore, json> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::missing_file, "cannot open checkpoint: " + path.string());
  const std::string origin = path.string();
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError(FormatErrc::truncated, origin + ": truncated checkpoint");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw FormatError(FormatErrc::bad_magic, origin + ": not a checkpoint");
  if (get<std::uint32_t>(in, origin) != kCkptVersion) {
    throw FormatError(FormatErrc::bad_version, origin + ": unsupported checkpoint version");
  }
  const auto meta_len = get<std::uint64_t>(in, origin);
  std::string text(meta_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(meta_len))) {
    throw FormatError(FormatErrc::truncated, origin + ": truncated checkpoint metadata");
  }
  json meta = json::parse(text);
  ParamStore ps;
  const auto count = get<std::uint32_t>(in, origin);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = get<std::uint32_t>(in, origin);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError(FormatErrc::truncated, origin + ": truncated tensor name");
    const bool frozen = get<std::uint8_t>(in, origin) != 0;
    const auto rows = get<std::uint32_t>(in, origin);
    const auto cols = get<std::uint32_t>(in, origin);
    Mat v(rows, cols);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = get<double>(in, origin);
    ps.add(name, std::move(v), frozen);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatErrc::trailing_bytes, origin + ": trailing bytes after checkpoint");
  }
  return {std::move(ps), std::move(meta)};
}

void save_encoders(const std::filesystem::path& path, const Encoders& enc, json extra) {
  json meta{{"kind", "mstar-encoders"},
            {"config", enc.config()},
            {"binning", {{"lo", enc.binning().lo}, {"hi", enc.binning().hi}, {"n_bins", enc.binning().n_bins}}},
            {"extra", std::move(extra)}};
  save_checkpoint(path, enc.params(), meta);
}

Encoders load_encoders(const std::filesystem::path& path, json* extra) {
  auto [ps, meta] = load_checkpoint(path);
  if (meta.value("kind", std::string()) != "mstar-encoders") throw DataError(path.string() + ": not an encoder checkpoint");
  EncoderConfig cfg = meta.at("config").get<EncoderConfig>();
  GeneBinning b;
  b.lo = meta.at("binning").at("lo").get<double>();
  b.hi = meta.at("binning").at("hi").get<double>();
  b.n_bins = meta.at("binning").at("n_bins").get<int>();
  if (extra) *extra = meta.value("extra", json());
  // Fresh instance provides the expected tensor set; the file must cover it.
  Encoders reference(cfg);
  for (const ad::Parameter* p : reference.params().all()) {
    if (!ps.contains(p->name)) throw FormatError(FormatErrc::manifest_mismatch, path.string() + ": missing tensor " + p->name);
    const auto& v = ps.at(p->name).value;
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
      throw FormatError(FormatErrc::manifest_mismatch, path.string() + ": shape mismatch for " + p->name);
    }
  }
  return Encoders(cfg, std::move(ps), b);
}

}  // namespace mstar::encoders
