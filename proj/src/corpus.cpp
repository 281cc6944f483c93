// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/corpus.hpp"

#include "mstar/errors.hpp"
#include "mstar/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace mstar::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ---------------------------------------------------------------

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid SynthConfig: " + what); };
  if (n_cases < 0) fail("n_cases must be >= 0");
  if (n_cancer_types < 1 || n_cancer_types > TokenLayout::kMaxClasses) fail("n_cancer_types out of [1, 8]");
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (patch_raw_dim < 1) fail("patch_raw_dim must be >= 1");
  if (patches_per_case.first < 1 || patches_per_case.first > patches_per_case.second) {
    fail("patches_per_case must satisfy 1 <= min <= max");
  }
  if (report_len.first < 1 || report_len.first > report_len.second) fail("report_len must satisfy 1 <= min <= max");
  const int content = 2 + tokens_per_latent * latent_dim;
  if (report_len.first < content) fail("report_len.min below the report content length " + std::to_string(content));
  if (vocab_size < TokenLayout::noise_begin(latent_dim)) {
    fail("vocab_size must be >= " + std::to_string(TokenLayout::noise_begin(latent_dim)));
  }
  if (n_genes < 1) fail("n_genes must be >= 1");
  for (double f : {informative_patch_frac, censor_rate, report_dropout, gene_dropout}) {
    if (!(f >= 0.0 && f <= 1.0)) fail("fractions must lie in [0, 1]");
  }
  if (!(noise_sigma >= 0.0) || !(background_sigma >= 0.0) || !(stain_sigma >= 0.0)) fail("sigmas must be >= 0");
  if (!(class_sep >= 0.0)) fail("class_sep must be >= 0");
  if (!(gene_scale > 0.0) || !(gene_floor >= 0.0) || !(median_survival > 0.0)) fail("gene/survival scales");
  if (tokens_per_latent < 1) fail("tokens_per_latent must be >= 1");
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"n_cases", c.n_cases},
           {"n_cancer_types", c.n_cancer_types},
           {"latent_dim", c.latent_dim},
           {"patch_raw_dim", c.patch_raw_dim},
           {"patches_per_case", {c.patches_per_case.first, c.patches_per_case.second}},
           {"report_len", {c.report_len.first, c.report_len.second}},
           {"vocab_size", c.vocab_size},
           {"n_genes", c.n_genes},
           {"informative_patch_frac", c.informative_patch_frac},
           {"noise_sigma", c.noise_sigma},
           {"censor_rate", c.censor_rate},
           {"modality_dropout", {{"report", c.report_dropout}, {"gene", c.gene_dropout}}},
           {"seed", c.seed},
           {"class_sep", c.class_sep},
           {"background_sigma", c.background_sigma},
           {"stain_sigma", c.stain_sigma},
           {"gene_scale", c.gene_scale},
           {"gene_floor", c.gene_floor},
           {"median_survival", c.median_survival},
           {"tokens_per_latent", c.tokens_per_latent},
           {"label_mode", c.label_mode == LabelMode::subtype ? "subtype" : "nearest_mean"}};
}

void from_json(const json& j, SynthConfig& c) {
  SynthConfig d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_cases", d.n_cases);
  get("n_cancer_types", d.n_cancer_types);
  get("latent_dim", d.latent_dim);
  get("patch_raw_dim", d.patch_raw_dim);
  if (j.contains("patches_per_case")) {
    d.patches_per_case = {j.at("patches_per_case").at(0).get<int>(), j.at("patches_per_case").at(1).get<int>()};
  }
  if (j.contains("report_len")) {
    d.report_len = {j.at("report_len").at(0).get<int>(), j.at("report_len").at(1).get<int>()};
  }
  get("vocab_size", d.vocab_size);
  get("n_genes", d.n_genes);
  get("informative_patch_frac", d.informative_patch_frac);
  get("noise_sigma", d.noise_sigma);
  get("censor_rate", d.censor_rate);
  if (j.contains("modality_dropout")) {
    const auto& md = j.at("modality_dropout");
    if (md.contains("report")) md.at("report").get_to(d.report_dropout);
    if (md.contains("gene")) md.at("gene").get_to(d.gene_dropout);
  }
  get("seed", d.seed);
  get("class_sep", d.class_sep);
  get("background_sigma", d.background_sigma);
  get("stain_sigma", d.stain_sigma);
  get("gene_scale", d.gene_scale);
  get("gene_floor", d.gene_floor);
  get("median_survival", d.median_survival);
  get("tokens_per_latent", d.tokens_per_latent);
  if (j.contains("label_mode")) {
    const auto mode = j.at("label_mode").get<std::string>();
    if (mode == "subtype") {
      d.label_mode = LabelMode::subtype;
    } else if (mode == "nearest_mean") {
      d.label_mode = LabelMode::nearest_mean;
    } else {
      throw DataError("unknown label_mode: " + mode);
    }
  }
  c = d;
}

// ---- generator ------------------------------------------------------------

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd gaussian(int rows, int cols, std::mt19937_64& rng, double stddev = 1.0) {
  return nn::normal_matrix(rows, cols, stddev, rng);
}

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

struct Generator {
  MatrixXd class_means;  // C x L
  MatrixXd patch_map;    // d_raw x L
  MatrixXd gene_map;     // G x L
  VectorXd surv_weights; // L
  VectorXd subtype_dir;  // L
};

Generator make_generator(const SynthConfig& cfg) {
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0));
  Generator g;
  const int L = cfg.latent_dim, C = cfg.n_cancer_types;
  // Orthonormal class directions when C <= L so every pair of means sits at
  // exactly class_sep; otherwise random unit directions.
  MatrixXd dirs = gaussian(L, C, rng);
  if (C <= L) {
    Eigen::HouseholderQR<MatrixXd> qr(dirs);
    dirs = qr.householderQ() * MatrixXd::Identity(L, C);
  } else {
    dirs.colwise().normalize();
  }
  g.class_means = (cfg.class_sep / std::sqrt(2.0)) * dirs.transpose();
  g.patch_map = gaussian(cfg.patch_raw_dim, L, rng, 1.0 / std::sqrt(static_cast<double>(L)));
  g.gene_map = gaussian(cfg.n_genes, L, rng, 1.0 / std::sqrt(static_cast<double>(L)));
  g.surv_weights = gaussian(L, 1, rng, 0.6 / std::sqrt(static_cast<double>(L)));
  g.subtype_dir = gaussian(L, 1, rng).normalized();
  return g;
}

int nearest_mean(const MatrixXd& means, const VectorXd& z) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < means.rows(); ++c) {
    const double d = (means.row(c).transpose() - z).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

Cohort synth_cohort(const SynthConfig& cfg) {
  cfg.validate();
  const Generator gen = make_generator(cfg);
  const int L = cfg.latent_dim;

  Cohort cohort;
  cohort.n_cancer_types = cfg.n_cancer_types;
  cohort.n_classes = cfg.label_mode == LabelMode::subtype ? 2 : cfg.n_cancer_types;
  cohort.vocab_size = cfg.vocab_size;
  cohort.n_genes = cfg.n_genes;
  cohort.latent_dim = L;
  cohort.synth_config = cfg;

  const int id_width = std::max(4, static_cast<int>(std::to_string(std::max(cfg.n_cases - 1, 0)).size()));
  for (int i = 0; i < cfg.n_cases; ++i) {
    std::mt19937_64 rng(nn::mix_seed(cfg.seed, static_cast<std::uint64_t>(i) + 1));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    Case cs;
    std::ostringstream id;
    id << "case_" << std::setw(id_width) << std::setfill('0') << i;
    cs.case_id = id.str();
    cs.cancer_type = std::uniform_int_distribution<int>(0, cfg.n_cancer_types - 1)(rng);

    VectorXd z = gen.class_means.row(cs.cancer_type).transpose();
    for (int k = 0; k < L; ++k) z(k) += normal(rng);

    if (cfg.label_mode == LabelMode::subtype) {
      const VectorXd centred = z - gen.class_means.row(cs.cancer_type).transpose();
      cs.class_label = centred.dot(gen.subtype_dir) > 0 ? 1 : 0;
    } else {
      cs.class_label = nearest_mean(gen.class_means, z);
    }

    // Patches.
    const int M = std::uniform_int_distribution<int>(cfg.patches_per_case.first, cfg.patches_per_case.second)(rng);
    const VectorXd signal = gen.patch_map * z;
    VectorXd stain = VectorXd::Zero(cfg.patch_raw_dim);
    for (int d = 0; d < cfg.patch_raw_dim; ++d) stain(d) = cfg.stain_sigma * normal(rng);
    MatrixXd raw(M, cfg.patch_raw_dim);
    for (int m = 0; m < M; ++m) {
      const bool informative = unif(rng) < cfg.informative_patch_frac;
      for (int d = 0; d < cfg.patch_raw_dim; ++d) {
        raw(m, d) = informative ? signal(d) + cfg.noise_sigma * normal(rng) : cfg.background_sigma * normal(rng);
        raw(m, d) += stain(d);
      }
    }
    cs.patch_raw = to_float(raw);

    // Report: filler, two diagnosis tokens, quantised latent readings, noise.
    const int len = std::uniform_int_distribution<int>(cfg.report_len.first, cfg.report_len.second)(rng);
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(len));
    std::uniform_int_distribution<int> synonym(0, TokenLayout::kDiagPerClass - 1);
    tokens.push_back(TokenLayout::diag_token(cs.cancer_type, synonym(rng)));
    tokens.push_back(TokenLayout::diag_token(cs.cancer_type, synonym(rng)));
    const double step = (TokenLayout::kLatentHi - TokenLayout::kLatentLo) / TokenLayout::kLatentLevels;
    for (int k = 0; k < L; ++k) {
      for (int r = 0; r < cfg.tokens_per_latent; ++r) {
        const double v = z(k) + cfg.noise_sigma * normal(rng);
        const int level = std::clamp(static_cast<int>(std::floor((v - TokenLayout::kLatentLo) / step)), 0,
                                     TokenLayout::kLatentLevels - 1);
        tokens.push_back(TokenLayout::latent_token(k, level));
      }
    }
    const int noise_lo = TokenLayout::noise_begin(L);
    const bool has_noise_tokens = noise_lo < cfg.vocab_size;
    std::uniform_int_distribution<int> filler(TokenLayout::kFillerBegin, TokenLayout::kFillerEnd - 1);
    std::uniform_int_distribution<int> noise_tok(noise_lo, std::max(noise_lo, cfg.vocab_size - 1));
    while (static_cast<int>(tokens.size()) < len) {
      tokens.push_back(has_noise_tokens && unif(rng) < 0.3 ? noise_tok(rng) : filler(rng));
    }
    std::shuffle(tokens.begin(), tokens.end(), rng);
    cs.report_tokens = std::move(tokens);

    // Gene expression.
    const VectorXd act = gen.gene_map * z;
    MatrixXd expr(1, cfg.n_genes);
    for (int g = 0; g < cfg.n_genes; ++g) {
      double e = cfg.gene_scale * softplus(act(g) - 1.0 + cfg.noise_sigma * normal(rng));
      expr(0, g) = e < cfg.gene_floor ? 0.0 : e;
    }
    cs.gene_expr = to_float(expr);

    // Survival: exponential event time with log-rate w.z, independent censoring.
    const double rate = std::exp(gen.surv_weights.dot(z)) / cfg.median_survival * std::log(2.0);
    const double t_event = -std::log(1.0 - unif(rng)) / rate;
    const bool censored = unif(rng) < cfg.censor_rate;
    const double t_obs = censored ? t_event * std::max(unif(rng), 1e-3) : t_event;
    cs.os_months = static_cast<double>(static_cast<float>(std::max(t_obs, 1e-3)));
    cs.censor = censored ? 1 : 0;

    cs.has_report = unif(rng) >= cfg.report_dropout;
    cs.has_gene = unif(rng) >= cfg.gene_dropout;
    if (!cs.has_report) cs.report_tokens.clear();
    if (!cs.has_gene) cs.gene_expr.resize(0, 0);

    cohort.cases.push_back(std::move(cs));
    cohort.latents.push_back(z);
  }
  return cohort;
}

// ---- MSTR -----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_mstr(const FMat& m) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 4 * static_cast<std::size_t>(m.size()));
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  return out;
}

FMat decode_mstr(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 16) throw FormatError(FormatErrc::truncated, origin + ": truncated MSTR header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(FormatErrc::bad_magic, origin + ": bad MSTR magic");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kVersion) {
    throw FormatError(FormatErrc::bad_version, origin + ": unsupported MSTR version " + std::to_string(version));
  }
  const std::uint64_t rows = get_u32(bytes.data() + 8), cols = get_u32(bytes.data() + 12);
  const std::uint64_t need = 16 + 4 * rows * cols;
  if (bytes.size() < need) throw FormatError(FormatErrc::truncated, origin + ": truncated MSTR payload");
  if (bytes.size() > need) throw FormatError(FormatErrc::trailing_bytes, origin + ": trailing bytes after MSTR payload");
  FMat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = std::bit_cast<float>(get_u32(bytes.data() + 16 + 4 * i));
  }
  return m;
}

void write_mstr(const fs::path& path, const FMat& m) {
  const auto bytes = encode_mstr(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

FMat read_mstr(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::missing_file, "cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_mstr(bytes, path.string());
}

// ---- cohort directory -----------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::missing_file, "cannot open: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  if (!fs::exists(dir)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) ++n;
  }
  return n;
}

}  // namespace

void write_cohort(const Cohort& cohort, const fs::path& dir) {
  fs::create_directories(dir / "raw");
  fs::create_directories(dir / "feat");
  fs::create_directories(dir / "gene");
  json cases = json::array();
  json reports = json::object();
  for (const Case& c : cohort.cases) {
    json entry{{"case_id", c.case_id},
               {"cancer_type", c.cancer_type},
               {"labels", {{"class", c.class_label}, {"os_months", c.os_months}, {"censor", c.censor}}},
               {"modalities", {{"wsi", true}, {"report", c.has_report}, {"gene", c.has_gene}}},
               {"files", json::object()}};
    const std::string raw_rel = "raw/" + c.case_id + ".mstr";
    write_mstr(dir / raw_rel, c.patch_raw);
    entry["files"]["raw"] = raw_rel;
    if (c.patch_feat.size() > 0) {
      const std::string feat_rel = "feat/" + c.case_id + ".mstr";
      write_mstr(dir / feat_rel, c.patch_feat);
      entry["files"]["feat"] = feat_rel;
    }
    if (c.has_gene) {
      const std::string gene_rel = "gene/" + c.case_id + ".mstr";
      write_mstr(dir / gene_rel, c.gene_expr);
      entry["files"]["gene"] = gene_rel;
    }
    if (c.has_report) reports[c.case_id] = c.report_tokens;
    cases.push_back(std::move(entry));
  }
  json manifest{{"format", "mstar-cohort"},
                {"version", 1},
                {"n_cancer_types", cohort.n_cancer_types},
                {"n_classes", cohort.n_classes},
                {"vocab_size", cohort.vocab_size},
                {"n_genes", cohort.n_genes},
                {"latent_dim", cohort.latent_dim},
                {"synth_config", cohort.synth_config},
                {"cases", std::move(cases)}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  write_text(dir / "reports.json", reports.dump() + "\n");
}

Cohort read_cohort(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  const json reports = read_json(dir / "reports.json");
  Cohort cohort;
  try {
    cohort.n_cancer_types = manifest.at("n_cancer_types").get<int>();
    cohort.n_classes = manifest.at("n_classes").get<int>();
    cohort.vocab_size = manifest.at("vocab_size").get<int>();
    cohort.n_genes = manifest.at("n_genes").get<int>();
    cohort.latent_dim = manifest.value("latent_dim", 0);
    cohort.synth_config = manifest.value("synth_config", json());
    std::size_t n_feat = 0, n_gene = 0, n_report = 0;
    for (const json& e : manifest.at("cases")) {
      Case c;
      c.case_id = e.at("case_id").get<std::string>();
      c.cancer_type = e.at("cancer_type").get<int>();
      c.class_label = e.at("labels").at("class").get<int>();
      c.os_months = e.at("labels").at("os_months").get<double>();
      c.censor = e.at("labels").at("censor").get<int>();
      c.has_report = e.at("modalities").at("report").get<bool>();
      c.has_gene = e.at("modalities").at("gene").get<bool>();
      const json& files = e.at("files");
      c.patch_raw = read_mstr(dir / files.at("raw").get<std::string>());
      if (files.contains("feat")) {
        c.patch_feat = read_mstr(dir / files.at("feat").get<std::string>());
        if (c.patch_feat.rows() != c.patch_raw.rows()) {
          throw FormatError(FormatErrc::manifest_mismatch, c.case_id + ": feature and raw patch counts differ");
        }
        ++n_feat;
      }
      if (c.has_gene) {
        if (!files.contains("gene")) throw FormatError(FormatErrc::manifest_mismatch, c.case_id + ": gene file missing from manifest");
        c.gene_expr = read_mstr(dir / files.at("gene").get<std::string>());
        if (c.gene_expr.rows() != 1 || c.gene_expr.cols() != cohort.n_genes) {
          throw FormatError(FormatErrc::manifest_mismatch, c.case_id + ": gene file is not 1 x n_genes");
        }
        ++n_gene;
      }
      if (c.has_report) {
        if (!reports.contains(c.case_id)) {
          throw FormatError(FormatErrc::manifest_mismatch, c.case_id + ": report missing from reports.json");
        }
        c.report_tokens = reports.at(c.case_id).get<std::vector<int>>();
        ++n_report;
      }
      cohort.cases.push_back(std::move(c));
    }
    if (count_files(dir / "raw", ".mstr") != cohort.cases.size() || count_files(dir / "feat", ".mstr") != n_feat ||
        count_files(dir / "gene", ".mstr") != n_gene || reports.size() != n_report) {
      throw FormatError(FormatErrc::manifest_mismatch, dir.string() + ": manifest does not match files on disk");
    }
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
  return cohort;
}

// ---- splits ---------------------------------------------------------------

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split: " + s);
}

SplitAssignment split_cohort(const Cohort& cohort, std::array<int, 3> ratios, StratifyKey key, std::uint64_t seed) {
  const int total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || total_ratio <= 0) throw DataError("split ratios must be >= 0");
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
    const Case& c = cohort.cases[i];
    const int k = key == StratifyKey::cancer_type ? c.cancer_type : key == StratifyKey::class_label ? c.class_label : 0;
    strata[k].push_back(i);
  }
  const int parts = static_cast<int>(std::count_if(ratios.begin(), ratios.end(), [](int r) { return r > 0; }));
  SplitAssignment out;
  for (auto& [stratum, members] : strata) {
    if (static_cast<int>(members.size()) < parts) {
      throw DataError("stratum " + std::to_string(stratum) + " has " + std::to_string(members.size()) +
                      " cases, fewer than the " + std::to_string(parts) + " split parts");
    }
    std::mt19937_64 rng(nn::mix_seed(seed, static_cast<std::uint64_t>(stratum) + 0x5eed));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = static_cast<long>(members.size());
    std::array<long, 3> count{};
    std::array<long, 3> frac_num{};
    long assigned = 0;
    for (int p = 0; p < 3; ++p) {
      count[p] = n * ratios[p] / total_ratio;
      frac_num[p] = n * ratios[p] % total_ratio;
      assigned += count[p];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac_num[a] > frac_num[b]; });
    for (int r = 0; assigned < n; ++r, ++assigned) count[order[r % 3]]++;
    std::size_t at = 0;
    for (int p = 0; p < 3; ++p) {
      for (long k = 0; k < count[p]; ++k) out[cohort.cases[members[at++]].case_id] = static_cast<Split>(p);
    }
  }
  return out;
}

std::vector<std::size_t> cases_in(const Cohort& cohort, const SplitAssignment& split, Split which) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
    auto it = split.find(cohort.cases[i].case_id);
    if (it != split.end() && it->second == which) out.push_back(i);
  }
  return out;
}

// ---- bags -----------------------------------------------------------------

std::vector<int> fix_bag_plan(int rows, int m_fix, std::uint64_t seed) {
  if (m_fix <= 0) throw DataError("fix_bag: m_fix must be positive");
  if (rows < 1) throw DataError("fix_bag: empty bag");
  std::vector<int> plan;
  plan.reserve(static_cast<std::size_t>(m_fix));
  if (rows > m_fix) {
    std::vector<int> idx(static_cast<std::size_t>(rows));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    // partial Fisher-Yates: first m_fix entries are a uniform sample
    for (int i = 0; i < m_fix; ++i) {
      std::uniform_int_distribution<int> pick(i, rows - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    plan.assign(idx.begin(), idx.begin() + m_fix);
    std::sort(plan.begin(), plan.end());
    return plan;
  }
  for (int i = 0; i < rows; ++i) plan.push_back(i);
  for (int i = rows; i < m_fix; ++i) plan.push_back(-1);
  return plan;
}

Eigen::MatrixXd apply_bag_plan(const Eigen::MatrixXd& features, const std::vector<int>& plan) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(plan.size()), features.cols());
  const Eigen::RowVectorXd mu = features.colwise().mean();
  for (std::size_t i = 0; i < plan.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = plan[i] < 0 ? mu : features.row(plan[i]);
  }
  return out;
}

Eigen::MatrixXd fix_bag(const Eigen::MatrixXd& features, int m_fix, std::uint64_t seed) {
  return apply_bag_plan(features, fix_bag_plan(static_cast<int>(features.rows()), m_fix, seed));
}

Eigen::MatrixXd to_double(const FMat& m) { return m.cast<double>(); }
FMat to_float(const Eigen::MatrixXd& m) { return m.cast<float>(); }

}  // namespace mstar::corpus
