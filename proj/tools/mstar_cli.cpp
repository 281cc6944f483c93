// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point. Exit codes: 0 success, 1 usage error, 2 data
// error, 3 numerical abort.

#include "mstar/corpus.hpp"
#include "mstar/downstream.hpp"
#include "mstar/encoders.hpp"
#include "mstar/errors.hpp"
#include "mstar/nn.hpp"
#include "mstar/report.hpp"
#include "mstar/selftest.hpp"
#include "mstar/shot.hpp"
#include "mstar/stage1.hpp"
#include "mstar/stage2.hpp"
#include "mstar/stats.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mstar;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::optional<std::uint64_t> seed_flag;
  std::string config_path;
  std::string out;
  json config = json::object();
  std::uint64_t seed = 0;
};

json load_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open config " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void resolve_globals(Globals& g) {
  if (!g.config_path.empty()) g.config = load_json_file(g.config_path);
  if (!g.config.is_object()) throw DataError("config must be a JSON object");
  if (g.seed_flag) {
    g.seed = *g.seed_flag;
  } else if (const char* env = std::getenv("MSTAR_SEED"); env && *env) {
    try {
      std::size_t pos = 0;
      g.seed = std::stoull(env, &pos);
      if (pos != std::string(env).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(std::string("MSTAR_SEED is not an unsigned integer: ") + env);
    }
  } else {
    g.seed = g.config.value("seed", std::uint64_t{0});
  }
  if (g.out.empty()) throw DataError("--out is required");
}

json section(const Globals& g, const char* name) {
  if (!g.config.contains(name)) return json::object();
  const json& s = g.config.at(name);
  if (!s.is_object()) throw DataError(std::string("config section '") + name + "' must be an object");
  return s;
}

template <typename T>
T parse_section(const Globals& g, const char* name) {
  try {
    return section(g, name).get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("config section '") + name + "': " + e.what());
  }
}

void write_run_json(const fs::path& dir, const std::string& command, const Globals& g, json resolved) {
  json run{{"command", command},
           {"seed", g.seed},
           {"config", std::move(resolved)},
           {"versions",
            {{"mstar", kVersion},
             {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                           std::to_string(EIGEN_MINOR_VERSION)},
             {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
             {"cli11", CLI11_VERSION},
             {"compiler", __VERSION__}}}};
  report::write_text(dir / "run.json", run.dump(2) + "\n");
}

/// A path ending in ".ckpt" names the checkpoint; side outputs go beside it.
std::pair<fs::path, fs::path> checkpoint_target(const std::string& out, const char* default_name) {
  fs::path p(out);
  if (p.extension() == ".ckpt") {
    fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
    return {dir, p};
  }
  return {p, p / default_name};
}

corpus::SplitAssignment resolve_split(const Globals& g, const corpus::Cohort& cohort, const std::string& auto_key) {
  const json s = section(g, "split");
  std::array<int, 3> ratios{7, 1, 2};
  if (s.contains("ratios")) ratios = s.at("ratios").get<std::array<int, 3>>();
  std::string key = s.value("stratify", std::string("auto"));
  if (key == "auto") key = auto_key;
  corpus::StratifyKey k = corpus::StratifyKey::cancer_type;
  if (key == "class_label") {
    k = corpus::StratifyKey::class_label;
  } else if (key == "none") {
    k = corpus::StratifyKey::none;
  } else if (key != "cancer_type") {
    throw DataError("split.stratify must be auto, cancer_type, class_label or none");
  }
  return corpus::split_cohort(cohort, ratios, k, s.value("seed", g.seed));
}

encoders::Encoders load_cohort_encoders(const fs::path& cohort_dir, const std::string& checkpoint, json* extra) {
  if (!checkpoint.empty()) return encoders::load_encoders(checkpoint, extra);
  return encoders::load_encoders(cohort_dir / "base_extractor.ckpt", extra);
}

int m_fix_of(const json& extra, const Globals& g) {
  if (extra.contains("m_fix")) return extra.at("m_fix").get<int>();
  return parse_section<stage1::Stage1Config>(g, "stage1").m_fix;
}

// ---- subcommands ------------------------------------------------------------------

int cmd_synth(const Globals& g) {
  auto sc = parse_section<corpus::SynthConfig>(g, "synth");
  sc.seed = g.seed;
  auto ec = parse_section<encoders::EncoderConfig>(g, "encoder");
  ec.seed = g.seed;
  ec.d_raw = sc.patch_raw_dim;
  ec.n_genes = sc.n_genes;
  ec.vocab_size = sc.vocab_size;
  ec.validate();
  corpus::Cohort cohort = corpus::synth_cohort(sc);
  encoders::Encoders enc(ec);
  for (auto& c : cohort.cases) c.patch_feat = corpus::to_float(encoders::base_extract(enc, corpus::to_double(c.patch_raw)));
  const fs::path out(g.out);
  corpus::write_cohort(cohort, out);
  encoders::save_encoders(out / "base_extractor.ckpt", enc, {{"stage", "init"}});
  write_run_json(out, "synth", g, {{"synth", sc}, {"encoder", ec}});
  std::cout << "wrote " << cohort.cases.size() << " cases to " << out.string() << "\n";
  return 0;
}

int cmd_pretrain1(const Globals& g, const std::string& cohort_dir) {
  const auto cohort = corpus::read_cohort(cohort_dir);
  auto cfg = parse_section<stage1::Stage1Config>(g, "stage1");
  cfg.seed = g.seed;
  json extra;
  auto enc = encoders::load_encoders(fs::path(cohort_dir) / "base_extractor.ckpt", &extra);
  const auto split = resolve_split(g, cohort, "cancer_type");
  const auto train = corpus::cases_in(cohort, split, corpus::Split::train);
  const auto [dir, ckpt] = checkpoint_target(g.out, "teacher.ckpt");
  fs::create_directories(dir);

  report::Table log{{"epoch", "L_PT", "L_PG", "L_TG", "L_tri", "total"}, {}};
  const auto rows = stage1::train_stage1(enc, cohort, train, cfg, [](const stage1::EpochLog& r) {
    std::cerr << "epoch " << r.epoch << " total " << r.total << "\n";
  });
  for (const auto& r : rows) {
    log.rows.push_back({std::to_string(r.epoch), report::format_double(r.pt), report::format_double(r.pg),
                        report::format_double(r.tg), report::format_double(r.tri), report::format_double(r.total)});
  }
  report::write_csv(dir / "stage1_log.csv", log);

  const auto test = corpus::cases_in(cohort, split, corpus::Split::test);
  if (!test.empty()) {
    const auto e = stage1::embed_cases(enc, cohort, test, cfg.m_fix, g.seed);
    report::Table ret{{"pair", "recall_at_1"}, {}};
    std::vector<std::size_t> full;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (e.has_report[i] && e.has_gene[i]) full.push_back(i);
    }
    if (full.size() >= 2) {
      auto rows_of = [&](const ad::Mat& m) {
        ad::Mat out(static_cast<Eigen::Index>(full.size()), m.cols());
        for (std::size_t k = 0; k < full.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(full[k]));
        return out;
      };
      const ad::Mat P = rows_of(e.P), T = rows_of(e.T), G = rows_of(e.G);
      const std::pair<const char*, std::pair<const ad::Mat*, const ad::Mat*>> pairs[] = {
          {"wsi_to_report", {&P, &T}}, {"report_to_wsi", {&T, &P}}, {"wsi_to_gene", {&P, &G}},
          {"gene_to_wsi", {&G, &P}},   {"report_to_gene", {&T, &G}}, {"gene_to_report", {&G, &T}}};
      for (const auto& [name, ab] : pairs) {
        ret.rows.push_back({name, report::format_double(stage1::recall_at_1(*ab.first, *ab.second))});
      }
      report::write_csv(dir / "retrieval.csv", ret);
    }
  }
  extra = {{"stage", "stage1"}, {"m_fix", cfg.m_fix}, {"stage1", cfg}};
  encoders::save_encoders(ckpt, enc, extra);
  write_run_json(dir, "pretrain1", g, {{"cohort", cohort_dir}, {"stage1", cfg}, {"split", section(g, "split")}});
  std::cout << "wrote " << ckpt.string() << "\n";
  return 0;
}

int cmd_pretrain2(const Globals& g, const std::string& cohort_dir, const std::string& teacher) {
  const auto cohort = corpus::read_cohort(cohort_dir);
  auto cfg = parse_section<stage2::Stage2Config>(g, "stage2");
  cfg.seed = g.seed;
  json extra;
  auto enc = encoders::load_encoders(teacher, &extra);
  if (!section(g, "stage2").contains("m_fix") && extra.contains("m_fix")) cfg.m_fix = extra.at("m_fix").get<int>();
  const auto split = resolve_split(g, cohort, "cancer_type");
  const auto train = corpus::cases_in(cohort, split, corpus::Split::train);
  const auto [dir, ckpt] = checkpoint_target(g.out, "student.ckpt");
  fs::create_directories(dir);
  const fs::path cache = dir / "teacher_cache";
  report::Table log{{"epoch", "teacher_l1", "ema_l1", "total"}, {}};
  const auto rows = stage2::train_stage2(enc, cohort, train, cfg, cache, [](const stage2::EpochLog& r) {
    std::cerr << "epoch " << r.epoch << " total " << r.total << "\n";
  });
  for (const auto& r : rows) {
    log.rows.push_back({std::to_string(r.epoch), report::format_double(r.teacher_l1), report::format_double(r.ema_l1),
                        report::format_double(r.total)});
  }
  report::write_csv(dir / "stage2_log.csv", log);
  extra["stage"] = "stage2";
  extra["stage2"] = cfg;
  encoders::save_encoders(ckpt, enc, extra);
  write_run_json(dir, "pretrain2", g,
                 {{"cohort", cohort_dir}, {"teacher", teacher}, {"stage2", cfg}, {"split", section(g, "split")}});
  std::cout << "wrote " << ckpt.string() << "\n";
  return 0;
}

report::Table predictions_table(const std::vector<downstream::Prediction>& preds, downstream::Task task, int n_scores) {
  report::Table t{{"case_id", "task", "label", "time", "censor", "risk"}, {}};
  for (int c = 0; c < n_scores; ++c) t.header.push_back("score_" + std::to_string(c));
  for (const auto& p : preds) {
    std::vector<std::string> row{p.case_id,
                                 downstream::to_string(task),
                                 std::to_string(p.label),
                                 report::format_double(p.time),
                                 std::to_string(p.censor),
                                 report::format_double(p.risk)};
    for (double s : p.scores) row.push_back(report::format_double(s));
    t.rows.push_back(std::move(row));
  }
  return t;
}

int cmd_train_mil(const Globals& g, const std::string& cohort_dir, const std::string& checkpoint,
                  const std::string& features, const std::string& head, const std::string& task, bool shuffle_labels) {
  auto cohort = corpus::read_cohort(cohort_dir);
  auto cfg = parse_section<downstream::MILConfig>(g, "mil");
  cfg.seed = g.seed;
  cfg.head = downstream::head_from_string(head);
  cfg.task = downstream::task_from_string(task);
  if (cfg.task == downstream::Task::classify) cfg.n_classes = cohort.n_classes;
  const auto src = downstream::feature_source_from_string(features);
  if (src != downstream::FeatureSource::base && checkpoint.empty()) {
    throw DataError("--checkpoint is required for the " + features + " feature source");
  }
  json extra;
  const auto enc = load_cohort_encoders(cohort_dir, checkpoint, &extra);
  const int m_fix = m_fix_of(extra, g);
  const auto split = resolve_split(g, cohort, cfg.task == downstream::Task::classify ? "class_label" : "cancer_type");
  auto data = downstream::build_mil_data(enc, cohort, src, m_fix, g.seed);
  if (shuffle_labels) {
    std::mt19937_64 rng(nn::mix_seed(g.seed, 0x5fu));
    std::shuffle(data.labels.begin(), data.labels.end(), rng);
  }
  const auto tr = corpus::cases_in(cohort, split, corpus::Split::train);
  const auto va = corpus::cases_in(cohort, split, corpus::Split::val);
  const auto te = corpus::cases_in(cohort, split, corpus::Split::test);
  const auto rep = downstream::train_mil(data, tr, va, te, cfg);

  const fs::path dir(g.out);
  fs::create_directories(dir);
  const std::string model = std::string(head) + "-" + features;
  report::Table m{{"model", "dataset", "features", "head", "task", "metric", "point", "lo", "hi", "best_epoch", "best_val"},
                  {{model, fs::path(cohort_dir).filename().string(), features, head, task, rep.metric,
                    report::format_double(rep.test.point), report::format_double(rep.test.lo),
                    report::format_double(rep.test.hi), std::to_string(rep.best_epoch),
                    report::format_double(rep.best_val)}}};
  report::write_csv(dir / "metrics.csv", m);
  report::write_csv(dir / "predictions.csv", predictions_table(rep.predictions, cfg.task, cfg.n_outputs()));
  cfg.input_dim = static_cast<int>(data.bags.front().cols());
  write_run_json(dir, "train-mil", g,
                 {{"cohort", cohort_dir}, {"checkpoint", checkpoint}, {"features", features}, {"mil", cfg},
                  {"shuffle_labels", shuffle_labels}, {"m_fix", m_fix}, {"split", section(g, "split")}});
  std::cout << rep.metric << " " << rep.test.point << " [" << rep.test.lo << ", " << rep.test.hi << "]\n";
  return 0;
}

struct ShotSetup {
  corpus::Cohort cohort;
  encoders::Encoders enc;
  shot::PromptSet prompts;
  std::vector<std::size_t> cases;
  std::vector<ad::Mat> slides;
  std::vector<int> labels;
  int m_fix = 0;
};

ShotSetup shot_setup(const Globals& g, const std::string& cohort_dir, const std::string& checkpoint,
                     const std::string& features, const std::string& prompts_path, const std::string& split_name) {
  if (checkpoint.empty()) throw DataError("--checkpoint is required (the text encoder comes from it)");
  auto cohort = corpus::read_cohort(cohort_dir);
  json extra;
  auto enc = encoders::load_encoders(checkpoint, &extra);
  shot::PromptSet prompts = prompts_path.empty() ? shot::PromptSet::synthetic(cohort.n_cancer_types, 8, g.seed)
                                                 : load_json_file(prompts_path).get<shot::PromptSet>();
  if (prompts.n_classes() != cohort.n_cancer_types) throw DataError("prompt set class count != cancer types");
  std::vector<std::size_t> cases;
  if (split_name == "all") {
    cases.resize(cohort.cases.size());
    std::iota(cases.begin(), cases.end(), 0);
  } else {
    cases = corpus::cases_in(cohort, resolve_split(g, cohort, "cancer_type"), corpus::split_from_string(split_name));
  }
  if (cases.empty()) throw DataError("no cases in the requested split");
  const int m_fix = m_fix_of(extra, g);
  std::vector<ad::Mat> slides;
  std::vector<int> labels;
  for (std::size_t i : cases) {
    slides.push_back(shot::patch_embeddings(enc, cohort.cases[i], features, m_fix, nn::mix_seed(g.seed, i)));
    labels.push_back(cohort.cases[i].cancer_type);
  }
  return {std::move(cohort), std::move(enc), std::move(prompts), std::move(cases), std::move(slides), std::move(labels),
          m_fix};
}

int cmd_zeroshot(const Globals& g, const std::string& cohort_dir, const std::string& checkpoint,
                 const std::string& features, const std::string& prompts_path, const std::string& split_name, int k) {
  auto s = shot_setup(g, cohort_dir, checkpoint, features, prompts_path, split_name);
  const auto protos = shot::build_text_prototypes(s.prompts, s.enc);
  const int C = s.prompts.n_classes();
  std::vector<downstream::Prediction> preds;
  ad::Mat scores(static_cast<Eigen::Index>(s.cases.size()), C);
  for (std::size_t q = 0; q < s.cases.size(); ++q) {
    const int kk = k > 0 ? std::min<int>(k, static_cast<int>(s.slides[q].rows())) : shot::default_k(static_cast<int>(s.slides[q].rows()));
    const auto r = shot::mi_zero(s.slides[q], protos, kk);
    downstream::Prediction p;
    p.case_id = s.cohort.cases[s.cases[q]].case_id;
    p.label = s.labels[q];
    p.scores = r.scores;
    for (int c = 0; c < C; ++c) scores(static_cast<Eigen::Index>(q), c) = r.scores[static_cast<std::size_t>(c)];
    preds.push_back(std::move(p));
  }
  const auto n_boot = section(g, "shot").value("n_boot", 1000);
  stats::IndexMetric metric = [&](std::span<const std::size_t> rs) -> std::optional<double> {
    ad::Mat sc(static_cast<Eigen::Index>(rs.size()), C);
    std::vector<int> l;
    for (std::size_t k2 = 0; k2 < rs.size(); ++k2) {
      sc.row(static_cast<Eigen::Index>(k2)) = scores.row(static_cast<Eigen::Index>(rs[k2]));
      l.push_back(s.labels[rs[k2]]);
    }
    if (std::set<int>(l.begin(), l.end()).size() < 2) return std::nullopt;
    return stats::macro_auc(sc, l);
  };
  const auto ci = stats::bootstrap_ci(metric, s.cases.size(), n_boot, nn::mix_seed(g.seed, 0x2e0));
  const fs::path dir(g.out);
  fs::create_directories(dir);
  report::write_csv(dir / "predictions.csv", predictions_table(preds, downstream::Task::classify, C));
  report::write_csv(dir / "metrics.csv",
                    {{"model", "dataset", "features", "metric", "point", "lo", "hi"},
                     {{"mizero-" + features, fs::path(cohort_dir).filename().string(), features, "macro_auc",
                       report::format_double(ci.point), report::format_double(ci.lo), report::format_double(ci.hi)}}});
  write_run_json(dir, "zeroshot", g,
                 {{"cohort", cohort_dir}, {"checkpoint", checkpoint}, {"features", features}, {"prompts", s.prompts},
                  {"split", split_name}, {"k", k}, {"m_fix", s.m_fix}, {"n_boot", n_boot}});
  std::cout << "macro_auc " << ci.point << " [" << ci.lo << ", " << ci.hi << "]\n";
  return 0;
}

int cmd_fewshot(const Globals& g, const std::string& cohort_dir, const std::string& checkpoint,
                const std::string& features, const std::string& prompts_path, const std::string& split_name,
                std::vector<int> k_values) {
  auto s = shot_setup(g, cohort_dir, checkpoint, features, prompts_path, split_name);
  const auto text = shot::build_text_prototypes(s.prompts, s.enc);
  const json sec = section(g, "shot");
  shot::EpisodeOptions opt;
  opt.n_episodes = sec.value("n_episodes", 5);
  opt.k_proto = sec.value("k_proto", 0);
  opt.k_vote = sec.value("k_vote", 0);
  opt.seed = g.seed;
  if (k_values.empty()) {
    std::map<int, int> counts;
    for (int l : s.labels) ++counts[l];
    int smallest = std::numeric_limits<int>::max();
    for (int c = 0; c < s.prompts.n_classes(); ++c) smallest = std::min(smallest, counts[c]);
    int pow2 = 1;
    while (pow2 * 2 <= smallest) pow2 *= 2;
    k_values = shot::k_schedule(smallest > 0 ? pow2 : 0);
  }
  const auto results = shot::run_episodes(s.slides, s.labels, text, k_values, opt,
                                          [](const std::string& msg) { std::cerr << msg << "\n"; });
  const fs::path dir(g.out);
  fs::create_directories(dir);
  report::Table ep{{"k", "episode", "macro_auc", "n_query"}, {}};
  for (const auto& r : results) {
    ep.rows.push_back({std::to_string(r.k), std::to_string(r.episode), report::format_double(r.auc),
                       std::to_string(r.n_query)});
  }
  report::write_csv(dir / "episodes.csv", ep);
  report::Table sm{{"series", "k", "mean", "std", "episodes"}, {}};
  for (const auto& k : shot::summarize(results)) {
    sm.rows.push_back({"mifewshot-" + features, std::to_string(k.k), report::format_double(k.mean),
                       report::format_double(k.stddev), std::to_string(k.episodes)});
    std::cout << "k=" << k.k << " macro_auc " << k.mean << " +- " << k.stddev << "\n";
  }
  report::write_csv(dir / "shots.csv", sm);
  write_run_json(dir, "fewshot", g,
                 {{"cohort", cohort_dir}, {"checkpoint", checkpoint}, {"features", features}, {"prompts", s.prompts},
                  {"split", split_name}, {"k_values", k_values}, {"n_episodes", opt.n_episodes},
                  {"k_proto", opt.k_proto}, {"k_vote", opt.k_vote}, {"m_fix", s.m_fix}});
  return 0;
}

// ---- stats ---------------------------------------------------------------------------

struct PredFile {
  std::string model;
  std::string dataset;
  report::Table table;
  std::map<std::string, std::size_t> row_of;
  bool survival = false;
  int n_scores = 0;
};

PredFile load_predictions(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw DataError("--input expects model[@dataset]=predictions.csv, got " + spec);
  PredFile f;
  const std::string name = spec.substr(0, eq);
  const auto at = name.find('@');
  f.model = name.substr(0, at);
  f.dataset = at == std::string::npos ? "default" : name.substr(at + 1);
  f.table = report::read_csv(spec.substr(eq + 1));
  if (f.table.rows.empty()) throw DataError("predictions file has no rows: " + spec.substr(eq + 1));
  const auto id = f.table.col("case_id");
  for (std::size_t r = 0; r < f.table.rows.size(); ++r) f.row_of[f.table.rows[r][id]] = r;
  f.survival = f.table.rows.front()[f.table.col("task")] == "survival";
  while (f.table.find("score_" + std::to_string(f.n_scores))) ++f.n_scores;
  return f;
}

std::optional<double> metric_on(const PredFile& f, const std::vector<std::string>& ids) {
  if (f.survival) {
    std::vector<double> r, t;
    std::vector<std::uint8_t> e;
    for (const auto& id : ids) {
      const std::size_t row = f.row_of.at(id);
      r.push_back(f.table.number(row, "risk"));
      t.push_back(f.table.number(row, "time"));
      e.push_back(f.table.number(row, "censor") == 0 ? 1 : 0);
    }
    try {
      return stats::c_index(r, t, e);
    } catch (const DataError&) {
      return std::nullopt;
    }
  }
  ad::Mat s(static_cast<Eigen::Index>(ids.size()), f.n_scores);
  std::vector<int> l;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const std::size_t row = f.row_of.at(ids[k]);
    for (int c = 0; c < f.n_scores; ++c) s(static_cast<Eigen::Index>(k), c) = f.table.number(row, "score_" + std::to_string(c));
    l.push_back(static_cast<int>(f.table.number(row, "label")));
  }
  if (std::set<int>(l.begin(), l.end()).size() < 2) return std::nullopt;
  return stats::macro_auc(s, l);
}

int cmd_stats(const Globals& g, const std::vector<std::string>& inputs, const std::string& pairing, double q_alpha,
              int n_boot) {
  if (inputs.empty()) throw DataError("stats needs at least one --input");
  if (pairing != "bootstrap" && pairing != "datasets") throw DataError("--pairing must be bootstrap or datasets");
  std::vector<PredFile> files;
  for (const auto& s : inputs) files.push_back(load_predictions(s));
  std::vector<std::string> models, datasets;
  for (const auto& f : files) {
    if (std::find(models.begin(), models.end(), f.model) == models.end()) models.push_back(f.model);
    if (std::find(datasets.begin(), datasets.end(), f.dataset) == datasets.end()) datasets.push_back(f.dataset);
  }
  const auto K = models.size(), N = datasets.size();
  std::map<std::pair<std::size_t, std::size_t>, const PredFile*> cell;
  for (const auto& f : files) {
    const auto mi = static_cast<std::size_t>(std::find(models.begin(), models.end(), f.model) - models.begin());
    const auto di = static_cast<std::size_t>(std::find(datasets.begin(), datasets.end(), f.dataset) - datasets.begin());
    if (!cell.emplace(std::make_pair(mi, di), &f).second) throw DataError("duplicate input for " + f.model + "@" + f.dataset);
  }
  if (cell.size() != K * N) throw DataError("every model needs predictions for every dataset");

  // Common case ids per dataset, in the first model's order.
  std::vector<std::vector<std::string>> ids(N);
  for (std::size_t d = 0; d < N; ++d) {
    const PredFile& first = *cell.at({0, d});
    const auto idc = first.table.col("case_id");
    for (const auto& row : first.table.rows) {
      bool all = true;
      for (std::size_t m = 0; m < K; ++m) all = all && cell.at({m, d})->row_of.count(row[idc]) > 0;
      if (all) ids[d].push_back(row[idc]);
    }
    if (ids[d].empty()) throw DataError("dataset " + datasets[d] + " has no case shared by all models");
  }

  const fs::path dir(g.out);
  fs::create_directories(dir);
  report::Table metrics{{"model", "dataset", "metric", "point", "lo", "hi"}, {}};
  ad::Mat table(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
  // replicate values per (model, dataset), shared resamples across models
  std::vector<std::vector<std::vector<double>>> reps(K, std::vector<std::vector<double>>(N));
  for (std::size_t d = 0; d < N; ++d) {
    for (std::size_t m = 0; m < K; ++m) {
      const PredFile& f = *cell.at({m, d});
      stats::IndexMetric metric = [&](std::span<const std::size_t> rs) {
        std::vector<std::string> sub;
        for (std::size_t r : rs) sub.push_back(ids[d][r]);
        return metric_on(f, sub);
      };
      const std::uint64_t seed = nn::mix_seed(g.seed, d);
      const auto ci = stats::bootstrap_ci(metric, ids[d].size(), n_boot, seed);
      table(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m)) = ci.point;
      metrics.rows.push_back({models[m], datasets[d], f.survival ? "c_index" : "macro_auc",
                              report::format_double(ci.point), report::format_double(ci.lo),
                              report::format_double(ci.hi)});
      if (pairing == "bootstrap") {
        // Replicate r resamples with the same stream for every model, so the
        // values pair across models.
        for (int r = 0; r < n_boot; ++r) {
          std::mt19937_64 rng(nn::mix_seed(seed, static_cast<std::uint64_t>(r)));
          std::uniform_int_distribution<std::size_t> pick(0, ids[d].size() - 1);
          std::optional<double> v;
          for (int attempt = 0; attempt <= 100 && !v; ++attempt) {
            std::vector<std::string> sub;
            for (std::size_t i = 0; i < ids[d].size(); ++i) sub.push_back(ids[d][pick(rng)]);
            v = metric_on(f, sub);
          }
          if (!v) throw DataError("bootstrap replicate undefined after 100 retries");
          reps[m][d].push_back(*v);
        }
      }
    }
  }
  report::write_csv(dir / "metrics.csv", metrics);

  report::Table pv{{"model"}, {}};
  for (const auto& m : models) pv.header.push_back(m);
  for (std::size_t a = 0; a < K; ++a) {
    std::vector<std::string> row{models[a]};
    for (std::size_t b = 0; b < K; ++b) {
      if (a == b) {
        row.push_back("nan");
        continue;
      }
      std::vector<double> x, y;
      if (pairing == "datasets") {
        for (std::size_t d = 0; d < N; ++d) {
          x.push_back(table(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(a)));
          y.push_back(table(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(b)));
        }
      } else {
        for (std::size_t d = 0; d < N; ++d) {
          x.insert(x.end(), reps[a][d].begin(), reps[a][d].end());
          y.insert(y.end(), reps[b][d].begin(), reps[b][d].end());
        }
      }
      double p = std::nan("");
      try {
        p = stats::wilcoxon_one_sided(x, y);
      } catch (const DataError&) {
      }
      row.push_back(report::format_double(p));
    }
    pv.rows.push_back(std::move(row));
  }
  report::write_csv(dir / "pvalues.csv", pv);

  const auto rk = stats::avg_rank_cd(table, q_alpha > 0 ? q_alpha : 0.0);
  const double cd = q_alpha > 0 ? rk.cd : std::nan("");
  report::Table ranks{{"model", "avg_rank", "cd"}, {}};
  for (std::size_t m = 0; m < K; ++m) {
    ranks.rows.push_back({models[m], report::format_double(rk.avg_ranks[m]), report::format_double(cd)});
  }
  report::write_csv(dir / "ranks.csv", ranks);
  if (q_alpha > 0) report::write_text(dir / "cd.svg", report::svg_cd(models, rk.avg_ranks, cd));
  write_run_json(dir, "stats", g,
                 {{"inputs", inputs}, {"pairing", pairing}, {"q_alpha", q_alpha}, {"n_boot", n_boot}});
  return 0;
}

int cmd_plot(const Globals& g, const std::string& kind, const std::string& input) {
  const auto t = report::read_csv(input);
  if (t.rows.empty()) throw DataError("plot input has no rows: " + input);
  std::string svg;
  if (kind == "bar-with-ci") {
    std::vector<report::Bar> bars;
    const bool has_dataset = t.find("dataset").has_value();
    const auto name_col = t.find("model") ? t.col("model") : t.col("name");
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::string label = t.rows[r][name_col];
      if (has_dataset && t.rows[r][t.col("dataset")] != "default") label += "@" + t.rows[r][t.col("dataset")];
      bars.push_back({label, t.number(r, "point"), t.number(r, "lo"), t.number(r, "hi")});
    }
    const std::string metric = t.find("metric") ? t.rows.front()[t.col("metric")] : "metric";
    svg = report::svg_bars(bars, metric + " with 95% CI", metric);
  } else if (kind == "shots-line") {
    std::vector<report::Series> series;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const std::string name = t.rows[r][t.col("series")];
      auto it = std::find_if(series.begin(), series.end(), [&](const auto& s) { return s.name == name; });
      if (it == series.end()) {
        series.push_back({name, {}, {}, {}});
        it = series.end() - 1;
      }
      it->x.push_back(t.number(r, "k"));
      it->mean.push_back(t.number(r, "mean"));
      it->sd.push_back(t.number(r, "std"));
    }
    svg = report::svg_shots(series, "Macro-AUC versus shots per class");
  } else if (kind == "cd-diagram") {
    std::vector<std::string> models;
    std::vector<double> ranks;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      models.push_back(t.rows[r][t.col("model")]);
      ranks.push_back(t.number(r, "avg_rank"));
    }
    const double cd = t.number(0, "cd");
    if (!std::isfinite(cd)) throw DataError("ranks file has no critical difference (run stats with --q-alpha)");
    svg = report::svg_cd(models, ranks, cd);
  } else {
    throw DataError("--kind must be bar-with-ci, shots-line or cd-diagram");
  }
  const fs::path dir(g.out);
  report::write_text(dir / (kind + ".svg"), svg);
  write_run_json(dir, "plot", g, {{"kind", kind}, {"input", input}});
  return 0;
}

int cmd_describe(const std::string& checkpoint) {
  auto [ps, meta] = encoders::load_checkpoint(checkpoint);
  std::cout << meta.dump(2) << "\n";
  std::size_t total = 0;
  for (const ad::Parameter* p : ps.all()) {
    std::cout << p->name << "\t" << p->value.rows() << "x" << p->value.cols() << (p->frozen ? "\tfrozen" : "") << "\n";
    total += static_cast<std::size_t>(p->value.size());
  }
  std::cout << ps.size() << " tensors, " << total << " scalars\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage multimodal slide pretraining and evaluation on synthetic cohorts"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Master seed (default: MSTAR_SEED, then config, then 0)");
  app.add_option("--config", g.config_path, "JSON config with optional sections synth/encoder/stage1/stage2/mil/shot/split");
  app.add_option("--out", g.out, "Output directory (or .ckpt path for pretraining)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");

  std::string cohort, teacher, checkpoint, features = "base", head = "abmil", task = "classify", prompts,
                                           split_name = "test";
  auto* p1 = app.add_subcommand("pretrain1", "Tri-modal slide-level pretraining");
  p1->add_option("--cohort", cohort)->required();
  auto* p2 = app.add_subcommand("pretrain2", "Patch-extractor distillation");
  p2->add_option("--cohort", cohort)->required();
  p2->add_option("--teacher", teacher)->required();

  bool shuffle = false;
  auto* mil = app.add_subcommand("train-mil", "Train and evaluate a MIL head");
  mil->add_option("--cohort", cohort)->required();
  mil->add_option("--checkpoint", checkpoint, "Encoder checkpoint (student/teacher sources)");
  mil->add_option("--features", features)->check(CLI::IsMember({"base", "student", "teacher"}));
  mil->add_option("--head", head)->check(CLI::IsMember({"abmil", "transmil"}));
  mil->add_option("--task", task)->check(CLI::IsMember({"classify", "survival"}));
  mil->add_flag("--shuffle-labels", shuffle, "Permute classification labels (no-signal control)");

  int k = 0;
  std::vector<int> k_values;
  auto* zs = app.add_subcommand("zeroshot", "Zero-shot slide classification of cancer type");
  auto* fs_ = app.add_subcommand("fewshot", "Few-shot episodes over cancer type");
  for (auto* sc : {zs, fs_}) {
    sc->add_option("--cohort", cohort)->required();
    sc->add_option("--checkpoint", checkpoint)->required();
    sc->add_option("--features", features)->check(CLI::IsMember({"base", "student", "teacher"}));
    sc->add_option("--prompts", prompts, "Prompt set JSON (default: synthetic templates)");
    sc->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test", "all"}));
  }
  zs->add_option("--k", k, "Top-K patches pooled per class (0: 5% of the bag)");
  fs_->add_option("--k-values", k_values, "Shots per class (default: doubling schedule)");

  std::vector<std::string> inputs;
  std::string pairing = "bootstrap";
  double q_alpha = 0;
  int n_boot = 1000;
  auto* st = app.add_subcommand("stats", "Metrics with CIs, Wilcoxon p-values, ranks and CD");
  st->add_option("--input", inputs, "model[@dataset]=predictions.csv")->required();
  st->add_option("--pairing", pairing)->check(CLI::IsMember({"bootstrap", "datasets"}));
  st->add_option("--q-alpha", q_alpha, "Critical value for the CD formula");
  st->add_option("--n-boot", n_boot)->check(CLI::PositiveNumber);

  std::string kind, input;
  auto* pl = app.add_subcommand("plot", "Render an SVG chart from a CSV");
  pl->add_option("--kind", kind)->required()->check(CLI::IsMember({"bar-with-ci", "shots-line", "cd-diagram"}));
  pl->add_option("--input", input)->required();

  auto* ds = app.add_subcommand("describe", "List tensors of a checkpoint");
  ds->add_option("--checkpoint", checkpoint)->required();

  auto* self = app.add_subcommand("selftest", "Run the built-in example suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed_flag = seed_value;

  try {
    if (*ds) return cmd_describe(checkpoint);
    if (*self) return selftest::run(std::cout) ? 0 : 3;
    resolve_globals(g);
    if (*synth) return cmd_synth(g);
    if (*p1) return cmd_pretrain1(g, cohort);
    if (*p2) return cmd_pretrain2(g, cohort, teacher);
    if (*mil) return cmd_train_mil(g, cohort, checkpoint, features, head, task, shuffle);
    if (*zs) return cmd_zeroshot(g, cohort, checkpoint, features, prompts, split_name, k);
    if (*fs_) return cmd_fewshot(g, cohort, checkpoint, features, prompts, split_name, k_values);
    if (*st) return cmd_stats(g, inputs, pairing, q_alpha, n_boot);
    if (*pl) return cmd_plot(g, kind, input);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const FrozenParameterError& e) {
    std::cerr << "frozen parameter modified: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
