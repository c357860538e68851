#pragma once

// Experiment orchestration: pipeline config, a cache-directory workspace, content-hashed stages with
// skip-on-unchanged-inputs, and the experiment manifest.

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "chronoscope/attribution/attribution.hpp"
#include "chronoscope/cli/evaluation.hpp"
#include "chronoscope/cli/report.hpp"
#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/core/split.hpp"
#include "chronoscope/curation/curation.hpp"
#include "chronoscope/encoder/checkpoint.hpp"
#include "chronoscope/encoder/pretrain.hpp"
#include "chronoscope/retrieval/index.hpp"
#include "chronoscope/synth/cohort.hpp"
#include "chronoscope/tokenizer/tokenizer.hpp"

namespace chronoscope::cli {

namespace fs = std::filesystem;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kToolVersion = "0.1.0";

// ---------------------------------------------------------------- config

struct RetrievalConfig {
  std::vector<std::string> cohort_codes = {"MOT-DX-000", "MOT-RX-000"};  // members carry every code before as_of
  std::string as_of = "2016-01-01";
  std::size_t k = 5;
  int n_folds = 5;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  json cohort = json::object();  // overrides on top of the standard synthetic cohort
  enc::EncoderConfig encoder;
  std::vector<TaskSpec> tasks;
  Modality prompt = Modality::Diagnosis;
  SplitRatios ratios;
  FitOptions fit;
  int n_bootstraps = 100;
  RetrievalConfig retrieval;

  // Propagates the global seed into every stage.
  void apply_seed(std::uint64_t s) {
    seed = s;
    cohort["seed"] = s;
    encoder.seed = s;
    fit.seed = s;
  }
};

inline json to_json(const RetrievalConfig& r) {
  return {{"cohort_codes", r.cohort_codes}, {"as_of", r.as_of}, {"k", r.k}, {"n_folds", r.n_folds}};
}

inline json to_json(const PipelineConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.tasks) tasks.push_back(to_json(t));
  return {{"schema_version", kSchemaVersion},
          {"seed", c.seed},
          {"cohort", c.cohort},
          {"encoder", enc::to_json(c.encoder)},
          {"tasks", tasks},
          {"prompt", to_string(c.prompt)},
          {"split", {{"train", c.ratios.train}, {"val", c.ratios.val}, {"test", c.ratios.test}}},
          {"fit",
           {{"pca_components", c.fit.pca_components}, {"case_cohort_ratio", c.fit.case_cohort_ratio}, {"lambda", c.fit.lambda}}},
          {"n_bootstraps", c.n_bootstraps},
          {"retrieval", to_json(c.retrieval)}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  require(j.is_object(), "pipeline config must be a JSON object");
  const int v = j.value("schema_version", kSchemaVersion);
  require(v == kSchemaVersion, "unsupported pipeline config schema_version " + std::to_string(v));
  PipelineConfig c;
  c.cohort = j.value("cohort", json::object());
  if (j.contains("encoder")) c.encoder = enc::encoder_config_from_json(j.at("encoder"));
  if (j.contains("tasks")) c.tasks = tasks_from_json(j.at("tasks"));
  if (j.contains("prompt")) c.prompt = modality_from_string(j.at("prompt").get<std::string>());
  require(enc::valid_prompt(c.prompt), "prompt modality must be Diagnosis, NoteText or Image");
  if (auto it = j.find("split"); it != j.end()) {
    c.ratios = {it->value("train", c.ratios.train), it->value("val", c.ratios.val), it->value("test", c.ratios.test)};
  }
  if (auto it = j.find("fit"); it != j.end()) {
    c.fit.pca_components = it->value("pca_components", c.fit.pca_components);
    c.fit.case_cohort_ratio = it->value("case_cohort_ratio", c.fit.case_cohort_ratio);
    c.fit.lambda = it->value("lambda", c.fit.lambda);
  }
  c.n_bootstraps = j.value("n_bootstraps", c.n_bootstraps);
  if (auto it = j.find("retrieval"); it != j.end()) {
    c.retrieval.cohort_codes = it->value("cohort_codes", c.retrieval.cohort_codes);
    c.retrieval.as_of = it->value("as_of", c.retrieval.as_of);
    c.retrieval.k = it->value("k", c.retrieval.k);
    c.retrieval.n_folds = it->value("n_folds", c.retrieval.n_folds);
  }
  std::set<std::string> names;
  for (const auto& t : c.tasks) {
    require(!t.name.empty() && t.name.find_first_of("/\\ ") == std::string::npos, "task names must be non-empty without spaces or slashes");
    require(names.insert(t.name).second, "duplicate task name '" + t.name + "'");
  }
  c.apply_seed(j.value("seed", std::uint64_t{0}));
  return c;
}

// Minutes since 1970-01-01 for an ISO date "YYYY-MM-DD".
inline std::int64_t parse_date_epoch_min(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "%d-%u-%u%c", &y, &m, &d, &tail) != 3) fail(ErrorKind::Validation, "invalid date '" + s + "' (want YYYY-MM-DD)");
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) fail(ErrorKind::Validation, "invalid date '" + s + "'");
  return static_cast<std::int64_t>(std::chrono::sys_days(ymd).time_since_epoch().count()) * kMinutesPerDay;
}

// ---------------------------------------------------------------- workspace

struct Workspace {
  fs::path root;

  fs::path raw_cohort() const { return root / "cohort" / "cohort.bin"; }
  fs::path truth() const { return root / "cohort" / "truth.json"; }
  fs::path vocab() const { return root / "tokenizer" / "vocab.json"; }
  fs::path specs() const { return root / "tokenizer" / "specs.json"; }
  fs::path tokenized() const { return root / "tokenizer" / "tokenized.bin"; }
  fs::path checkpoint() const { return root / "encoder" / "encoder.ckpt"; }
  fs::path curve() const { return root / "encoder" / "curve.csv"; }
  fs::path task_dir(const std::string& t) const { return root / "tasks" / t; }
  fs::path instances(const std::string& t) const { return task_dir(t) / "instances.csv"; }
  fs::path curation_log(const std::string& t) const { return task_dir(t) / "curation.json"; }
  fs::path embeddings(const std::string& t) const { return task_dir(t) / "embeddings.bin"; }
  fs::path model(const std::string& t, std::string_view m) const { return task_dir(t) / ("model_" + std::string(m) + ".json"); }
  fs::path reports() const { return root / "reports"; }
  fs::path index() const { return root / "retrieval" / "index.bin"; }
  fs::path retrieval_report() const { return root / "retrieval" / "report.json"; }
  fs::path manifest() const { return root / "manifest.json"; }

  std::string rel(const fs::path& p) const { return fs::relative(p, root).generic_string(); }
};

inline void write_artifact(const fs::path& p, std::string_view data) {
  fs::create_directories(p.parent_path());
  write_file(p.string(), data);
}

// ---------------------------------------------------------------- manifest

struct StageRecord {
  std::string input_hash;
  std::map<std::string, std::string> outputs;  // workspace-relative path → SHA-256
  double wall_seconds = 0.0;
};

struct ExperimentManifest {
  std::uint64_t seed = 0;
  std::map<std::string, StageRecord> stages;
};

inline json to_json(const ExperimentManifest& m) {
  json stages = json::object();
  for (const auto& [name, r] : m.stages) {
    stages[name] = {{"input_hash", r.input_hash}, {"outputs", r.outputs}, {"wall_seconds", r.wall_seconds}};
  }
  return {{"schema_version", kSchemaVersion}, {"tool_version", kToolVersion}, {"seed", m.seed}, {"stages", stages}};
}

inline ExperimentManifest manifest_from_json(const json& j) {
  ExperimentManifest m;
  m.seed = j.value("seed", std::uint64_t{0});
  for (const auto& [name, r] : j.at("stages").items()) {
    m.stages[name] = {r.at("input_hash").get<std::string>(), r.at("outputs").get<std::map<std::string, std::string>>(),
                      r.value("wall_seconds", 0.0)};
  }
  return m;
}

inline ExperimentManifest load_manifest(const Workspace& ws) {
  if (!fs::exists(ws.manifest())) return {};
  return manifest_from_json(json::parse(read_file(ws.manifest().string())));
}

// First output whose file is missing or whose bytes no longer match the recorded hash.
inline std::optional<std::string> first_stale_output(const Workspace& ws, const StageRecord& r) {
  for (const auto& [rel, hash] : r.outputs) {
    const auto p = ws.root / rel;
    if (!fs::exists(p) || sha256_file(p.string()) != hash) return rel;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- stages

struct Context {
  Workspace ws;
  PipelineConfig cfg;
  std::size_t threads = 1;
  std::ostream* log = &std::cerr;
  bool force = false;
};

struct StageResult {
  std::vector<fs::path> outputs;
};

struct Stage {
  std::string name;
  std::vector<std::string> deps;
  std::function<json(const PipelineConfig&)> config_part;
  std::function<StageResult(Context&)> run;
};

struct StageOutcome {
  std::string name;
  bool skipped = false;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::vector<TteInstance> load_instances(const Workspace& ws, const std::string& task) {
  return instances_from_csv(read_file(ws.instances(task).string()));
}

inline std::map<std::string, const PatientRecord*> by_id(const std::vector<PatientRecord>& cohort) {
  std::map<std::string, const PatientRecord*> m;
  for (const auto& p : cohort) m.emplace(p.patient_id, &p);
  return m;
}

inline const PatientRecord& lookup(const std::map<std::string, const PatientRecord*>& m, const std::string& id) {
  const auto it = m.find(id);
  if (it == m.end()) fail(ErrorKind::Validation, "unknown patient id '" + id + "'");
  return *it->second;
}

struct Embeddings {
  std::vector<std::string> ids;
  std::vector<std::int64_t> snapshots;
  std::vector<DenseVec> rows;
};

inline std::string serialize_embeddings(const std::string& task, const Embeddings& e) {
  json meta = {{"kind", "embeddings"}, {"task", task}, {"ids", e.ids}, {"snapshot_min", e.snapshots}};
  return enc::write_tensor_container(meta, {{"X", rows_to_matrix(e.rows)}});
}

inline Embeddings load_embeddings(const Workspace& ws, const std::string& task) {
  auto [meta, tensors] = enc::read_tensor_container(read_file(ws.embeddings(task).string()));
  require(meta.value("kind", std::string()) == "embeddings", "not an embeddings container");
  Embeddings e;
  e.ids = meta.at("ids").get<std::vector<std::string>>();
  e.snapshots = meta.at("snapshot_min").get<std::vector<std::int64_t>>();
  const enc::Mat& X = tensors.at(0).value;
  require(static_cast<std::size_t>(X.rows()) == e.ids.size(), "embeddings: row count does not match ids");
  for (Eigen::Index r = 0; r < X.rows(); ++r) e.rows.emplace_back(X.row(r).data(), X.row(r).data() + X.cols());
  return e;
}


inline TaskData task_data(const Workspace& ws, const std::string& task, std::string_view model,
                          const std::vector<PatientRecord>& cohort) {
  const auto xs = load_instances(ws, task);
  std::vector<DenseVec> rows;
  if (model == kEmbeddingModel) {
    auto e = load_embeddings(ws, task);
    require(e.ids.size() == xs.size(), "embeddings for task '" + task + "' do not match its instances; rerun embed");
    rows = std::move(e.rows);
  } else {
    const auto ids = by_id(cohort);
    for (const auto& x : xs) rows.push_back(age_sex_row(x, lookup(ids, x.patient_id)));
  }
  return split_task(xs, rows);
}

inline enc::Checkpoint load_checkpoint(const Workspace& ws) { return enc::load_checkpoint(ws.checkpoint().string()); }

inline std::vector<PatientRecord> load_tokenized(const Workspace& ws) { return load_cohort(ws.tokenized().string()); }

}  // namespace detail

inline StageResult run_generate(Context& c) {
  auto cfg = synth::cohort_config_from_json(c.cfg.cohort);
  *c.log << "[generate] " << cfg.n_patients << " patients, seed " << cfg.seed << "\n";
  const auto g = synth::generate_cohort(cfg);
  write_artifact(c.ws.raw_cohort(), to_columnar(g.patients));
  write_artifact(c.ws.truth(), synth::to_json(g.manifest).dump());
  return {{c.ws.raw_cohort(), c.ws.truth()}};
}

inline StageResult run_tokenize(Context& c) {
  const auto cohort = load_cohort(c.ws.raw_cohort().string());
  std::vector<PatientRecord> train;
  for (const auto& p : cohort) {
    if (split_assign(p.patient_id, c.cfg.ratios, c.cfg.seed) == Split::Train) train.push_back(p);
  }
  const auto t = tok::fit_tokenizer(train, {}, {}, c.threads);
  tok::TokenizeStats stats;
  const auto out = tok::tokenize_cohort(cohort, t, &stats);
  *c.log << "[tokenize] vocabulary " << t.vocab.size() << " tokens from " << train.size() << " training patients; dropped "
         << stats.dropped_unknown << " unknown events\n";
  write_artifact(c.ws.vocab(), to_json(t.vocab).dump(1));
  write_artifact(c.ws.specs(), tok::specs_to_json(t).dump(1));
  write_artifact(c.ws.tokenized(), to_columnar(out));
  return {{c.ws.vocab(), c.ws.specs(), c.ws.tokenized()}};
}

inline StageResult run_pretrain(Context& c) {
  const auto cohort = detail::load_tokenized(c.ws);
  const auto vocab = vocabulary_from_json(json::parse(read_file(c.ws.vocab().string())));
  std::vector<PatientRecord> train, val;
  for (const auto& p : cohort) {
    const auto s = split_assign(p.patient_id, c.cfg.ratios, c.cfg.seed);
    if (s == Split::Train) train.push_back(p);
    if (s == Split::Val) val.push_back(p);
  }
  auto ecfg = c.cfg.encoder;
  if (!cohort.empty()) ecfg.B = static_cast<int>(cohort.front().demographics.ethnicity_vec.size());
  for (const auto& p : cohort) {
    for (const auto& e : p.events) {
      if (is_unstructured(e.modality)) ecfg.d_k[enc::dense_slot(e.modality)] = static_cast<int>(e.dense().size());
    }
  }
  std::string curve = "iter,l_struct,l_unstruct\n";
  auto* log = c.log;
  const auto res = enc::pretrain(train, val, ecfg, vocab, c.threads, [&](int it, double loss, const enc::ValPoint* v) {
    if (!v) return;
    *log << "[pretrain] iter " << it << " train " << format_double(loss, 5) << " val_struct " << format_double(v->l_struct, 5)
         << "\n";
    curve += std::to_string(v->iter) + ',' + format_double(v->l_struct) + ',' + format_double(v->l_unstruct) + '\n';
  });
  enc::Checkpoint ck;
  ck.cfg = ecfg;
  ck.params = res.params;
  ck.vocab = vocab;
  ck.extra = {{"best_iter", res.best_iter}, {"train_patients", train.size()}, {"val_patients", val.size()}};
  write_artifact(c.ws.checkpoint(), enc::serialize_checkpoint(ck));
  write_artifact(c.ws.curve(), curve);
  return {{c.ws.checkpoint(), c.ws.curve()}};
}

inline StageResult run_curate(Context& c) {
  require(!c.cfg.tasks.empty(), "curate: the pipeline config lists no tasks");
  const auto cohort = load_cohort(c.ws.raw_cohort().string());
  curation::CurationOptions opt;
  opt.seed = c.cfg.seed;
  opt.ratios = c.cfg.ratios;
  opt.split_seed = c.cfg.seed;
  const auto res = curation::curate_tasks(cohort, c.cfg.tasks, opt, static_cast<int>(c.threads));
  StageResult out;
  std::string summary = "task,tau_days,n,events,incidence_pct\n";
  for (std::size_t k = 0; k < res.size(); ++k) {
    const auto& t = c.cfg.tasks[k];
    write_artifact(c.ws.instances(t.name), instances_to_csv(res[k].instances));
    write_artifact(c.ws.curation_log(t.name), curation::to_json(res[k].log).dump(1));
    out.outputs.push_back(c.ws.instances(t.name));
    out.outputs.push_back(c.ws.curation_log(t.name));
    summary += t.name + ',' + std::to_string(t.tau_days) + ',' + std::to_string(res[k].log.final_n) + ',' +
               std::to_string(res[k].log.final_events) + ',' + format_double(curation::incidence(res[k].instances, t.tau_days), 6) +
               '\n';
    *c.log << "[curate] " << t.name << ": " << res[k].log.final_n << " instances, " << res[k].log.final_events << " events\n";
  }
  write_artifact(c.ws.root / "tasks" / "summary.csv", summary);
  out.outputs.push_back(c.ws.root / "tasks" / "summary.csv");
  return out;
}

inline StageResult run_embed(Context& c) {
  const auto cohort = detail::load_tokenized(c.ws);
  const auto ids = detail::by_id(cohort);
  const auto ck = detail::load_checkpoint(c.ws);
  StageResult out;
  for (const auto& t : c.cfg.tasks) {
    const auto xs = detail::load_instances(c.ws, t.name);
    detail::Embeddings e;
    std::vector<const PatientRecord*> ps;
    for (const auto& x : xs) {
      ps.push_back(&detail::lookup(ids, x.patient_id));
      e.ids.push_back(x.patient_id);
      e.snapshots.push_back(x.snapshot_min);
    }
    e.rows = enc::embed_patients(ps, e.snapshots, ck.params, ck.cfg, c.cfg.prompt, c.threads);
    write_artifact(c.ws.embeddings(t.name), detail::serialize_embeddings(t.name, e));
    out.outputs.push_back(c.ws.embeddings(t.name));
    *c.log << "[embed] " << t.name << ": " << xs.size() << " embeddings\n";
  }
  return out;
}

inline StageResult run_fit(Context& c) {
  const auto cohort = detail::load_tokenized(c.ws);
  StageResult out;
  for (const auto& t : c.cfg.tasks) {
    for (auto model : {kEmbeddingModel, kAgeSexModel}) {
      const auto d = detail::task_data(c.ws, t.name, model, cohort);
      const auto m = fit_model(std::string(model), d, model == kEmbeddingModel, c.cfg.fit);
      write_artifact(c.ws.model(t.name, model), to_json(m).dump(1));
      out.outputs.push_back(c.ws.model(t.name, model));
      *c.log << "[fit] " << t.name << "/" << model << ": lambda " << format_double(m.cox.lambda, 4) << ", "
             << m.cox.diagnostics.iterations << " Newton iterations\n";
    }
  }
  return out;
}

inline FittedModel load_model(const Workspace& ws, const std::string& task, std::string_view model) {
  const auto p = ws.model(task, model);
  if (!fs::exists(p)) fail(ErrorKind::Dependency, "missing model " + ws.rel(p) + "; run the 'fit' stage");
  return fitted_model_from_json(json::parse(read_file(p.string())));
}

// Metrics CSV/JSON plus the figure families: grouped AUROC bars, per-task KM and calibration plots.
inline StageResult run_evaluate(Context& c) {
  const auto cohort = detail::load_tokenized(c.ws);
  EvalOptions eo{c.cfg.n_bootstraps, c.cfg.seed, c.threads};
  std::vector<ReportRow> rows;
  json all = json::array();
  std::vector<report::BarGroup> bars;
  StageResult out;
  for (const auto& t : c.cfg.tasks) {
    const double tau = t.tau_days;
    std::vector<ModelScores> scores;
    report::BarGroup g;
    g.label = t.name;
    json task_json = {{"task", t.name}, {"tau_days", t.tau_days}, {"models", json::array()}};
    TaskData d_any;
    for (auto model : {kEmbeddingModel, kAgeSexModel}) {
      const auto d = detail::task_data(c.ws, t.name, model, cohort);
      const auto m = load_model(c.ws, t.name, model);
      auto s = score_model(m, d, tau);
      const auto reports = evaluate_model(s, d, tau, eo);
      json mj = {{"model", model}, {"metrics", json::array()}};
      for (const auto& r : reports) {
        rows.push_back({t.name, std::string(model), r});
        mj["metrics"].push_back(metrics::to_json(r));
        if (r.metric == "auroc") g.bars.push_back({std::string(model), r.point, r.ci_low, r.ci_high});
      }
      task_json["models"].push_back(mj);
      scores.push_back(std::move(s));
      d_any = d;
    }
    const double p = auroc_p_value(scores[0], scores[1], d_any, tau, eo);
    task_json["auroc_p_value"] = p;
    g.significant = p <= 0.05;
    bars.push_back(g);
    all.push_back(task_json);

    // KM curve of the test split and calibration of the embedding model.
    const auto km = surv::kaplan_meier(d_any.test.instances);
    report::Series ks{"test KM", {0.0}, {1.0}, true, false};
    for (std::size_t i = 0; i < km.times.size(); ++i) {
      ks.x.push_back(km.times[i]);
      ks.y.push_back(km.survival[i]);
    }
    const double x_max = std::max(tau, ks.x.back() > 0 ? std::min(ks.x.back(), 3.0 * tau) : tau);
    const auto km_svg = report::line_plot({t.name + ": Kaplan-Meier (test)", "days from snapshot", "S(t)", 0, x_max, 0, 1, false, {tau}}, {ks});
    write_artifact(c.ws.reports() / ("km_" + t.name + ".svg"), km_svg);
    out.outputs.push_back(c.ws.reports() / ("km_" + t.name + ".svg"));
    try {
      const auto cal = metrics::calibration_indices(scores[0].test_prob, d_any.test.survival(), tau);
      double hi = 1e-3;
      for (double v : cal.mean_pred) hi = std::max(hi, v);
      for (double v : cal.observed) hi = std::max(hi, v);
      const auto cal_svg = report::line_plot({t.name + ": calibration at tau", "predicted risk", "observed risk", 0, hi, 0, hi, true, {}},
                                             {{std::string(kEmbeddingModel), cal.mean_pred, cal.observed, false, true}});
      write_artifact(c.ws.reports() / ("calibration_" + t.name + ".svg"), cal_svg);
      out.outputs.push_back(c.ws.reports() / ("calibration_" + t.name + ".svg"));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Undefined) throw;
      *c.log << "[evaluate] " << t.name << ": calibration undefined (" << e.what() << ")\n";
    }
    *c.log << "[evaluate] " << t.name << ": AUROC " << format_double(scores.size() ? g.bars[0].value : 0.0, 4) << " vs age-sex "
           << format_double(g.bars.size() > 1 ? g.bars[1].value : 0.0, 4) << ", p = " << format_double(p, 3) << "\n";
  }
  write_artifact(c.ws.reports() / "metrics.csv", metrics_csv(rows));
  write_artifact(c.ws.reports() / "metrics.json", all.dump(1));
  write_artifact(c.ws.reports() / "auroc.svg", report::grouped_bars("AUROC at tau by task", "AUROC", bars, 0.0, 1.0));
  out.outputs.push_back(c.ws.reports() / "metrics.csv");
  out.outputs.push_back(c.ws.reports() / "metrics.json");
  out.outputs.push_back(c.ws.reports() / "auroc.svg");
  return out;
}

// Cohort members: patients with every cohort code strictly before the as-of time.
inline std::vector<std::string> retrieval_cohort(const std::vector<PatientRecord>& cohort, const RetrievalConfig& r,
                                                 std::int64_t as_of_epoch) {
  std::vector<std::string> ids;
  for (const auto& p : cohort) {
    const auto t = retrieval::embedding_time(p, as_of_epoch);
    bool all = true;
    for (const auto& code : r.cohort_codes) {
      all = all && std::any_of(p.events.begin(), p.events.end(), [&](const EventRecord& e) { return e.code == code && e.time_min <= t; });
    }
    if (all) ids.push_back(p.patient_id);
  }
  return ids;
}

inline StageResult run_retrieve(Context& c) {
  const auto cohort = detail::load_tokenized(c.ws);
  const auto ck = detail::load_checkpoint(c.ws);
  const auto as_of = parse_date_epoch_min(c.cfg.retrieval.as_of);
  const auto idx = retrieval::build_index(cohort, ck.params, ck.cfg, as_of, c.cfg.prompt, static_cast<int>(c.threads));
  write_artifact(c.ws.index(), retrieval::serialize_index(idx));
  const auto members = retrieval_cohort(cohort, c.cfg.retrieval, as_of);
  json rep = {{"as_of", c.cfg.retrieval.as_of}, {"cohort_codes", c.cfg.retrieval.cohort_codes}, {"cohort_size", members.size()},
              {"index_size", idx.size()}};
  if (members.size() >= static_cast<std::size_t>(c.cfg.retrieval.n_folds)) {
    const auto r = retrieval::evaluate_retrieval(idx, members, c.cfg.retrieval.k, c.cfg.retrieval.n_folds, c.cfg.seed,
                                                 static_cast<int>(c.threads));
    rep["k"] = r.k;
    rep["mean_accuracy"] = r.mean;
    rep["sd_accuracy"] = r.sd;
    rep["small_cohort"] = r.small_cohort;
    rep["folds"] = json::array();
    for (const auto& f : r.folds) {
      rep["folds"].push_back({{"queries", f.queries}, {"hits", f.hits}, {"accuracy", f.accuracy}, {"prevalence", f.prevalence},
                              {"p_value", f.p_value}});
    }
    *c.log << "[retrieve] cohort " << members.size() << " of " << idx.size() << ": Acc@" << r.k << " " << format_double(r.mean, 4)
           << "\n";
  } else {
    rep["note"] = "cohort smaller than the number of folds; retrieval accuracy not evaluated";
    *c.log << "[retrieve] cohort of " << members.size() << " is too small to evaluate\n";
  }
  write_artifact(c.ws.retrieval_report(), rep.dump(1));
  return {{c.ws.index(), c.ws.retrieval_report()}};
}

inline const std::vector<Stage>& stages() {
  static const std::vector<Stage> s = {
      {"generate", {}, [](const PipelineConfig& c) { return c.cohort; }, run_generate},
      {"tokenize",
       {"generate"},
       [](const PipelineConfig& c) { return json{{"seed", c.seed}, {"split", to_json(c)["split"]}}; },
       run_tokenize},
      {"pretrain", {"tokenize"}, [](const PipelineConfig& c) { return enc::to_json(c.encoder); }, run_pretrain},
      {"curate",
       {"generate"},
       [](const PipelineConfig& c) {
         const auto j = to_json(c);
         return json{{"seed", c.seed}, {"split", j["split"]}, {"tasks", j["tasks"]}};
       },
       run_curate},
      {"embed", {"tokenize", "pretrain", "curate"}, [](const PipelineConfig& c) { return json{{"prompt", to_string(c.prompt)}}; }, run_embed},
      {"fit", {"tokenize", "curate", "embed"}, [](const PipelineConfig& c) { return json{{"seed", c.seed}, {"fit", to_json(c)["fit"]}}; }, run_fit},
      {"evaluate",
       {"tokenize", "curate", "embed", "fit"},
       [](const PipelineConfig& c) { return json{{"seed", c.seed}, {"n_bootstraps", c.n_bootstraps}}; },
       run_evaluate},
      {"retrieve",
       {"tokenize", "pretrain"},
       [](const PipelineConfig& c) { return json{{"seed", c.seed}, {"prompt", to_string(c.prompt)}, {"retrieval", to_json(c.retrieval)}}; },
       run_retrieve},
  };
  return s;
}

inline const Stage& stage(const std::string& name) {
  for (const auto& s : stages()) {
    if (s.name == name) return s;
  }
  fail(ErrorKind::Validation, "unknown stage '" + name + "'");
}

// Hash of a completed stage's outputs, used as input to downstream stages.
inline std::string output_digest(const StageRecord& r) {
  std::string acc;
  for (const auto& [p, h] : r.outputs) acc += p + '=' + h + '\n';
  return sha256_hex(acc);
}

// Every upstream stage of `deps`, in pipeline order.
inline std::vector<std::string> dependency_closure(const std::vector<std::string>& deps) {
  std::set<std::string> seen;
  std::function<void(const std::string&)> visit = [&](const std::string& d) {
    if (!seen.insert(d).second) return;
    for (const auto& u : stage(d).deps) visit(u);
  };
  for (const auto& d : deps) visit(d);
  std::vector<std::string> out;
  for (const auto& s : stages()) {
    if (seen.count(s.name)) out.push_back(s.name);
  }
  return out;
}

// Verifies the transitive dependencies of a stage in pipeline order, so the error names the
// earliest stage that must be rerun.
inline void check_dependencies(const Workspace& ws, const ExperimentManifest& m, const Stage& s) {
  for (const auto& d : dependency_closure(s.deps)) {
    const auto it = m.stages.find(d);
    if (it == m.stages.end()) {
      fail(ErrorKind::Dependency, "stage '" + s.name + "' needs stage '" + d + "', which has not run; run `chronoscope " + d + "` first");
    }
    if (auto stale = first_stale_output(ws, it->second)) {
      fail(ErrorKind::Dependency, "stage '" + s.name + "' needs artifact " + *stale + " from stage '" + d +
                                      "', which is missing or modified; rerun `chronoscope " + d + "`");
    }
  }
}

inline std::string input_hash(const ExperimentManifest& m, const Stage& s, const PipelineConfig& cfg) {
  json j = {{"stage", s.name}, {"tool_version", kToolVersion}, {"config", s.config_part(cfg)}, {"upstream", json::object()}};
  for (const auto& d : s.deps) j["upstream"][d] = output_digest(m.stages.at(d));
  return sha256_hex(j.dump());
}

// Runs one stage unless its inputs are unchanged and its outputs intact.
inline StageOutcome run_stage(Context& c, const std::string& name) {
  const Stage& s = stage(name);
  auto m = load_manifest(c.ws);
  m.seed = c.cfg.seed;
  check_dependencies(c.ws, m, s);
  const auto h = input_hash(m, s, c.cfg);
  if (!c.force) {
    if (auto it = m.stages.find(name); it != m.stages.end() && it->second.input_hash == h && !first_stale_output(c.ws, it->second)) {
      *c.log << "[" << name << "] up to date, skipped\n";
      return {name, true, 0.0};
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  StageResult r;
  try {
    r = s.run(c);
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + name + "' failed: " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Io, "stage '" + name + "' failed: " + e.what());
  }
  StageRecord rec;
  rec.input_hash = h;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& p : r.outputs) rec.outputs[c.ws.rel(p)] = sha256_file(p.string());
  m.stages[name] = rec;
  write_artifact(c.ws.manifest(), to_json(m).dump(1));
  return {name, false, rec.wall_seconds};
}

// All stages in dependency order.
inline std::vector<StageOutcome> run_pipeline(Context& c) {
  std::vector<StageOutcome> out;
  for (const auto& s : stages()) out.push_back(run_stage(c, s.name));
  return out;
}

// Verifies every artifact recorded in the manifest; returns the corrupted or missing paths.
inline std::vector<std::string> verify_manifest(const Workspace& ws) {
  std::vector<std::string> bad;
  for (const auto& [name, r] : load_manifest(ws).stages) {
    for (const auto& [rel, hash] : r.outputs) {
      const auto p = ws.root / rel;
      if (!fs::exists(p) || sha256_file(p.string()) != hash) bad.push_back(rel);
    }
  }
  return bad;
}


// ---------------------------------------------------------------- queries on a finished workspace

inline void require_stage(const Workspace& ws, const std::string& consumer, const std::vector<std::string>& deps) {
  check_dependencies(ws, load_manifest(ws), {consumer, deps, nullptr, nullptr});
}

// k nearest index members of a patient, excluding the patient itself.
inline std::vector<std::pair<std::string, double>> query_patient(const Workspace& ws, const std::string& patient_id, std::size_t k) {
  require_stage(ws, "retrieve query", {"retrieve"});
  const auto idx = retrieval::deserialize_index(read_file(ws.index().string()));
  const auto it = std::find(idx.ids.begin(), idx.ids.end(), patient_id);
  if (it == idx.ids.end()) fail(ErrorKind::Validation, "patient '" + patient_id + "' is not in the index");
  const auto q = retrieval::row_vector(idx, static_cast<std::size_t>(it - idx.ids.begin()));
  require(k + 1 <= idx.size(), "k exceeds the index size");
  std::vector<std::pair<std::string, double>> out;
  for (const auto& id : retrieval::knn_query(idx, q, k + 1)) {
    if (id == patient_id || out.size() == k) continue;
    const auto r = static_cast<std::size_t>(std::find(idx.ids.begin(), idx.ids.end(), id) - idx.ids.begin());
    const auto v = retrieval::row_vector(idx, r);
    double dot = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) dot += v[j] * q[j];
    out.emplace_back(id, dot);
  }
  return out;
}

// Encoder, PCA and Cox head of one task, loaded from the workspace.
struct LoadedTaskModel {
  enc::Checkpoint ck;
  FittedModel fitted;
  attr::TaskModel model;
};

inline std::unique_ptr<LoadedTaskModel> load_task_model(const Workspace& ws, const PipelineConfig& cfg, const std::string& task) {
  require_stage(ws, "explain", {"tokenize", "pretrain", "curate", "embed", "fit"});
  const auto t = std::find_if(cfg.tasks.begin(), cfg.tasks.end(), [&](const TaskSpec& s) { return s.name == task; });
  if (t == cfg.tasks.end()) fail(ErrorKind::Validation, "unknown task '" + task + "'");
  auto m = std::make_unique<LoadedTaskModel>();
  m->ck = enc::load_checkpoint(ws.checkpoint().string());
  m->fitted = load_model(ws, task, kEmbeddingModel);
  m->model.encoder = &m->ck.params;
  m->model.cfg = m->ck.cfg;
  m->model.prompt = cfg.prompt;
  if (m->fitted.use_pca) m->model.pca = m->fitted.pca;
  m->model.cox = m->fitted.cox;
  m->model.tau_days = t->tau_days;
  return m;
}

// Human-readable label of an attribution key.
inline std::string describe_key(const Vocabulary& v, const std::string& key) {
  if (!key.starts_with("tok:")) return key;
  const auto& e = v.entry(TokenId{static_cast<std::uint32_t>(std::stoul(key.substr(4)))});
  return e.qualifier.empty() ? e.code : e.code + "=" + e.qualifier;
}

struct ExplainOptions {
  int n_steps = 256;
  std::size_t max_patients = 20;
  std::size_t top = 20;
  double prevalence_floor = 0.025;
};

// Population importance over the top-risk quartile of the Test split.
inline std::vector<fs::path> explain_population(Context& c, const std::string& task, const ExplainOptions& opt) {
  const auto m = load_task_model(c.ws, c.cfg, task);
  const auto cohort = detail::load_tokenized(c.ws);
  const auto ids = detail::by_id(cohort);
  const auto d = detail::task_data(c.ws, task, kEmbeddingModel, cohort);
  require(!d.test.instances.empty(), "explain: empty test split");
  const auto eta = m->fitted.log_hazards(d.test.X());
  auto top = attr::top_quartile(eta);
  std::stable_sort(top.begin(), top.end(), [&](std::size_t a, std::size_t b) { return eta[a] > eta[b]; });
  if (top.size() > opt.max_patients) top.resize(opt.max_patients);
  std::vector<const PatientRecord*> ps;
  std::vector<std::int64_t> as_of;
  std::vector<bool> event;
  for (auto i : top) {
    const auto& x = d.test.instances[i];
    ps.push_back(&detail::lookup(ids, x.patient_id));
    as_of.push_back(x.snapshot_min);
    event.push_back(x.event && x.duration_days <= m->model.tau_days);
  }
  const auto pas = attr::explain_patients(m->model, ps, as_of, event, opt.n_steps, c.threads);
  const auto imp = attr::aggregate_attributions(pas, opt.prevalence_floor);
  std::string csv = "key,label,mean_score,n_patients,prevalence_events,prevalence_censored\n";
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const auto& r : imp) {
    const auto label = describe_key(m->ck.vocab, r.key);
    csv += r.key + ',' + label + ',' + format_double(r.mean_score) + ',' + std::to_string(r.n_patients) + ',' +
           format_double(r.prevalence_events) + ',' + format_double(r.prevalence_censored) + '\n';
    if (labels.size() < opt.top) {
      labels.push_back(label);
      values.push_back(r.mean_score);
    }
  }
  std::string gaps = "patient_id,snapshot_min,score,baseline_score,total_attribution,completeness_gap\n";
  for (std::size_t i = 0; i < pas.size(); ++i) {
    gaps += pas[i].patient_id + ',' + std::to_string(as_of[i]) + ',' + format_double(pas[i].score) + ',' +
            format_double(pas[i].baseline_score) + ',' + format_double(pas[i].total()) + ',' + format_double(pas[i].completeness_gap()) +
            '\n';
  }
  const auto dir = c.ws.root / "explain" / task;
  write_artifact(dir / "population.csv", csv);
  write_artifact(dir / "patients.csv", gaps);
  write_artifact(dir / "population.svg", report::horizontal_bars(task + ": mean normalized attribution", labels, values));
  *c.log << "[explain] " << task << ": " << pas.size() << " high-risk patients, " << imp.size() << " features above the prevalence floor\n";
  return {dir / "population.csv", dir / "patients.csv", dir / "population.svg"};
}

// Snapshot of a patient's instance in a task.
inline const TteInstance& patient_instance(const std::vector<TteInstance>& xs, const std::string& patient_id) {
  const auto it = std::find_if(xs.begin(), xs.end(), [&](const TteInstance& x) { return x.patient_id == patient_id; });
  if (it == xs.end()) fail(ErrorKind::Validation, "patient '" + patient_id + "' has no instance in this task");
  return *it;
}

inline std::vector<fs::path> explain_patient_ig(Context& c, const std::string& task, const std::string& patient_id,
                                                const ExplainOptions& opt) {
  const auto m = load_task_model(c.ws, c.cfg, task);
  const auto cohort = detail::load_tokenized(c.ws);
  const auto& p = detail::lookup(detail::by_id(cohort), patient_id);
  const auto& x = patient_instance(detail::load_instances(c.ws, task), patient_id);
  const auto pa = attr::explain_patient(m->model, p, x.snapshot_min, opt.n_steps);
  std::string csv = "key,label,modality,time_min,attribution\n";
  for (const auto& t : pa.tokens) {
    csv += t.key + ',' + describe_key(m->ck.vocab, t.key) + ',' + std::string(to_string(t.modality)) + ',' + std::to_string(t.time_min) +
           ',' + format_double(t.a) + '\n';
  }
  const auto pooled = attr::pool_and_normalize(pa);
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(pooled[a].normalized) > std::abs(pooled[b].normalized); });
  std::vector<std::string> labels;
  std::vector<double> values;
  for (std::size_t i = 0; i < std::min(order.size(), opt.top); ++i) {
    labels.push_back(describe_key(m->ck.vocab, pooled[order[i]].key));
    values.push_back(pooled[order[i]].normalized);
  }
  const auto dir = c.ws.root / "explain" / task;
  write_artifact(dir / (patient_id + "_ig.csv"), csv);
  write_artifact(dir / (patient_id + "_ig.svg"), report::horizontal_bars(patient_id + ": integrated gradients", labels, values));
  *c.log << "[explain] " << patient_id << ": score " << format_double(pa.score, 5) << ", completeness gap "
         << format_double(100.0 * pa.completeness_gap(), 3) << "%\n";
  return {dir / (patient_id + "_ig.csv"), dir / (patient_id + "_ig.svg")};
}

inline std::vector<fs::path> explain_patient_loto(Context& c, const std::string& task, const std::string& patient_id, double window_days) {
  require(window_days > 0, "window must be positive");
  const auto m = load_task_model(c.ws, c.cfg, task);
  const auto cohort = detail::load_tokenized(c.ws);
  const auto& p = detail::lookup(detail::by_id(cohort), patient_id);
  const auto& x = patient_instance(detail::load_instances(c.ws, task), patient_id);
  const auto t1 = x.snapshot_min;
  const auto t0 = t1 - static_cast<std::int64_t>(window_days * static_cast<double>(kMinutesPerDay));
  const auto deltas = attr::loto_deltas(p, t0, t1, attr::risk_function(m->model));
  std::string csv = "event_index,time_min,modality,code,delta\n";
  for (const auto& d : deltas) {
    csv += std::to_string(d.event_index) + ',' + std::to_string(d.time_min) + ',' + std::string(to_string(d.modality)) + ',' + d.code +
           ',' + format_double(d.delta) + '\n';
  }
  const auto path = c.ws.root / "explain" / task / (patient_id + "_loto.csv");
  write_artifact(path, csv);
  return {path};
}

inline std::vector<fs::path> explain_trajectory(Context& c, const std::string& task, const std::string& patient_id, int n_points) {
  require(n_points >= 2, "trajectory needs at least two points");
  const auto m = load_task_model(c.ws, c.cfg, task);
  const auto cohort = detail::load_tokenized(c.ws);
  const auto& p = detail::lookup(detail::by_id(cohort), patient_id);
  require(!p.events.empty(), "patient '" + patient_id + "' has no events");
  const auto lo = p.events.front().time_min, hi = p.events.back().time_min;
  std::vector<std::int64_t> grid;
  for (int i = 0; i < n_points; ++i) grid.push_back(lo + (hi - lo) * i / (n_points - 1));
  const auto tr = attr::risk_trajectory(m->model, p, grid);
  std::string csv = "as_of_min,info_min,risk\n";
  report::Series s{"risk at tau", {}, {}, true, false};
  double y_lo = tr.points.front().risk, y_hi = y_lo;
  for (const auto& q : tr.points) {
    csv += std::to_string(q.as_of_min) + ',' + std::to_string(q.info_min) + ',' + format_double(q.risk) + '\n';
    s.x.push_back(static_cast<double>(q.as_of_min) / kMinutesPerYear);
    s.y.push_back(q.risk);
    y_lo = std::min(y_lo, q.risk);
    y_hi = std::max(y_hi, q.risk);
  }
  std::vector<double> marks;
  for (const auto& e : tr.markers) {
    if (e.code == synth::kAdmitCode) marks.push_back(static_cast<double>(e.time_min) / kMinutesPerYear);
  }
  const double pad = std::max(1e-6, 0.05 * (y_hi - y_lo));
  const double x_lo = static_cast<double>(lo) / kMinutesPerYear, x_hi = std::max(x_lo + 1e-3, static_cast<double>(hi) / kMinutesPerYear);
  const auto dir = c.ws.root / "explain" / task;
  write_artifact(dir / (patient_id + "_trajectory.csv"), csv);
  write_artifact(dir / (patient_id + "_trajectory.svg"),
                 report::line_plot({patient_id + ": risk trajectory (dashed: admissions)", "age (years)", "risk", x_lo, x_hi, y_lo - pad,
                                    y_hi + pad, false, marks},
                                   {s}));
  return {dir / (patient_id + "_trajectory.csv"), dir / (patient_id + "_trajectory.svg")};
}

}  // namespace chronoscope::cli
