// chronoscope: command-line front end over a cache-directory workspace.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "chronoscope/cli/pipeline.hpp"

using namespace chronoscope;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string cache_dir;
  std::string config;
  bool force = false;
  int iterations = 0;  // pretrain override, stored with the config
};

fs::path cache_root(const Globals& g) {
  if (!g.cache_dir.empty()) return g.cache_dir;
  if (const char* env = std::getenv("CHRONOSCOPE_CACHE_DIR"); env && *env) return env;
  return "chronoscope-cache";
}

// --config wins; otherwise the config stored in the workspace by an earlier run; otherwise defaults.
cli::Context make_context(const Globals& g) {
  cli::Context c;
  c.ws.root = cache_root(g);
  const auto stored = c.ws.root / "config.json";
  json j = json::object();
  if (!g.config.empty()) {
    j = json::parse(read_file(g.config));
  } else if (fs::exists(stored)) {
    j = json::parse(read_file(stored.string()));
  }
  c.cfg = cli::pipeline_config_from_json(j);
  if (g.seed) c.cfg.apply_seed(*g.seed);
  if (g.iterations > 0) c.cfg.encoder.total_iters = g.iterations;
  c.threads = resolve_threads(g.threads);
  c.force = g.force;
  cli::write_artifact(stored, cli::to_json(c.cfg).dump(1));
  return c;
}

void print_outcome(const cli::StageOutcome& o) {
  std::cout << o.name << ',' << (o.skipped ? "skipped" : "ran") << ',' << format_double(o.wall_seconds, 4) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chronoscope: synthetic EHR cohorts, temporal encoder pretraining and time-to-event evaluation"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--threads", g.threads, "worker threads (0: CHRONOSCOPE_THREADS or hardware)")->check(CLI::NonNegativeNumber);
  app.add_option("--cache-dir", g.cache_dir, "workspace directory (default: CHRONOSCOPE_CACHE_DIR or ./chronoscope-cache)");
  app.add_option("--config", g.config, "pipeline config JSON")->check(CLI::ExistingFile);
  app.add_flag("--force", g.force, "rerun stages even when their inputs are unchanged");

  std::string out_path;
  auto* generate = app.add_subcommand("generate", "simulate the synthetic cohort");
  generate->add_option("--out", out_path, "also export the cohort (.ndjson or columnar .bin)");

  app.add_subcommand("tokenize", "fit the tokenizer on Train and tokenize the cohort");
  auto* pretrain = app.add_subcommand("pretrain", "masked-modeling pretraining of the encoder");
  pretrain->add_option("--iterations", g.iterations, "override the configured iteration count")->check(CLI::PositiveNumber);
  app.add_subcommand("curate", "build time-to-event instances for every configured task");
  app.add_subcommand("embed", "embed every task instance at its snapshot");
  app.add_subcommand("fit", "fit the Cox heads (embedding and age-sex) for every task");
  app.add_subcommand("evaluate", "bootstrap metrics, CSV summary and SVG figures");

  std::string query_patient;
  std::size_t query_k = 5;
  auto* retrieve = app.add_subcommand("retrieve", "build the patient index and evaluate cohort retrieval");
  retrieve->add_option("--query-patient", query_patient, "print the nearest neighbours of this patient instead");
  retrieve->add_option("--k", query_k, "neighbours to return")->check(CLI::PositiveNumber);

  std::string task, patient, mode = "ig";
  cli::ExplainOptions eo;
  double window_days = 365.0;
  int points = 50;
  auto* explain = app.add_subcommand("explain", "attributions for a task's Cox-on-embedding model");
  explain->add_option("--task", task, "task name")->required();
  explain->add_option("--patient", patient, "explain one patient (default: top-risk quartile of Test)");
  explain->add_option("--mode", mode, "ig | loto | trajectory")->check(CLI::IsMember({"ig", "loto", "trajectory"}));
  explain->add_option("--steps", eo.n_steps, "integration steps")->check(CLI::PositiveNumber);
  explain->add_option("--max-patients", eo.max_patients, "cap on explained high-risk patients")->check(CLI::PositiveNumber);
  explain->add_option("--window-days", window_days, "LOTO window before the snapshot");
  explain->add_option("--points", points, "trajectory grid size");

  app.add_subcommand("pipeline", "run every stage in dependency order");
  app.add_subcommand("verify", "check every manifest artifact against its recorded hash");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    auto c = make_context(g);
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "pipeline") {
      const auto outcomes = cli::run_pipeline(c);
      std::cout << "stage,status,wall_seconds\n";
      for (const auto& o : outcomes) print_outcome(o);
    } else if (name == "verify") {
      const auto bad = cli::verify_manifest(c.ws);
      for (const auto& b : bad) std::cout << "corrupted," << b << '\n';
      if (!bad.empty()) fail(ErrorKind::Dependency, std::to_string(bad.size()) + " artifact(s) fail hash verification");
      std::cout << "ok\n";
    } else if (name == "explain") {
      std::vector<fs::path> files;
      if (patient.empty()) {
        require(mode == "ig", "population explanations use --mode ig");
        files = cli::explain_population(c, task, eo);
      } else if (mode == "ig") {
        files = cli::explain_patient_ig(c, task, patient, eo);
      } else if (mode == "loto") {
        files = cli::explain_patient_loto(c, task, patient, window_days);
      } else {
        files = cli::explain_trajectory(c, task, patient, points);
      }
      for (const auto& f : files) std::cout << c.ws.rel(f) << '\n';
    } else if (name == "retrieve" && !query_patient.empty()) {
      std::cout << "patient_id,cosine\n";
      for (const auto& [id, s] : cli::query_patient(c.ws, query_patient, query_k)) std::cout << id << ',' << format_double(s, 6) << '\n';
    } else {
      const auto o = cli::run_stage(c, name);
      std::cout << "stage,status,wall_seconds\n";
      print_outcome(o);
      if (name == "generate" && !out_path.empty()) {
        const auto cohort = load_cohort(c.ws.raw_cohort().string());
        if (out_path.ends_with(".ndjson") || out_path.ends_with(".jsonl")) {
          save_cohort(out_path, cohort);
        } else {
          cli::write_artifact(fs::absolute(out_path), to_columnar(cohort));
        }
      }
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error: invalid JSON: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
