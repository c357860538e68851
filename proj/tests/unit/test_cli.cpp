#include <gtest/gtest.h>

#include <filesystem>

#include "chronoscope/cli/pipeline.hpp"

using namespace chronoscope;
using namespace chronoscope::cli;
namespace fs = std::filesystem;

namespace {

json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 0,
    "cohort": {"n_patients": 500},
    "encoder": {"E": 16, "n_heads": 2, "n_layers": 1, "max_seq": 32, "total_iters": 4, "val_every": 2, "val_patients": 16},
    "fit": {"pca_components": 5},
    "n_bootstraps": 10,
    "retrieval": {"cohort_codes": ["TRG-001"], "k": 3, "n_folds": 2},
    "tasks": [{
      "name": "onset",
      "category": "Onset",
      "tau_days": 730,
      "snapshot": {"kind": "discharge_after_visits", "min_prior_visits": 3},
      "endpoint": {"codes": ["END-ONSET"]}
    }]
  })");
}

struct TempWorkspace {
  fs::path root;
  explicit TempWorkspace(const std::string& name) : root(fs::temp_directory_path() / ("chronoscope_test_" + name)) {
    fs::remove_all(root);
  }
  ~TempWorkspace() { fs::remove_all(root); }
};

Context context(const fs::path& root, const json& cfg = tiny_config()) {
  static std::ostringstream sink;
  Context c;
  c.ws.root = root;
  c.cfg = pipeline_config_from_json(cfg);
  c.log = &sink;
  return c;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no chronoscope::Error thrown";
  return ErrorKind::Io;
}

}  // namespace

TEST(Report, EmptyResultsGiveHeaderOnlyCsv) { EXPECT_EQ(metrics_csv({}), metrics::csv_header()); }

TEST(Report, GroupedBarsStarSignificantGroupsAndAreDeterministic) {
  std::vector<report::BarGroup> g = {{"task_a", {{"chronoscope", 0.8, 0.75, 0.85}, {"age_sex", 0.5, 0.45, 0.55}}, true},
                                     {"task_b", {{"chronoscope", 0.6, 0.5, 0.7}, {"age_sex", 0.58, 0.5, 0.66}}, false}};
  const auto a = report::grouped_bars("AUROC", "AUROC", g);
  const auto b = report::grouped_bars("AUROC", "AUROC", g);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.find("<svg"), 0u);
  EXPECT_NE(a.find("p &lt;= 0.05"), std::string::npos);
  std::size_t stars = 0;
  for (auto pos = a.find(">*</text>"); pos != std::string::npos; pos = a.find(">*</text>", pos + 1)) ++stars;
  EXPECT_EQ(stars, 1u);
  g[1].significant = true;
  EXPECT_NE(report::grouped_bars("AUROC", "AUROC", g), a);
}

TEST(Report, EscapesMarkup) {
  EXPECT_EQ(report::escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
  const auto s = report::horizontal_bars("t", {"x<y"}, {1.0});
  EXPECT_NE(s.find("x&lt;y"), std::string::npos);
}

TEST(Report, LinePlotRejectsBadInput) {
  EXPECT_THROW(report::line_plot({"t", "x", "y", 1, 1, 0, 1, false, {}}, {}), Error);
  EXPECT_THROW(report::line_plot({"t", "x", "y", 0, 1, 0, 1, false, {}}, {{"s", {0.0, 1.0}, {0.0}, false, false}}), Error);
}

TEST(PipelineConfig, RoundTripsAndValidates) {
  const auto c = pipeline_config_from_json(tiny_config());
  const auto back = pipeline_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(c.encoder.seed, 0u);

  auto bad = tiny_config();
  bad["schema_version"] = 99;
  EXPECT_EQ(kind_of([&] { pipeline_config_from_json(bad); }), ErrorKind::Validation);
  auto dup = tiny_config();
  dup["tasks"].push_back(dup["tasks"][0]);
  EXPECT_EQ(kind_of([&] { pipeline_config_from_json(dup); }), ErrorKind::Validation);
  auto prompt = tiny_config();
  prompt["prompt"] = "Lab";
  EXPECT_EQ(kind_of([&] { pipeline_config_from_json(prompt); }), ErrorKind::Validation);
}

TEST(PipelineConfig, SeedPropagates) {
  auto c = pipeline_config_from_json(tiny_config());
  c.apply_seed(7);
  EXPECT_EQ(c.cohort.at("seed"), 7);
  EXPECT_EQ(c.encoder.seed, 7u);
  EXPECT_EQ(c.fit.seed, 7u);
}

TEST(PipelineConfig, ParsesDates) {
  EXPECT_EQ(parse_date_epoch_min("1970-01-02"), kMinutesPerDay);
  EXPECT_EQ(parse_date_epoch_min("2000-03-01") - parse_date_epoch_min("2000-02-28"), 2 * kMinutesPerDay);
  EXPECT_THROW(parse_date_epoch_min("2001-02-29"), Error);
  EXPECT_THROW(parse_date_epoch_min("2001-02"), Error);
}

TEST(Pipeline, UnknownStageIsValidationError) {
  EXPECT_EQ(kind_of([] { stage("deploy"); }), ErrorKind::Validation);
}

TEST(Pipeline, DependencyClosureFollowsPipelineOrder) {
  EXPECT_EQ(dependency_closure(stage("evaluate").deps),
            (std::vector<std::string>{"generate", "tokenize", "pretrain", "curate", "embed", "fit"}));
  EXPECT_TRUE(dependency_closure(stage("generate").deps).empty());
}

TEST(Pipeline, MissingUpstreamNamesTheStage) {
  TempWorkspace t("missing");
  auto c = context(t.root);
  try {
    run_stage(c, "tokenize");
    FAIL() << "expected a dependency error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dependency);
    EXPECT_NE(std::string(e.what()).find("'generate'"), std::string::npos);
  }
}

// One workspace exercised end to end: cache hits, hash propagation, corruption and dependency errors.
class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ws_ = new TempWorkspace("run");
    auto c = context(ws_->root);
    first_ = run_pipeline(c);
  }
  static void TearDownTestSuite() {
    delete ws_;
    ws_ = nullptr;
  }
  static TempWorkspace* ws_;
  static std::vector<StageOutcome> first_;
};

TempWorkspace* PipelineRun::ws_ = nullptr;
std::vector<StageOutcome> PipelineRun::first_;

TEST_F(PipelineRun, FirstRunExecutesEveryStageAndWritesReports) {
  ASSERT_EQ(first_.size(), stages().size());
  for (const auto& o : first_) EXPECT_FALSE(o.skipped) << o.name;
  const Workspace ws{ws_->root};
  for (const auto* f : {"metrics.csv", "metrics.json", "auroc.svg", "km_onset.svg"}) EXPECT_TRUE(fs::exists(ws.reports() / f)) << f;
  const auto csv = read_file((ws.reports() / "metrics.csv").string());
  EXPECT_EQ(csv.rfind(metrics::csv_header(), 0), 0u);
  EXPECT_NE(csv.find("onset,chronoscope,auroc,"), std::string::npos);
  EXPECT_NE(csv.find("onset,age_sex,auroc,"), std::string::npos);
  EXPECT_TRUE(verify_manifest(ws).empty());
  const auto m = load_manifest(ws);
  EXPECT_EQ(m.stages.size(), stages().size());
}

TEST_F(PipelineRun, UnchangedRerunSkipsEverything) {
  auto c = context(ws_->root);
  for (const auto& o : run_pipeline(c)) EXPECT_TRUE(o.skipped) << o.name;
}

TEST_F(PipelineRun, IdenticalRerunIsByteIdentical) {
  TempWorkspace other("rerun");
  auto c = context(other.root);
  run_pipeline(c);
  const Workspace a{ws_->root}, b{other.root};
  for (const auto* f : {"metrics.csv", "auroc.svg", "km_onset.svg"}) {
    EXPECT_EQ(read_file((a.reports() / f).string()), read_file((b.reports() / f).string())) << f;
  }
  EXPECT_EQ(sha256_file(a.checkpoint().string()), sha256_file(b.checkpoint().string()));
  EXPECT_EQ(read_file(a.retrieval_report().string()), read_file(b.retrieval_report().string()));
}

TEST_F(PipelineRun, SingleByteCorruptionIsDetected) {
  const Workspace ws{ws_->root};
  const auto path = ws.embeddings("onset");
  auto bytes = read_file(path.string());
  const auto original = bytes;
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x01);
  write_file(path.string(), bytes);
  EXPECT_EQ(verify_manifest(ws), std::vector<std::string>{"tasks/onset/embeddings.bin"});
  auto c = context(ws_->root);
  try {
    run_stage(c, "fit");
    FAIL() << "expected a dependency error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dependency);
    EXPECT_NE(std::string(e.what()).find("'embed'"), std::string::npos);
  }
  write_file(path.string(), original);
  EXPECT_TRUE(verify_manifest(ws).empty());
}

TEST_F(PipelineRun, MissingCheckpointNamesPretrain) {
  const Workspace ws{ws_->root};
  const auto ck = ws.checkpoint();
  const auto saved = read_file(ck.string());
  fs::remove(ck);
  auto c = context(ws_->root);
  try {
    run_stage(c, "evaluate");
    FAIL() << "expected a dependency error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dependency);
    EXPECT_NE(std::string(e.what()).find("'pretrain'"), std::string::npos);
  }
  write_file(ck.string(), saved);
}

TEST_F(PipelineRun, QueryAndExplainUseTheWorkspace) {
  auto c = context(ws_->root);
  const auto xs = instances_from_csv(read_file(c.ws.instances("onset").string()));
  ASSERT_FALSE(xs.empty());
  const auto& id = xs.front().patient_id;
  const auto nn = query_patient(c.ws, id, 3);
  ASSERT_EQ(nn.size(), 3u);
  for (const auto& [other, cos] : nn) {
    EXPECT_NE(other, id);
    EXPECT_LE(cos, 1.0 + 1e-12);
  }
  ExplainOptions eo;
  eo.n_steps = 16;
  eo.max_patients = 3;
  const auto files = explain_population(c, "onset", eo);
  for (const auto& f : files) EXPECT_TRUE(fs::exists(f));
  EXPECT_EQ(kind_of([&] { load_task_model(c.ws, c.cfg, "missing"); }), ErrorKind::Validation);
}

TEST_F(PipelineRun, ChangedSeedRerunsDownstream) {
  auto c = context(ws_->root);
  c.cfg.apply_seed(11);
  const auto out = run_pipeline(c);
  for (const auto& o : out) EXPECT_FALSE(o.skipped) << o.name;
  EXPECT_EQ(load_manifest(c.ws).seed, 11u);
}
