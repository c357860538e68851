#pragma once

// Task-level model fitting and evaluation shared by the CLI and the acceptance runner: PCA + Cox on
// embeddings, the age–sex baseline, Breslow re-estimation on Val, and bootstrap metric reports.

#include <map>
#include <string>
#include <vector>

#include "chronoscope/metrics/bootstrap.hpp"
#include "chronoscope/survival/case_cohort.hpp"
#include "chronoscope/survival/cox.hpp"
#include "chronoscope/survival/pca.hpp"

namespace chronoscope::cli {

using surv::Matrix;
using surv::Vector;

inline constexpr std::string_view kEmbeddingModel = "chronoscope";
inline constexpr std::string_view kAgeSexModel = "age_sex";

struct FitOptions {
  int pca_components = 50;
  double case_cohort_ratio = 4.0;
  double lambda = 1e-4;
  std::uint64_t seed = 0;
};

// Cox head over optionally PCA-reduced features.
struct FittedModel {
  std::string name;
  bool use_pca = false;
  surv::PcaProjection pca;
  surv::CoxModel cox;

  Matrix features(const Matrix& X) const { return use_pca ? pca.project(X) : X; }
  std::vector<double> log_hazards(const Matrix& X) const {
    const Vector eta = surv::predict_risks(cox, features(X));
    return {eta.data(), eta.data() + eta.size()};
  }
  std::vector<double> probabilities(const Matrix& X, double tau_days) const {
    return surv::risk_probabilities(cox, features(X), tau_days);
  }
};

inline json to_json(const FittedModel& m) {
  json j = {{"name", m.name}, {"use_pca", m.use_pca}, {"cox", surv::to_json(m.cox)}};
  if (m.use_pca) j["pca"] = surv::to_json(m.pca);
  return j;
}

inline FittedModel fitted_model_from_json(const json& j) {
  FittedModel m;
  m.name = j.at("name").get<std::string>();
  m.use_pca = j.value("use_pca", false);
  m.cox = surv::cox_from_json(j.at("cox"));
  if (m.use_pca) m.pca = surv::pca_from_json(j.at("pca"));
  return m;
}

inline Matrix rows_to_matrix(const std::vector<DenseVec>& rows) {
  require(!rows.empty(), "feature matrix: no rows");
  Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == rows.front().size(), "feature matrix: ragged rows");
    for (std::size_t c = 0; c < rows[i].size(); ++c) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  }
  return X;
}

// Age at snapshot in years and a female indicator.
inline DenseVec age_sex_row(const TteInstance& x, const PatientRecord& p) {
  return {static_cast<double>(x.snapshot_min) / kMinutesPerYear, p.demographics.sex == Sex::Female ? 1.0 : 0.0};
}

// Instances of one split with their feature rows.
struct SplitData {
  std::vector<TteInstance> instances;
  std::vector<DenseVec> rows;
  Matrix X() const { return rows_to_matrix(rows); }
  surv::SurvivalData survival() const { return surv::survival_data(instances); }
};

struct TaskData {
  SplitData train, val, test;
};

inline TaskData split_task(const std::vector<TteInstance>& xs, const std::vector<DenseVec>& rows) {
  require(xs.size() == rows.size(), "split_task: one feature row per instance required");
  TaskData d;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto& s = xs[i].split == Split::Train ? d.train : xs[i].split == Split::Val ? d.val : d.test;
    s.instances.push_back(xs[i]);
    s.rows.push_back(rows[i]);
  }
  return d;
}

// PCA (embeddings only) on all Train rows, Cox on the case-cohort Train subsample, Breslow on Val.
inline FittedModel fit_model(const std::string& name, const TaskData& d, bool use_pca, const FitOptions& opt) {
  require(!d.train.instances.empty(), "fit '" + name + "': empty training split");
  require(!d.val.instances.empty(), "fit '" + name + "': empty validation split");
  FittedModel m;
  m.name = name;
  m.use_pca = use_pca;
  const Matrix Xtr = d.train.X();
  if (use_pca) {
    const int k = std::min<int>(opt.pca_components, static_cast<int>(std::min<Eigen::Index>(Xtr.cols(), Xtr.rows() - 1)));
    m.pca = surv::fit_pca(Xtr, k);
  }
  const auto keep = surv::case_cohort_indices(d.train.instances, opt.case_cohort_ratio, opt.seed);
  std::vector<TteInstance> sub;
  Matrix Xs(static_cast<Eigen::Index>(keep.size()), Xtr.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    sub.push_back(d.train.instances[keep[r]]);
    Xs.row(static_cast<Eigen::Index>(r)) = Xtr.row(static_cast<Eigen::Index>(keep[r]));
  }
  m.cox = surv::fit_cox(m.features(Xs), sub, opt.lambda);
  m.cox = surv::estimate_baseline_hazard(std::move(m.cox), m.features(d.val.X()), d.val.instances);
  return m;
}

// Val and Test scores of one model: log-hazards rank, probabilities at τ feed Brier and calibration.
struct ModelScores {
  std::string model;
  std::vector<double> val_risk;
  std::vector<double> test_risk;
  std::vector<double> test_prob;
};

inline ModelScores score_model(const FittedModel& m, const TaskData& d, double tau_days) {
  const Matrix Xt = d.test.X();
  return {m.name, m.log_hazards(d.val.X()), m.log_hazards(Xt), m.probabilities(Xt, tau_days)};
}

struct EvalOptions {
  int n_bootstraps = 100;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Bootstrap reports for every metric that is defined on this test set. Metrics whose point value
// is undefined are reported with NaN entries rather than aborting the task.
inline std::vector<metrics::MetricReport> evaluate_model(const ModelScores& s, const TaskData& d, double tau,
                                                         const EvalOptions& opt) {
  using namespace metrics;
  const auto test = d.test.survival();
  const auto val = d.val.survival();
  std::vector<std::pair<std::string, ResampledMetric>> fs = {
      {"auroc", auc_metric(s.test_risk, test, tau)},
      {"c_index", c_index_metric(s.test_risk, test, tau)},
      {"brier", brier_metric(s.test_prob, test, tau)},
      {"ici", ici_metric(s.test_prob, test, tau)},
      {"mce", mce_metric(s.test_prob, test, tau)},
  };
  try {
    const auto [vr, vl] = labels_at(s.val_risk, val, tau);
    fs.insert(fs.begin() + 2, {"balanced_accuracy", balanced_accuracy_metric(choose_threshold(vr, vl), s.test_risk, test, tau)});
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Undefined) throw;
  }
  std::vector<MetricReport> out;
  for (const auto& [name, f] : fs) {
    MetricReport r;
    try {
      r = bootstrap_ci(f, test.size(), opt.n_bootstraps, opt.seed, static_cast<int>(opt.threads));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Undefined) throw;
      r.point = r.ci_low = r.ci_high = std::numeric_limits<double>::quiet_NaN();
      r.n_bootstraps = opt.n_bootstraps;
    }
    r.metric = name;
    r.tau_days = tau;
    r.n_instances = test.size();
    r.n_events_by_tau = events_by(test, tau);
    out.push_back(std::move(r));
  }
  return out;
}

// Unpaired bootstrap p-value for the AUROC difference between two models.
inline double auroc_p_value(const ModelScores& a, const ModelScores& b, const TaskData& d, double tau, const EvalOptions& opt) {
  const auto test = d.test.survival();
  return metrics::bootstrap_significance(metrics::auc_metric(a.test_risk, test, tau), metrics::auc_metric(b.test_risk, test, tau),
                                         test.size(), opt.n_bootstraps, opt.seed, static_cast<int>(opt.threads));
}

struct ReportRow {
  std::string task;
  std::string model;
  metrics::MetricReport report;
};

// Summary CSV; header only when there are no rows.
inline std::string metrics_csv(const std::vector<ReportRow>& rows) {
  std::string out = metrics::csv_header();
  for (const auto& r : rows) out += metrics::csv_row(r.task, r.model, r.report);
  return out;
}

}  // namespace chronoscope::cli
