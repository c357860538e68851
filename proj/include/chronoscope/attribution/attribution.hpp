#pragma once

// Integrated Gradients over encoder input embeddings, population aggregation of token scores,
// leave-one-token-out deltas and per-patient risk trajectories.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "chronoscope/core/parallel.hpp"
#include "chronoscope/encoder/pretrain.hpp"
#include "chronoscope/survival/cox.hpp"
#include "chronoscope/survival/pca.hpp"

namespace chronoscope::attr {

using enc::Mat;
using enc::RowVec;

// Score and (optionally) its gradient with respect to the input embeddings Z.
using ScoreFn = std::function<double(const Mat& Z, Mat* dZ)>;

inline constexpr int kDefaultSteps = 64;
inline constexpr double kL1Eps = 1e-12;

// (Z − Z0) ⊙ mean gradient over the midpoints α_k = (k + ½)/n of the straight path.
inline Mat integrated_gradients(const Mat& Z, const Mat& Z0, const ScoreFn& score, int n_steps = kDefaultSteps) {
  require(n_steps >= 1, "integrated_gradients: n_steps must be at least 1");
  require(Z.rows() == Z0.rows() && Z.cols() == Z0.cols(), "integrated_gradients: input and baseline shapes differ");
  const Mat diff = Z - Z0;
  Mat acc = Mat::Zero(Z.rows(), Z.cols());
  Mat g;
  for (int k = 0; k < n_steps; ++k) {
    const double a = (k + 0.5) / n_steps;
    score(Z0 + a * diff, &g);
    if (g.rows() != Z.rows() || g.cols() != Z.cols()) fail(ErrorKind::Validation, "integrated_gradients: gradient shape mismatch");
    if (!g.allFinite()) fail(ErrorKind::Numeric, "integrated_gradients: non-finite gradient at alpha=" + format_double(a));
    acc += g;
  }
  return (diff.array() * acc.array()).matrix() / static_cast<double>(n_steps);
}

// Encoder + frozen PCA + Cox head. Without PCA components the head acts on the raw embedding.
struct TaskModel {
  const enc::Params* encoder = nullptr;
  enc::EncoderConfig cfg;
  Modality prompt = Modality::Diagnosis;
  surv::PcaProjection pca;
  surv::CoxModel cox;
  double tau_days = 365.0;

  // Log-hazard as an affine map of the prompt state: wᵀh + bias.
  RowVec head_weights() const {
    if (pca.components.size() == 0) return cox.beta.transpose();
    return (pca.components.transpose() * cox.beta).transpose();
  }
  double head_bias() const { return pca.components.size() == 0 ? 0.0 : -head_weights().dot(pca.mean.transpose()); }

  std::size_t vocab_size() const { return static_cast<std::size_t>(encoder->W_emb.rows()); }

  enc::SeqInput input(const PatientRecord& p, std::int64_t as_of_min) const {
    return enc::prompt_input(p, cfg, vocab_size(), prompt, as_of_min);
  }

  double log_hazard(const PatientRecord& p, std::int64_t as_of_min) const {
    require(encoder != nullptr, "task model has no encoder");
    const auto in = input(p, as_of_min);
    enc::ForwardCache c;
    const Mat& H = enc::forward(*encoder, cfg, in, c);
    return H.row(H.rows() - 1).dot(head_weights()) + head_bias();
  }

  // 1 − S(τ | x); falls back to the log-hazard when no baseline hazard was estimated.
  double risk(const PatientRecord& p, std::int64_t as_of_min) const {
    const double eta = log_hazard(p, as_of_min);
    if (cox.baseline.times.empty()) return eta;
    return -std::expm1(-cox.baseline.at(tau_days) * std::exp(eta));
  }
};

// Log-hazard of the last (prompt) row as a differentiable function of Z.
inline ScoreFn encoder_score(const TaskModel& m) {
  require(m.encoder != nullptr, "encoder_score: task model has no encoder");
  const RowVec w = m.head_weights();
  require(w.size() == m.cfg.E, "encoder_score: Cox head dimension does not match the encoder");
  const double bias = m.head_bias();
  return [&m, w, bias](const Mat& Z, Mat* dZ) {
    enc::ForwardCache c;
    const Mat& H = enc::encode(*m.encoder, m.cfg, Z, c);
    const double s = H.row(H.rows() - 1).dot(w) + bias;
    if (dZ) {
      Mat dH = Mat::Zero(H.rows(), H.cols());
      dH.row(H.rows() - 1) = w;
      *dZ = enc::encode_bwd(*m.encoder, m.cfg, c, dH, nullptr);
    }
    return s;
  };
}

// Baseline of the same shape: event content is replaced by the mean embedding-table row
// (structured) or zeros (unstructured); time encodings, prefix rows and the prompt row are kept.
inline Mat ig_baseline(const enc::Params& P, const enc::SeqInput& in, const Mat& Z) {
  Mat Z0 = Z;
  const RowVec mean_emb = P.W_emb.colwise().mean();
  for (std::size_t i = 0; i < in.events.size(); ++i) {
    const auto& e = in.events[i];
    if (e.is_prompt || e.masked) continue;
    auto row = Z0.row(static_cast<Eigen::Index>(enc::kPrefix + i));
    if (is_unstructured(e.modality)) {
      const RowVec x = Eigen::Map<const RowVec>(e.dense.data(), static_cast<Eigen::Index>(e.dense.size()));
      row -= enc::linear_fwd(x, P.proj[enc::dense_slot(e.modality)]).row(0);
    } else {
      row -= P.W_emb.row(e.token) - mean_emb;
    }
  }
  return Z0;
}

// ---------------------------------------------------------------- per-patient records

// Token identity: "tok:<id>" for structured events, the modality name for unstructured ones.
inline std::string token_key(const enc::SeqEvent& e) {
  if (is_unstructured(e.modality)) return std::string(to_string(e.modality));
  return "tok:" + std::to_string(e.token);
}

struct TokenAttribution {
  std::string key;
  int token = -1;  // vocab id, -1 for unstructured events
  Modality modality = Modality::Diagnosis;
  std::int64_t time_min = 0;
  double a = 0.0;  // net attribution: sum over embedding dimensions
};

struct PatientAttribution {
  std::string patient_id;
  bool event = false;
  double score = 0.0;           // s(Z)
  double baseline_score = 0.0;  // s(Z0)
  std::vector<TokenAttribution> tokens;

  double total() const {
    double s = 0.0;
    for (const auto& t : tokens) s += t.a;
    return s;
  }
  // |Σ IG − (s(Z) − s(Z0))| / max(|s(Z) − s(Z0)|, 1e-8).
  double completeness_gap() const {
    const double d = score - baseline_score;
    return std::abs(total() - d) / std::max(std::abs(d), 1e-8);
  }
};

inline PatientAttribution explain_patient(const TaskModel& m, const PatientRecord& p, std::int64_t as_of_min,
                                          int n_steps = kDefaultSteps) {
  const auto in = m.input(p, as_of_min);
  enc::ForwardCache c;
  const Mat Z = enc::assemble(*m.encoder, m.cfg, in, c);
  const Mat Z0 = ig_baseline(*m.encoder, in, Z);
  const auto f = encoder_score(m);
  const Mat ig = integrated_gradients(Z, Z0, f, n_steps);
  PatientAttribution out;
  out.patient_id = p.patient_id;
  out.score = f(Z, nullptr);
  out.baseline_score = f(Z0, nullptr);
  for (std::size_t i = 0; i < in.events.size(); ++i) {
    const auto& e = in.events[i];
    if (e.is_prompt) continue;
    TokenAttribution t;
    t.key = token_key(e);
    t.token = e.token;
    t.modality = e.modality;
    t.time_min = std::llround(e.tau * kMinutesPer100Years);
    t.a = ig.row(static_cast<Eigen::Index>(enc::kPrefix + i)).sum();
    out.tokens.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------- aggregation

// Per-token pooled (max over occurrences) and L1-normalized scores of one patient.
struct PooledScore {
  std::string key;
  double pooled = 0.0;      // A_{p,v}
  double normalized = 0.0;  // Ã_{p,v}
};

inline std::vector<PooledScore> pool_and_normalize(const PatientAttribution& pa) {
  std::map<std::string, double> best;
  for (const auto& t : pa.tokens) {
    auto [it, inserted] = best.try_emplace(t.key, t.a);
    if (!inserted) it->second = std::max(it->second, t.a);
  }
  double l1 = 0.0;
  for (const auto& [k, v] : best) l1 += std::abs(v);
  std::vector<PooledScore> out;
  out.reserve(best.size());
  for (const auto& [k, v] : best) out.push_back({k, v, v / (l1 + kL1Eps)});
  return out;
}

struct PopulationImportance {
  std::string key;
  double mean_score = 0.0;  // Ā_v over patients possessing v
  std::size_t n_patients = 0;
  double prevalence_events = 0.0;
  double prevalence_censored = 0.0;
};

// Ranked population importances over the analysis set. Tokens must reach the prevalence floor
// among event patients or among censored patients.
inline std::vector<PopulationImportance> aggregate_attributions(const std::vector<PatientAttribution>& patients,
                                                                double prevalence_floor = 0.025) {
  if (patients.empty()) fail(ErrorKind::Validation, "aggregate_attributions: empty high-risk set");
  require(prevalence_floor >= 0.0 && prevalence_floor <= 1.0, "aggregate_attributions: prevalence floor must lie in [0, 1]");
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0, n_event = 0, n_censored = 0;
  };
  std::map<std::string, Acc> acc;
  std::size_t events = 0;
  for (const auto& pa : patients) {
    events += pa.event ? 1 : 0;
    for (const auto& s : pool_and_normalize(pa)) {
      auto& a = acc[s.key];
      a.sum += s.normalized;
      ++a.n;
      ++(pa.event ? a.n_event : a.n_censored);
    }
  }
  const std::size_t censored = patients.size() - events;
  std::vector<PopulationImportance> out;
  for (const auto& [k, a] : acc) {
    PopulationImportance r;
    r.key = k;
    r.mean_score = a.sum / static_cast<double>(a.n);
    r.n_patients = a.n;
    r.prevalence_events = events ? static_cast<double>(a.n_event) / static_cast<double>(events) : 0.0;
    r.prevalence_censored = censored ? static_cast<double>(a.n_censored) / static_cast<double>(censored) : 0.0;
    if (r.prevalence_events >= prevalence_floor || r.prevalence_censored >= prevalence_floor) out.push_back(std::move(r));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const PopulationImportance& a, const PopulationImportance& b) { return a.mean_score > b.mean_score; });
  return out;
}

// Indices whose log-hazard is at or above the 75th percentile.
inline std::vector<std::size_t> top_quartile(const std::vector<double>& log_hazards) {
  if (log_hazards.empty()) fail(ErrorKind::Validation, "top_quartile: empty high-risk set");
  std::vector<double> s = log_hazards;
  std::sort(s.begin(), s.end());
  const double pos = 0.75 * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double q = s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < log_hazards.size(); ++i) {
    if (log_hazards[i] >= q) out.push_back(i);
  }
  return out;
}

// Explains every patient in parallel. `as_of` holds one snapshot per patient.
inline std::vector<PatientAttribution> explain_patients(const TaskModel& m, const std::vector<const PatientRecord*>& patients,
                                                        const std::vector<std::int64_t>& as_of, const std::vector<bool>& event,
                                                        int n_steps = kDefaultSteps, std::size_t threads = 1) {
  require(patients.size() == as_of.size() && patients.size() == event.size(), "explain_patients: argument sizes differ");
  std::vector<PatientAttribution> out(patients.size());
  parallel_for(patients.size(), threads, [&](std::size_t i) {
    out[i] = explain_patient(m, *patients[i], as_of[i], n_steps);
    out[i].event = event[i];
  });
  return out;
}

// ---------------------------------------------------------------- leave one token out

using RiskFn = std::function<double(const PatientRecord&, std::int64_t as_of_min)>;

struct LotoDelta {
  std::size_t event_index = 0;  // position in the patient's event list
  std::int64_t time_min = 0;
  Modality modality = Modality::Diagnosis;
  std::string code;
  double delta = 0.0;  // risk_full − risk_without
};

// One delta per event with t0 < time ≤ t1, each evaluated at t1.
inline std::vector<LotoDelta> loto_deltas(const PatientRecord& p, std::int64_t t0, std::int64_t t1, const RiskFn& risk) {
  require(t0 < t1, "loto_deltas: interval must satisfy t0 < t1");
  std::vector<std::size_t> inside;
  for (std::size_t i = 0; i < p.events.size(); ++i) {
    if (p.events[i].time_min > t0 && p.events[i].time_min <= t1) inside.push_back(i);
  }
  if (inside.empty()) {
    fail(ErrorKind::Validation, "loto_deltas: patient " + p.patient_id + " has no events in (" + std::to_string(t0) + ", " +
                                    std::to_string(t1) + "]");
  }
  const double full = risk(p, t1);
  std::vector<LotoDelta> out;
  PatientRecord q = p;
  for (auto i : inside) {
    q.events = p.events;
    q.events.erase(q.events.begin() + static_cast<std::ptrdiff_t>(i));
    const auto& e = p.events[i];
    out.push_back({i, e.time_min, e.modality, e.code, full - risk(q, t1)});
  }
  return out;
}

inline RiskFn risk_function(const TaskModel& m) {
  return [&m](const PatientRecord& p, std::int64_t t) { return m.risk(p, t); };
}

// ---------------------------------------------------------------- trajectories

struct TrajectoryPoint {
  std::int64_t as_of_min = 0;
  std::int64_t info_min = 0;  // time of the latest visible event, 0 when none
  double risk = 0.0;
};

struct EncounterMarker {
  std::int64_t time_min = 0;
  std::string code;
};

struct Trajectory {
  std::string patient_id;
  std::vector<TrajectoryPoint> points;
  std::vector<EncounterMarker> markers;
};

// Risk at each grid time, computed from the history visible at that time. The model is evaluated
// at the latest visible event, so the curve only moves when new events arrive.
inline Trajectory risk_trajectory(const TaskModel& m, const PatientRecord& p, const std::vector<std::int64_t>& grid) {
  Trajectory t;
  t.patient_id = p.patient_id;
  std::map<std::int64_t, double> memo;
  for (auto g : grid) {
    require(g >= 0, "risk_trajectory: as-of time before birth");
    const auto it = std::upper_bound(p.events.begin(), p.events.end(), g,
                                     [](std::int64_t v, const EventRecord& e) { return v < e.time_min; });
    const std::int64_t info = it == p.events.begin() ? 0 : std::prev(it)->time_min;
    auto [mit, fresh] = memo.try_emplace(info, 0.0);
    if (fresh) mit->second = m.risk(p, info);
    t.points.push_back({g, info, mit->second});
  }
  if (!grid.empty()) {
    const auto [lo, hi] = std::minmax_element(grid.begin(), grid.end());
    for (const auto& e : p.events) {
      if (e.modality == Modality::Encounter && e.time_min >= *lo && e.time_min <= *hi) t.markers.push_back({e.time_min, e.code});
    }
  }
  return t;
}

}  // namespace chronoscope::attr
