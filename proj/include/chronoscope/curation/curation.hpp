#pragma once

// Snapshot/endpoint selection turning patient records into time-to-event instances.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/core/parallel.hpp"
#include "chronoscope/core/split.hpp"
#include "chronoscope/synth/cohort.hpp"

namespace chronoscope::curation {

struct CurationLog {
  std::string task;
  std::size_t candidates = 0;
  std::size_t dropped_sex = 0;
  std::size_t dropped_no_snapshot = 0;
  std::size_t dropped_age_sd = 0;
  std::size_t dropped_blackout = 0;
  std::size_t dropped_100yr = 0;
  std::size_t final_n = 0;
  std::size_t final_events = 0;

  bool reconciles() const {
    return candidates == dropped_sex + dropped_no_snapshot + dropped_age_sd + dropped_blackout + dropped_100yr + final_n;
  }
};

// 30 if τ > 90; 7 if 60 ≤ τ ≤ 90; 1 if τ < 60.
inline int blackout_days(int tau_days) {
  require(tau_days > 0, "blackout_days: tau must be positive");
  if (tau_days > 90) return 30;
  if (tau_days >= 60) return 7;
  return 1;
}

// Absolute calendar day of a time in minutes since birth.
inline std::int64_t calendar_day(const PatientRecord& p, std::int64_t t_min) {
  const std::int64_t abs = p.demographics.birth_epoch_min + t_min;
  return abs >= 0 ? abs / kMinutesPerDay : -((-abs + kMinutesPerDay - 1) / kMinutesPerDay);
}

struct AgeWindow {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

namespace detail {

inline bool is_code(const EventRecord& e, const std::vector<std::string>& codes) {
  return std::find(codes.begin(), codes.end(), e.code) != codes.end();
}

inline std::optional<std::int64_t> first_occurrence(const PatientRecord& p, const std::vector<std::string>& codes,
                                                    std::int64_t after = std::numeric_limits<std::int64_t>::min()) {
  for (const auto& e : p.events) {
    if (e.time_min > after && is_code(e, codes)) return e.time_min;
  }
  return std::nullopt;
}

// Snapshot candidate times (ascending, unique) per the rule.
inline std::vector<std::int64_t> snapshot_times(const PatientRecord& p, const SnapshotRule& rule) {
  std::vector<std::int64_t> out;
  switch (rule.kind) {
    case SnapshotKind::DischargeAfterVisits: {
      std::set<std::int64_t> days_seen;
      for (const auto& e : p.events) {
        const auto day = calendar_day(p, e.time_min);
        // Visits strictly before this event's visit day.
        const auto prior = static_cast<int>(std::distance(days_seen.begin(), days_seen.lower_bound(day)));
        if (e.modality == Modality::Encounter && e.code == synth::kDischargeCode && prior >= rule.min_prior_visits) {
          out.push_back(e.time_min);
        }
        days_seen.insert(day);
      }
      break;
    }
    case SnapshotKind::FirstOccurrence:
      if (auto t = first_occurrence(p, rule.codes)) out.push_back(*t);
      break;
    case SnapshotKind::AdmissionOffset:
      for (const auto& e : p.events) {
        if (e.modality == Modality::Encounter && e.code == synth::kAdmitCode) out.push_back(e.time_min + rule.offset_min);
      }
      break;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::int64_t censor_time(const PatientRecord& p) {
  std::int64_t last = p.events.empty() ? 0 : p.events.back().time_min;
  if (p.death_time_min) last = std::max(last, *p.death_time_min);
  return last;
}

// Endpoint time strictly after `after` (or first ever), with death folded in when it is an endpoint.
inline std::optional<std::int64_t> endpoint_time(const PatientRecord& p, const EndpointRule& rule,
                                                 std::int64_t after = std::numeric_limits<std::int64_t>::min()) {
  auto t = first_occurrence(p, rule.codes, after);
  if (rule.include_death && p.death_time_min && *p.death_time_min > after) {
    t = t ? std::min(*t, *p.death_time_min) : *p.death_time_min;
  }
  return t;
}

}  // namespace detail

// Mean ± 2 SD (sample SD) of first-endpoint-code age over the given patients.
inline AgeWindow endpoint_age_window(const std::vector<const PatientRecord*>& train, const EndpointRule& rule) {
  std::vector<double> ages;
  for (const auto* p : train) {
    if (auto t = detail::first_occurrence(*p, rule.codes)) ages.push_back(static_cast<double>(*t));
  }
  require(ages.size() >= 2, "curate_task: fewer than two Train endpoints to estimate the age window");
  double mean = 0.0;
  for (double a : ages) mean += a;
  mean /= static_cast<double>(ages.size());
  double ss = 0.0;
  for (double a : ages) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / static_cast<double>(ages.size() - 1));
  return {mean - 2.0 * sd, mean + 2.0 * sd};
}

struct CurationOptions {
  std::uint64_t seed = 0;
  SplitRatios ratios;
  std::uint64_t split_seed = 0;
};

struct CurationResult {
  std::vector<TteInstance> instances;
  CurationLog log;
};

// One instance per eligible patient. Drop reasons are checked in the order sex, no snapshot,
// age window, blackout, 100-year cap; each patient is counted once under the first reason that
// empties its snapshot set.
inline CurationResult curate_task(const std::vector<PatientRecord>& cohort, const TaskSpec& spec, const CurationOptions& opt = {}) {
  require(spec.tau_days > 0, "curate_task: tau must be positive");
  require(!spec.endpoint_rule.codes.empty() || spec.endpoint_rule.include_death, "curate_task: task has no endpoint");
  {
    std::unordered_set<std::string> seen;
    for (const auto& p : cohort) {
      for (const auto& e : p.events) seen.insert(e.code);
    }
    for (const auto& c : spec.endpoint_rule.codes) {
      if (!seen.count(c)) fail(ErrorKind::Validation, "curate_task '" + spec.name + "': endpoint code '" + c + "' never occurs");
    }
  }
  std::vector<Split> splits;
  splits.reserve(cohort.size());
  for (const auto& p : cohort) splits.push_back(split_assign(p.patient_id, opt.ratios, opt.split_seed));
  AgeWindow window;
  if (spec.age_sd_filter) {
    std::vector<const PatientRecord*> train;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (splits[i] == Split::Train) train.push_back(&cohort[i]);
    }
    window = endpoint_age_window(train, spec.endpoint_rule);
  }
  const double b_min = blackout_days(spec.tau_days) * static_cast<double>(kMinutesPerDay);
  CurationResult r;
  r.log.task = spec.name;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& p = cohort[i];
    ++r.log.candidates;
    if (spec.sex_filter && p.demographics.sex != *spec.sex_filter) {
      ++r.log.dropped_sex;
      continue;
    }
    const auto censor = detail::censor_time(p);
    const auto first_end = detail::endpoint_time(p, spec.endpoint_rule);
    struct Candidate {
      std::int64_t snap;
      std::int64_t end;
      bool event;
    };
    std::vector<Candidate> cands;
    for (auto s : detail::snapshot_times(p, spec.snapshot_rule)) {
      std::optional<std::int64_t> end = spec.endpoint_rule.mode == EndpointMode::FirstEver
                                             ? first_end
                                             : detail::endpoint_time(p, spec.endpoint_rule, s);
      if (end) {
        if (s < *end) cands.push_back({s, *end, true});
      } else if (s < censor) {
        cands.push_back({s, censor, false});
      }
    }
    if (cands.empty()) {
      ++r.log.dropped_no_snapshot;
      continue;
    }
    std::erase_if(cands, [&](const Candidate& c) {
      const auto age = static_cast<double>(c.snap);
      return age < window.lo || age > window.hi;
    });
    if (cands.empty()) {
      ++r.log.dropped_age_sd;
      continue;
    }
    std::erase_if(cands, [&](const Candidate& c) { return c.event && static_cast<double>(c.end - c.snap) < b_min; });
    if (cands.empty()) {
      ++r.log.dropped_blackout;
      continue;
    }
    std::erase_if(cands, [&](const Candidate& c) { return c.end - c.snap > kMinutesPer100Years; });
    if (cands.empty()) {
      ++r.log.dropped_100yr;
      continue;
    }
    std::mt19937_64 rng(hash_combine(hash_combine(opt.seed, hash64(p.patient_id)), hash64(spec.name)));
    const auto& c = cands[std::uniform_int_distribution<std::size_t>(0, cands.size() - 1)(rng)];
    r.instances.push_back({p.patient_id, c.snap, static_cast<double>(c.end - c.snap) / static_cast<double>(kMinutesPerDay),
                           c.event, splits[i]});
    ++r.log.final_n;
    r.log.final_events += c.event;
  }
  if (r.instances.empty()) fail(ErrorKind::Validation, "curate_task '" + spec.name + "': zero eligible patients");
  return r;
}

// Tasks curate independently; results follow the input order.
inline std::vector<CurationResult> curate_tasks(const std::vector<PatientRecord>& cohort, const std::vector<TaskSpec>& specs,
                                                const CurationOptions& opt = {}, int threads = 0) {
  std::vector<CurationResult> out(specs.size());
  parallel_for(specs.size(), resolve_threads(threads), [&](std::size_t k) { out[k] = curate_task(cohort, specs[k], opt); });
  return out;
}

// Percentage of instances with an event at or before τ.
inline double incidence(const std::vector<TteInstance>& xs, double tau_days) {
  require(!xs.empty(), "incidence: no instances");
  std::size_t k = 0;
  for (const auto& x : xs) k += x.event && x.duration_days <= tau_days;
  return 100.0 * static_cast<double>(k) / static_cast<double>(xs.size());
}

inline json to_json(const CurationLog& l) {
  return {{"task", l.task},
          {"candidates", l.candidates},
          {"dropped_sex", l.dropped_sex},
          {"dropped_no_snapshot", l.dropped_no_snapshot},
          {"dropped_age_sd", l.dropped_age_sd},
          {"dropped_blackout", l.dropped_blackout},
          {"dropped_100yr", l.dropped_100yr},
          {"final_n", l.final_n},
          {"final_events", l.final_events}};
}

}  // namespace chronoscope::curation
