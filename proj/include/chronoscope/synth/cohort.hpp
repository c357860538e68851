#pragma once

// Synthetic longitudinal cohorts with planted proportional-hazards risk structure.
//
// Every patient is simulated from its own PRNG stream derived from (seed, patient index), so cohorts
// are reproducible and a cohort of n patients is a prefix of the cohort of n+1 patients.
//
// Events are grouped into single-day encounters; a "visit" is therefore exactly one encounter day.
// Endpoint hazards are exponential baselines multiplied by the multipliers of the risk factors whose
// trigger diagnosis is present (after an optional fixed lag).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/core/types.hpp"

namespace chronoscope::synth {

struct ModalitySpec {
  double rate_per_year = 0.0;
  int n_codes = 0;
  int n_classes = 1;                // measurement subdomain classes
  double personal_fraction = 0.0;   // share of events drawn from the patient's personal code set
  int personal_codes = 0;
};

struct RiskFactor {
  std::vector<std::string> triggers;  // any-of diagnosis codes
  double multiplier = 1.0;
  std::string endpoint;
  double lag_days = 0.0;             // fixed delay between trigger onset and hazard effect
  double prevalence = 0.0;
  double onset_at_start = 1.0;       // probability the trigger is present from the first visit
};

struct EndpointSpec {
  std::string code;
  double baseline_per_year = 0.0;
};

// A rare "diagnosis THEN medication" pattern used for retrieval cohorts.
struct MotifSpec {
  std::string diagnosis;
  std::string medication;
  double prevalence = 0.0;
};

struct CohortConfig {
  static constexpr int kSchemaVersion = 1;

  std::size_t n_patients = 1000;
  std::uint64_t seed = 0;
  double horizon_years = 8.0;
  double min_age_years = 30.0;
  double max_age_years = 70.0;
  int first_calendar_year = 2010;  // record starts are uniform over [first, first + 5) calendar years
  double encounter_rate_per_year = 4.0;
  double inpatient_fraction = 0.3;
  double recur_prob = 0.5;         // chance a chronic code reappears at each later visit
  double mortality_per_year = 0.01;
  std::array<ModalitySpec, kNumModalities> modalities{};
  int note_dim = 16;
  int image_dim = 16;
  double payload_noise = 0.3;
  int ethnicity_dim = 8;
  int n_ethnicities = 12;
  std::vector<EndpointSpec> endpoints;
  std::vector<RiskFactor> risk_factors;
  std::vector<MotifSpec> motifs;

  ModalitySpec& modality(Modality m) { return modalities[index_of(m)]; }
  const ModalitySpec& modality(Modality m) const { return modalities[index_of(m)]; }

  std::size_t dense_dim(Modality m) const {
    switch (m) {
      case Modality::NoteText:
      case Modality::ReportText:
        return static_cast<std::size_t>(note_dim);
      case Modality::Image:
        return static_cast<std::size_t>(image_dim);
      default:
        return 0;
    }
  }

  void validate() const {
    require(horizon_years > 0, "horizon_years must be positive");
    require(encounter_rate_per_year > 0, "encounter rate must be positive");
    require(max_age_years >= min_age_years && min_age_years >= 0, "invalid age range");
    for (auto m : kAllModalities) {
      if (m == Modality::Encounter) continue;
      require(modality(m).rate_per_year > 0, "modality rate for " + std::string(to_string(m)) + " must be positive");
      require(modality(m).n_codes > 0, "n_codes for " + std::string(to_string(m)) + " must be positive");
    }
    for (const auto& f : risk_factors) {
      require(f.multiplier > 0, "hazard multipliers must be positive");
      require(!f.triggers.empty(), "risk factor without trigger codes");
      require(f.lag_days >= 0, "lag must be non-negative");
      require(std::any_of(endpoints.begin(), endpoints.end(), [&](const auto& e) { return e.code == f.endpoint; }),
              "risk factor references unknown endpoint '" + f.endpoint + "'");
    }
    for (const auto& e : endpoints) require(e.baseline_per_year > 0, "endpoint baseline hazard must be positive");
    require(note_dim > 0 && image_dim > 0 && ethnicity_dim > 0, "payload dimensions must be positive");
  }
};

inline constexpr std::string_view kAdmitCode = "ENC-ADMIT";
inline constexpr std::string_view kDischargeCode = "ENC-DISCHARGE";
inline constexpr std::string_view kVisitCode = "ENC-VISIT";  // outpatient encounter

inline std::string measurement_code(Modality m, int cls, int idx) {
  const char* prefix = m == Modality::Lab ? "LAB" : m == Modality::Vital ? "VIT" : "FLO";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s-C%d-%03d", prefix, cls, idx);
  return buf;
}

inline std::string plain_code(const char* prefix, int idx) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%03d", prefix, idx);
  return buf;
}

// The desk-scale reference cohort: six independent triggers, each multiplying the onset hazard by 4,
// plus one rare retrieval motif.
inline CohortConfig standard_config(std::size_t n_patients = 5000, std::uint64_t seed = 0) {
  CohortConfig c;
  c.n_patients = n_patients;
  c.seed = seed;
  c.modality(Modality::Diagnosis) = {2.5, 60, 1, 0.75, 4};
  c.modality(Modality::Medication) = {1.5, 40, 1, 0.75, 3};
  c.modality(Modality::Lab) = {2.5, 24, 4, 0.0, 0};
  c.modality(Modality::Vital) = {1.0, 6, 2, 0.0, 0};
  c.modality(Modality::Flowsheet) = {0.5, 8, 2, 0.0, 0};
  c.modality(Modality::NoteText) = {1.0, 2, 1, 0.0, 0};
  c.modality(Modality::ReportText) = {0.3, 2, 1, 0.0, 0};
  c.modality(Modality::Image) = {0.1, 1, 1, 0.0, 0};
  c.endpoints = {{"END-ONSET", 0.01}, {"END-PROG", 0.05}};
  for (int f = 0; f < 6; ++f) {
    RiskFactor rf;
    rf.triggers = {plain_code("TRG", f)};
    rf.multiplier = 4.0;
    rf.endpoint = "END-ONSET";
    rf.prevalence = 0.25;
    rf.onset_at_start = 0.8;
    c.risk_factors.push_back(rf);
  }
  // Progression endpoint driven by one of the onset triggers, with a lag.
  c.risk_factors.push_back({{plain_code("TRG", 0)}, 3.0, "END-PROG", 90.0, 0.0, 1.0});
  c.motifs = {{"MOT-DX-000", "MOT-RX-000", 0.005}};
  return c;
}

// ---------------------------------------------------------------- ground-truth manifest

struct EncounterTruth {
  std::int64_t start_min = 0;
  std::int64_t end_min = 0;
  bool inpatient = false;  // inpatient encounters emit admission and discharge markers
};

struct FactorTruth {
  std::size_t factor = 0;
  std::string code;
  std::int64_t onset_min = 0;
};

struct PatientTruth {
  std::string patient_id;
  std::int64_t record_start_min = 0;
  std::int64_t record_end_min = 0;  // administrative censoring or death
  std::optional<std::int64_t> death_min;
  std::vector<EncounterTruth> encounters;  // ascending, one per calendar day
  std::vector<FactorTruth> factors;
  std::map<std::string, std::int64_t> endpoint_min;  // observed endpoints only
  std::vector<std::size_t> motifs;
};

struct CohortManifest {
  std::string config_hash;
  std::vector<PatientTruth> patients;
};

// ---------------------------------------------------------------- generator

namespace detail {

using Rng = std::mt19937_64;

inline Rng patient_rng(std::uint64_t seed, std::size_t index, std::uint64_t stream = 0) {
  return Rng(hash_combine(hash_combine(seed, index), stream));
}

inline std::size_t zipf_draw(Rng& rng, int n, double s = 1.1) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) w[static_cast<std::size_t>(k)] = 1.0 / std::pow(k + 1.0, s);
  std::discrete_distribution<std::size_t> d(w.begin(), w.end());
  return d(rng);
}

// Cohort-level fixed randomness (projection matrices, ethnicity atoms, lab centres).
struct CohortConstants {
  std::vector<DenseVec> ethnicity_atoms;
  std::array<std::vector<DenseVec>, kNumModalities> projections;  // per unstructured modality: one row per signal
  std::array<std::vector<double>, kNumModalities> centers;         // per measurement modality: log-scale centre
  std::size_t n_signals = 0;

  explicit CohortConstants(const CohortConfig& cfg) {
    Rng rng(hash_combine(cfg.seed, 0xC0FFEEULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < cfg.n_ethnicities; ++i) {
      DenseVec v(static_cast<std::size_t>(cfg.ethnicity_dim));
      for (auto& x : v) x = normal(rng);
      ethnicity_atoms.push_back(std::move(v));
    }
    n_signals = cfg.risk_factors.size() + cfg.motifs.size();
    for (auto m : {Modality::NoteText, Modality::ReportText, Modality::Image}) {
      const auto d = cfg.dense_dim(m);
      auto& rows = projections[index_of(m)];
      for (std::size_t s = 0; s < n_signals; ++s) {
        DenseVec v(d);
        for (auto& x : v) x = normal(rng);
        rows.push_back(std::move(v));
      }
    }
    std::uniform_real_distribution<double> u(0.5, 5.0);
    for (auto m : {Modality::Lab, Modality::Vital, Modality::Flowsheet}) {
      auto& c = centers[index_of(m)];
      for (int k = 0; k < cfg.modality(m).n_codes; ++k) c.push_back(u(rng));
    }
  }
};

inline std::int64_t years_to_min(double y) { return static_cast<std::int64_t>(std::llround(y * kMinutesPerYear)); }

// Minutes since 1970-01-01 at the start of a calendar year (proleptic Gregorian).
inline std::int64_t epoch_min_of_year(int year) {
  const int y = year - 1;
  const std::int64_t days_before = 365LL * (year - 1970) + (y / 4 - y / 100 + y / 400) - (1969 / 4 - 1969 / 100 + 1969 / 400);
  return days_before * kMinutesPerDay;
}

// Whether measurement code `idx` of modality m yields categorical answers.
inline bool is_categorical_code(Modality m, int idx) { return m == Modality::Lab && idx % 8 == 7; }
// Flowsheet code 0 is constant-valued (exercises degenerate binning).
inline bool is_constant_code(Modality m, int idx) { return m == Modality::Flowsheet && idx == 0; }

}  // namespace detail

struct GeneratedCohort {
  std::vector<PatientRecord> patients;
  CohortManifest manifest;
};

inline PatientRecord generate_patient(const CohortConfig& cfg, const detail::CohortConstants& k, std::size_t index,
                                      PatientTruth& truth) {
  using detail::Rng;
  Rng rng = detail::patient_rng(cfg.seed, index);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  PatientRecord p;
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "P-%06zu", index);
    p.patient_id = buf;
  }
  truth.patient_id = p.patient_id;

  // Demographics.
  const double su = unif(rng);
  p.demographics.sex = su < 0.48 ? Sex::Male : su < 0.96 ? Sex::Female : Sex::Unknown;
  {
    const int n_atoms = unif(rng) < 0.1 ? 2 : 1;
    DenseVec eth(static_cast<std::size_t>(cfg.ethnicity_dim), 0.0);
    for (int a = 0; a < n_atoms; ++a) {
      const auto& atom = k.ethnicity_atoms[static_cast<std::size_t>(unif(rng) * cfg.n_ethnicities) %
                                           k.ethnicity_atoms.size()];
      for (std::size_t j = 0; j < eth.size(); ++j) eth[j] += atom[j] / n_atoms;
    }
    p.demographics.ethnicity_vec = std::move(eth);
  }
  const double age0_years = cfg.min_age_years + unif(rng) * (cfg.max_age_years - cfg.min_age_years);
  const double start_calendar_years = cfg.first_calendar_year + 5.0 * unif(rng);
  const std::int64_t start_epoch_min = detail::epoch_min_of_year(cfg.first_calendar_year) +
                                       detail::years_to_min(start_calendar_years - cfg.first_calendar_year);
  const std::int64_t record_start = detail::years_to_min(age0_years);
  p.demographics.birth_epoch_min = start_epoch_min - record_start;
  const auto day_of = [&](std::int64_t t) {
    const std::int64_t abs = p.demographics.birth_epoch_min + t;
    return abs >= 0 ? abs / kMinutesPerDay : -((-abs + kMinutesPerDay - 1) / kMinutesPerDay);
  };
  const auto day_start = [&](std::int64_t day) { return day * kMinutesPerDay - p.demographics.birth_epoch_min; };

  // Follow-up: administrative censoring uniform over the horizon, truncated by death.
  const double followup_years = std::max(unif(rng) * cfg.horizon_years, 1.0 / 365.25);
  std::int64_t record_end = record_start + detail::years_to_min(followup_years);
  {
    std::exponential_distribution<double> death_dist(cfg.mortality_per_year);
    const auto death = record_start + detail::years_to_min(death_dist(rng));
    if (death < record_end) {
      record_end = death;
      p.death_time_min = death;
    }
  }
  truth.record_start_min = record_start;
  truth.record_end_min = record_end;
  truth.death_min = p.death_time_min;

  // Encounter days: the first visit at record start, then a Poisson process.
  std::vector<std::int64_t> days{day_of(record_start)};
  {
    std::exponential_distribution<double> gap(cfg.encounter_rate_per_year);
    double t = 0.0;
    const double span = static_cast<double>(record_end - record_start) / kMinutesPerYear;
    while (true) {
      t += gap(rng);
      if (t >= span) break;
      days.push_back(day_of(record_start + detail::years_to_min(t)));
    }
  }
  const auto last_day = day_of(record_end);
  std::vector<EncounterTruth> encounters;
  auto make_encounter = [&](std::int64_t day) {
    EncounterTruth e;
    e.inpatient = unif(rng) < cfg.inpatient_fraction;
    e.start_min = day_start(day) + 8 * 60 + static_cast<std::int64_t>(unif(rng) * 240.0);
    e.end_min = e.start_min + 60 + static_cast<std::int64_t>(unif(rng) * 420.0);
    return e;
  };
  std::sort(days.begin(), days.end());
  days.erase(std::unique(days.begin(), days.end()), days.end());
  for (auto d : days) {
    if (d > last_day) break;
    encounters.push_back(make_encounter(d));
  }
  // Clamp to the record window so every event lies within [record_start, record_end].
  for (auto& e : encounters) {
    e.start_min = std::clamp(e.start_min, record_start, record_end);
    e.end_min = std::clamp(e.end_min, e.start_min, record_end);
  }

  // Latent risk factors.
  const std::size_t n_factors = cfg.risk_factors.size();
  std::vector<std::optional<std::int64_t>> factor_onset(n_factors);
  std::vector<std::string> factor_code(n_factors);
  std::map<std::string, std::size_t> trigger_owner;  // trigger code -> first factor that planted it
  for (std::size_t f = 0; f < n_factors; ++f) {
    const auto& rf = cfg.risk_factors[f];
    const double u_has = unif(rng);
    const double u_start = unif(rng);
    const double u_enc = unif(rng);
    const double u_code = unif(rng);
    // Factors sharing a trigger with an earlier factor inherit its realisation.
    const auto& candidate = rf.triggers[static_cast<std::size_t>(u_code * rf.triggers.size()) % rf.triggers.size()];
    if (auto it = trigger_owner.find(candidate); it != trigger_owner.end()) {
      factor_onset[f] = factor_onset[it->second];
      factor_code[f] = candidate;
      continue;
    }
    if (u_has >= rf.prevalence || encounters.empty()) continue;
    const std::size_t enc = u_start < rf.onset_at_start
                                ? 0
                                : static_cast<std::size_t>(u_enc * static_cast<double>(encounters.size())) % encounters.size();
    factor_onset[f] = encounters[enc].start_min;
    factor_code[f] = candidate;
    trigger_owner.emplace(candidate, f);
  }

  std::vector<std::optional<std::int64_t>> motif_onset(cfg.motifs.size());
  for (std::size_t m = 0; m < cfg.motifs.size(); ++m) {
    const double u = unif(rng);
    const double u_enc = unif(rng);
    if (u >= cfg.motifs[m].prevalence || encounters.empty()) continue;
    const auto half = std::max<std::size_t>(1, (encounters.size() + 1) / 2);
    motif_onset[m] = encounters[static_cast<std::size_t>(u_enc * static_cast<double>(half)) % half].start_min;
  }

  // Endpoints from piecewise-constant hazards.
  std::map<std::string, std::int64_t> endpoint_time;
  for (const auto& ep : cfg.endpoints) {
    std::vector<std::pair<std::int64_t, double>> changes;  // activation time, multiplier
    for (std::size_t f = 0; f < n_factors; ++f) {
      const auto& rf = cfg.risk_factors[f];
      if (rf.endpoint != ep.code || !factor_onset[f]) continue;
      changes.emplace_back(*factor_onset[f] + static_cast<std::int64_t>(std::llround(rf.lag_days * kMinutesPerDay)),
                           rf.multiplier);
    }
    std::sort(changes.begin(), changes.end());
    double rate = ep.baseline_per_year;
    std::int64_t t = record_start;
    std::size_t next = 0;
    while (next < changes.size() && changes[next].first <= t) rate *= changes[next++].second;
    std::exponential_distribution<double> unit(1.0);
    double remaining = unit(rng);  // unit-rate exponential consumed by the integrated hazard
    std::optional<std::int64_t> hit;
    while (t < record_end) {
      const std::int64_t piece_end = next < changes.size() ? std::min(changes[next].first, record_end) : record_end;
      const double piece_years = static_cast<double>(piece_end - t) / kMinutesPerYear;
      if (rate * piece_years >= remaining) {
        hit = t + detail::years_to_min(remaining / rate);
        break;
      }
      remaining -= rate * piece_years;
      t = piece_end;
      while (next < changes.size() && changes[next].first <= t) rate *= changes[next++].second;
    }
    if (hit && *hit < record_end) endpoint_time[ep.code] = *hit;
  }

  // Endpoint diagnoses are recorded at an encounter on the endpoint day (created if needed).
  std::map<std::string, std::size_t> endpoint_encounter;
  for (const auto& [code, t] : endpoint_time) {
    const auto d = day_of(t);
    auto it = std::find_if(encounters.begin(), encounters.end(), [&](const auto& e) { return day_of(e.start_min) == d; });
    if (it == encounters.end()) {
      auto e = make_encounter(d);
      e.start_min = std::clamp(e.start_min, record_start, record_end);
      e.end_min = std::clamp(e.end_min, e.start_min, record_end);
      it = encounters.insert(std::upper_bound(encounters.begin(), encounters.end(), e,
                                              [](const auto& a, const auto& b) { return a.start_min < b.start_min; }),
                             e);
    }
    endpoint_encounter[code] = static_cast<std::size_t>(it - encounters.begin());
  }
  // Re-resolve indices after all insertions.
  for (auto& [code, idx] : endpoint_encounter) {
    const auto d = day_of(endpoint_time[code]);
    for (std::size_t i = 0; i < encounters.size(); ++i) {
      if (day_of(encounters[i].start_min) == d) idx = i;
    }
  }

  // ---- emit events
  std::vector<EventRecord>& ev = p.events;
  auto emit = [&](std::int64_t t, Modality m, std::string code, Payload payload = std::monostate{}) {
    ev.push_back({t, m, std::move(code), std::move(payload)});
  };
  auto time_in = [&](const EncounterTruth& e) {
    const auto span = e.end_min - e.start_min;
    return e.start_min + (span > 0 ? static_cast<std::int64_t>(unif(rng) * static_cast<double>(span)) : 0);
  };

  for (const auto& e : encounters) {
    if (e.inpatient) {
      emit(e.start_min, Modality::Encounter, std::string(kAdmitCode));
      emit(e.end_min, Modality::Encounter, std::string(kDischargeCode));
    } else {
      emit(e.start_min, Modality::Encounter, std::string(kVisitCode));
    }
  }

  auto signals_at = [&](std::int64_t t) {
    DenseVec s(k.n_signals, 0.0);
    for (std::size_t f = 0; f < n_factors; ++f) {
      if (factor_onset[f] && *factor_onset[f] <= t) s[f] = 1.0;
    }
    for (std::size_t m = 0; m < cfg.motifs.size(); ++m) {
      if (motif_onset[m] && *motif_onset[m] <= t) s[n_factors + m] = 1.0;
    }
    return s;
  };

  // Chronic codes: trigger diagnoses, motif codes and endpoints recur at later visits.
  auto emit_chronic = [&](const std::string& code, Modality m, std::int64_t onset) {
    bool first = true;
    for (const auto& e : encounters) {
      if (e.start_min < onset) continue;
      if (first) {
        emit(e.start_min == onset ? onset : time_in(e), m, code);
        first = false;
      } else if (unif(rng) < cfg.recur_prob) {
        emit(time_in(e), m, code);
      }
    }
  };
  for (std::size_t f = 0; f < n_factors; ++f) {
    if (factor_onset[f] && !factor_code[f].empty() && trigger_owner.count(factor_code[f]) &&
        trigger_owner.at(factor_code[f]) == f) {
      emit_chronic(factor_code[f], Modality::Diagnosis, *factor_onset[f]);
      truth.factors.push_back({f, factor_code[f], *factor_onset[f]});
    } else if (factor_onset[f]) {
      truth.factors.push_back({f, factor_code[f], *factor_onset[f]});
    }
  }
  for (std::size_t m = 0; m < cfg.motifs.size(); ++m) {
    if (!motif_onset[m]) continue;
    truth.motifs.push_back(m);
    emit_chronic(cfg.motifs[m].diagnosis, Modality::Diagnosis, *motif_onset[m]);
    // The therapy starts at the first visit after the diagnosis, or the same visit if it is the last.
    auto it = std::find_if(encounters.begin(), encounters.end(), [&](const auto& e) { return e.start_min > *motif_onset[m]; });
    const auto rx_onset = it == encounters.end() ? *motif_onset[m] : it->start_min;
    emit_chronic(cfg.motifs[m].medication, Modality::Medication, rx_onset);
  }
  for (const auto& [code, t] : endpoint_time) {
    const auto& enc = encounters[endpoint_encounter[code]];
    const auto at = std::clamp(t, enc.start_min, enc.end_min);
    emit(at, Modality::Diagnosis, code);
    truth.endpoint_min[code] = at;
    for (const auto& e : encounters) {
      if (e.start_min > enc.start_min && unif(rng) < cfg.recur_prob) emit(time_in(e), Modality::Diagnosis, code);
    }
  }

  // Background events: Poisson counts per modality, each assigned to a uniformly chosen visit.
  const double years = static_cast<double>(record_end - record_start) / kMinutesPerYear;
  const auto& dx = cfg.modality(Modality::Diagnosis);
  const auto& rx = cfg.modality(Modality::Medication);
  std::vector<int> personal_dx;
  for (int i = 0; i < dx.personal_codes; ++i) personal_dx.push_back(static_cast<int>(detail::zipf_draw(rng, dx.n_codes)));
  std::vector<int> personal_rx;
  for (int i = 0; i < rx.personal_codes && !personal_dx.empty(); ++i) {
    personal_rx.push_back(personal_dx[static_cast<std::size_t>(i) % personal_dx.size()] % rx.n_codes);
  }
  // Patient-level latent offsets make repeated measurements informative about each other.
  std::array<std::vector<double>, kNumModalities> latent;
  for (auto m : {Modality::Lab, Modality::Vital, Modality::Flowsheet}) {
    for (int c = 0; c < cfg.modality(m).n_codes; ++c) latent[index_of(m)].push_back(normal(rng));
  }

  for (auto m : kAllModalities) {
    if (m == Modality::Encounter || encounters.empty()) continue;
    const auto& spec = cfg.modality(m);
    std::poisson_distribution<int> count(spec.rate_per_year * years);
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const auto& enc = encounters[static_cast<std::size_t>(unif(rng) * static_cast<double>(encounters.size())) %
                                   encounters.size()];
      const auto t = time_in(enc);
      switch (m) {
        case Modality::Diagnosis: {
          const bool personal = !personal_dx.empty() && unif(rng) < spec.personal_fraction;
          const int code = personal ? personal_dx[static_cast<std::size_t>(unif(rng) * personal_dx.size()) % personal_dx.size()]
                                    : static_cast<int>(detail::zipf_draw(rng, spec.n_codes));
          emit(t, m, plain_code("DX", code));
          break;
        }
        case Modality::Medication: {
          const bool personal = !personal_rx.empty() && unif(rng) < spec.personal_fraction;
          const int code = personal ? personal_rx[static_cast<std::size_t>(unif(rng) * personal_rx.size()) % personal_rx.size()]
                                    : static_cast<int>(detail::zipf_draw(rng, spec.n_codes));
          emit(t, m, plain_code("RX", code));
          break;
        }
        case Modality::Lab:
        case Modality::Vital:
        case Modality::Flowsheet: {
          const int code = static_cast<int>(detail::zipf_draw(rng, spec.n_codes, 0.8));
          const int cls = code % std::max(1, spec.n_classes);
          auto name = measurement_code(m, cls, code);
          const double z = 0.8 * latent[index_of(m)][static_cast<std::size_t>(code)] + 0.6 * normal(rng);
          // Active triggers shift their paired lab (factor f pairs with lab code f).
          double shift = 0.0;
          if (m == Modality::Lab) {
            for (std::size_t f = 0; f < n_factors; ++f) {
              if (factor_onset[f] && *factor_onset[f] <= t && static_cast<int>(f) % spec.n_codes == code) shift += 2.0;
            }
          }
          if (detail::is_categorical_code(m, code)) {
            static const std::array<const char*, 5> pos = {"pos", "POS ", "positive", "+", "Positive"};
            static const std::array<const char*, 5> neg = {"neg", "negative", "-", "NEG", " Negative"};
            const bool positive = z + shift > 0.5;
            const double u = unif(rng);
            std::string text = u < 0.02 ? "indeterminate" : positive ? pos[static_cast<std::size_t>(u * 5) % 5]
                                                                      : neg[static_cast<std::size_t>(u * 5) % 5];
            emit(t, m, std::move(name), Answer{std::move(text)});
          } else if (detail::is_constant_code(m, code)) {
            emit(t, m, std::move(name), Measurement{1.0});
          } else {
            const double center = k.centers[index_of(m)][static_cast<std::size_t>(code)];
            const double v = std::exp(center + 0.5 * (z + shift));
            emit(t, m, std::move(name), Measurement{v});
          }
          break;
        }
        case Modality::NoteText:
        case Modality::ReportText:
        case Modality::Image: {
          const auto d = cfg.dense_dim(m);
          const auto s = signals_at(t);
          DenseVec x(d);
          for (std::size_t j = 0; j < d; ++j) {
            double acc = cfg.payload_noise * normal(rng);
            for (std::size_t q = 0; q < s.size(); ++q) acc += s[q] * k.projections[index_of(m)][q][j];
            x[j] = acc;
          }
          const char* prefix = m == Modality::NoteText ? "NOTE" : m == Modality::ReportText ? "RPT" : "IMG";
          emit(t, m, plain_code(prefix, static_cast<int>(unif(rng) * spec.n_codes) % spec.n_codes), std::move(x));
          break;
        }
        default:
          break;
      }
    }
  }

  std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.time_min < b.time_min; });
  p.demographics.age_at_last_event_min = ev.empty() ? record_start : ev.back().time_min;
  truth.encounters = std::move(encounters);
  return p;
}

inline json to_json(const CohortConfig& c);

inline GeneratedCohort generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  GeneratedCohort out;
  const detail::CohortConstants k(cfg);
  out.patients.reserve(cfg.n_patients);
  out.manifest.patients.resize(cfg.n_patients);
  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    out.patients.push_back(generate_patient(cfg, k, i, out.manifest.patients[i]));
  }
  out.manifest.config_hash = sha256_hex(to_json(cfg).dump());
  return out;
}

// Exact generative hazard of `endpoint` at time t: baseline times the multipliers of every factor whose
// trigger appears in the history at least `lag` before t.
inline double oracle_hazard(const PatientRecord& p, std::int64_t t_min, const CohortConfig& cfg,
                            const std::string& endpoint) {
  require(t_min >= 0, "oracle_hazard: time before birth");
  if (!p.events.empty()) {
    require(t_min <= p.events.front().time_min + detail::years_to_min(cfg.horizon_years),
            "oracle_hazard: time beyond the generator horizon");
  }
  auto ep = std::find_if(cfg.endpoints.begin(), cfg.endpoints.end(), [&](const auto& e) { return e.code == endpoint; });
  require(ep != cfg.endpoints.end(), "oracle_hazard: unknown endpoint '" + endpoint + "'");
  double h = ep->baseline_per_year;
  for (const auto& rf : cfg.risk_factors) {
    if (rf.endpoint != endpoint) continue;
    const auto lag = static_cast<std::int64_t>(std::llround(rf.lag_days * kMinutesPerDay));
    const bool active = std::any_of(p.events.begin(), p.events.end(), [&](const EventRecord& e) {
      return e.modality == Modality::Diagnosis && e.time_min + lag <= t_min &&
             std::find(rf.triggers.begin(), rf.triggers.end(), e.code) != rf.triggers.end();
    });
    if (active) h *= rf.multiplier;
  }
  return h;
}

// ---------------------------------------------------------------- serialization

inline json to_json(const ModalitySpec& s) {
  return {{"rate_per_year", s.rate_per_year},
          {"n_codes", s.n_codes},
          {"n_classes", s.n_classes},
          {"personal_fraction", s.personal_fraction},
          {"personal_codes", s.personal_codes}};
}

inline json to_json(const CohortConfig& c) {
  json mods = json::object();
  for (auto m : kAllModalities) {
    if (m != Modality::Encounter) mods[std::string(to_string(m))] = to_json(c.modality(m));
  }
  json eps = json::array();
  for (const auto& e : c.endpoints) eps.push_back({{"code", e.code}, {"baseline_per_year", e.baseline_per_year}});
  json rfs = json::array();
  for (const auto& f : c.risk_factors) {
    rfs.push_back({{"triggers", f.triggers},
                   {"multiplier", f.multiplier},
                   {"endpoint", f.endpoint},
                   {"lag_days", f.lag_days},
                   {"prevalence", f.prevalence},
                   {"onset_at_start", f.onset_at_start}});
  }
  json motifs = json::array();
  for (const auto& m : c.motifs) {
    motifs.push_back({{"diagnosis", m.diagnosis}, {"medication", m.medication}, {"prevalence", m.prevalence}});
  }
  return {{"schema_version", CohortConfig::kSchemaVersion},
          {"n_patients", c.n_patients},
          {"seed", c.seed},
          {"horizon_years", c.horizon_years},
          {"min_age_years", c.min_age_years},
          {"max_age_years", c.max_age_years},
          {"first_calendar_year", c.first_calendar_year},
          {"encounter_rate_per_year", c.encounter_rate_per_year},
          {"inpatient_fraction", c.inpatient_fraction},
          {"recur_prob", c.recur_prob},
          {"mortality_per_year", c.mortality_per_year},
          {"modalities", std::move(mods)},
          {"note_dim", c.note_dim},
          {"image_dim", c.image_dim},
          {"payload_noise", c.payload_noise},
          {"ethnicity_dim", c.ethnicity_dim},
          {"n_ethnicities", c.n_ethnicities},
          {"endpoints", std::move(eps)},
          {"risk_factors", std::move(rfs)},
          {"motifs", std::move(motifs)}};
}

inline CohortConfig cohort_config_from_json(const json& j) {
  require(j.value("schema_version", CohortConfig::kSchemaVersion) == CohortConfig::kSchemaVersion,
          "unsupported cohort config schema version");
  CohortConfig c = standard_config();
  c.n_patients = j.value("n_patients", c.n_patients);
  c.seed = j.value("seed", c.seed);
  c.horizon_years = j.value("horizon_years", c.horizon_years);
  c.min_age_years = j.value("min_age_years", c.min_age_years);
  c.max_age_years = j.value("max_age_years", c.max_age_years);
  c.first_calendar_year = j.value("first_calendar_year", c.first_calendar_year);
  c.encounter_rate_per_year = j.value("encounter_rate_per_year", c.encounter_rate_per_year);
  c.inpatient_fraction = j.value("inpatient_fraction", c.inpatient_fraction);
  c.recur_prob = j.value("recur_prob", c.recur_prob);
  c.mortality_per_year = j.value("mortality_per_year", c.mortality_per_year);
  c.note_dim = j.value("note_dim", c.note_dim);
  c.image_dim = j.value("image_dim", c.image_dim);
  c.payload_noise = j.value("payload_noise", c.payload_noise);
  c.ethnicity_dim = j.value("ethnicity_dim", c.ethnicity_dim);
  c.n_ethnicities = j.value("n_ethnicities", c.n_ethnicities);
  if (auto it = j.find("modalities"); it != j.end()) {
    for (const auto& [name, s] : it->items()) {
      auto& m = c.modality(modality_from_string(name));
      m.rate_per_year = s.value("rate_per_year", m.rate_per_year);
      m.n_codes = s.value("n_codes", m.n_codes);
      m.n_classes = s.value("n_classes", m.n_classes);
      m.personal_fraction = s.value("personal_fraction", m.personal_fraction);
      m.personal_codes = s.value("personal_codes", m.personal_codes);
    }
  }
  if (auto it = j.find("endpoints"); it != j.end()) {
    c.endpoints.clear();
    for (const auto& e : *it) c.endpoints.push_back({e.at("code").get<std::string>(), e.at("baseline_per_year").get<double>()});
  }
  if (auto it = j.find("risk_factors"); it != j.end()) {
    c.risk_factors.clear();
    for (const auto& f : *it) {
      RiskFactor rf;
      rf.triggers = f.at("triggers").get<std::vector<std::string>>();
      rf.multiplier = f.at("multiplier").get<double>();
      rf.endpoint = f.at("endpoint").get<std::string>();
      rf.lag_days = f.value("lag_days", 0.0);
      rf.prevalence = f.value("prevalence", 0.0);
      rf.onset_at_start = f.value("onset_at_start", 1.0);
      c.risk_factors.push_back(std::move(rf));
    }
  }
  if (auto it = j.find("motifs"); it != j.end()) {
    c.motifs.clear();
    for (const auto& m : *it) {
      c.motifs.push_back({m.at("diagnosis").get<std::string>(), m.at("medication").get<std::string>(),
                          m.at("prevalence").get<double>()});
    }
  }
  c.validate();
  return c;
}

inline json to_json(const CohortManifest& m) {
  json patients = json::array();
  for (const auto& p : m.patients) {
    json enc = json::array();
    for (const auto& e : p.encounters) enc.push_back({e.start_min, e.end_min, e.inpatient});
    json factors = json::array();
    for (const auto& f : p.factors) factors.push_back({{"factor", f.factor}, {"code", f.code}, {"onset_min", f.onset_min}});
    json j = {{"id", p.patient_id},
              {"record_start_min", p.record_start_min},
              {"record_end_min", p.record_end_min},
              {"encounters", std::move(enc)},
              {"factors", std::move(factors)},
              {"endpoints", p.endpoint_min},
              {"motifs", p.motifs}};
    j["death_min"] = p.death_min ? json(*p.death_min) : json(nullptr);
    patients.push_back(std::move(j));
  }
  return {{"schema_version", 1}, {"config_hash", m.config_hash}, {"patients", std::move(patients)}};
}

inline CohortManifest manifest_from_json(const json& j) {
  CohortManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& pj : j.at("patients")) {
    PatientTruth p;
    p.patient_id = pj.at("id").get<std::string>();
    p.record_start_min = pj.at("record_start_min").get<std::int64_t>();
    p.record_end_min = pj.at("record_end_min").get<std::int64_t>();
    if (!pj.at("death_min").is_null()) p.death_min = pj.at("death_min").get<std::int64_t>();
    for (const auto& e : pj.at("encounters")) {
      p.encounters.push_back({e.at(0).get<std::int64_t>(), e.at(1).get<std::int64_t>(), e.at(2).get<bool>()});
    }
    for (const auto& f : pj.at("factors")) {
      p.factors.push_back({f.at("factor").get<std::size_t>(), f.at("code").get<std::string>(),
                           f.at("onset_min").get<std::int64_t>()});
    }
    p.endpoint_min = pj.at("endpoints").get<std::map<std::string, std::int64_t>>();
    p.motifs = pj.at("motifs").get<std::vector<std::size_t>>();
    m.patients.push_back(std::move(p));
  }
  return m;
}

}  // namespace chronoscope::synth
