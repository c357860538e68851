#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "chronoscope/curation/curation.hpp"

using namespace chronoscope;
using namespace chronoscope::curation;

namespace {

constexpr std::int64_t kDay = kMinutesPerDay;

// A patient with visits on the given days (birth at epoch 0), inpatient discharges on `discharge_days`.
PatientRecord visits_patient(const std::string& id, const std::vector<int>& days, const std::set<int>& discharge_days) {
  PatientRecord p;
  p.patient_id = id;
  p.demographics.sex = Sex::Female;
  for (int d : days) {
    const std::int64_t t = static_cast<std::int64_t>(d) * kDay + 600;
    if (discharge_days.count(d)) {
      p.events.push_back({t, Modality::Encounter, std::string(synth::kAdmitCode)});
      p.events.push_back({t + 120, Modality::Encounter, std::string(synth::kDischargeCode)});
    } else {
      p.events.push_back({t, Modality::Encounter, std::string(synth::kVisitCode)});
    }
  }
  return p;
}

void add_event(PatientRecord& p, std::int64_t t, const std::string& code) {
  p.events.push_back({t, Modality::Diagnosis, code});
  std::stable_sort(p.events.begin(), p.events.end(), [](const auto& a, const auto& b) { return a.time_min < b.time_min; });
}

TaskSpec onset(int tau, bool age = false) {
  TaskSpec t;
  t.name = "onset";
  t.tau_days = tau;
  t.endpoint_rule.codes = {"END-ONSET"};
  t.age_sd_filter = age;
  return t;
}

}  // namespace

TEST(Blackout, Branches) {
  EXPECT_EQ(blackout_days(365), 30);
  EXPECT_EQ(blackout_days(91), 30);
  EXPECT_EQ(blackout_days(90), 7);
  EXPECT_EQ(blackout_days(60), 7);
  EXPECT_EQ(blackout_days(59), 1);
  EXPECT_EQ(blackout_days(30), 1);
  EXPECT_THROW(blackout_days(0), Error);
}

TEST(Curation, HandExamples) {
  // Six visits; discharge on the sixth (index 5) and seventh.
  auto late = visits_patient("late", {1, 2, 3, 4, 5, 10, 20}, {10, 20});
  add_event(late, 8 * kDay, "END-ONSET");  // endpoint before every eligible snapshot
  auto close = visits_patient("close", {1, 2, 3, 4, 5, 10}, {10});
  add_event(close, 13 * kDay, "END-ONSET");  // 3 days after the snapshot
  auto early = visits_patient("early", {1, 2, 3, 4, 10}, {10});  // discharge at visit index 4
  add_event(early, 400 * kDay, "END-ONSET");
  auto ok = visits_patient("ok", {1, 2, 3, 4, 5, 10, 30}, {10});
  add_event(ok, 200 * kDay, "END-ONSET");
  auto censored = visits_patient("cens", {1, 2, 3, 4, 5, 10, 50}, {10});
  const std::vector<PatientRecord> cohort = {late, close, early, ok, censored};

  const auto r = curate_task(cohort, onset(365));
  EXPECT_EQ(r.log.dropped_no_snapshot, 2u);
  EXPECT_EQ(r.log.dropped_blackout, 1u);
  ASSERT_EQ(r.instances.size(), 2u);
  EXPECT_TRUE(r.log.reconciles());
  EXPECT_EQ(r.instances[0].patient_id, "ok");
  EXPECT_TRUE(r.instances[0].event);
  EXPECT_NEAR(r.instances[0].duration_days, (200.0 * kDay - (10.0 * kDay + 720)) / kDay, 1e-12);
  EXPECT_EQ(r.instances[1].patient_id, "cens");
  EXPECT_FALSE(r.instances[1].event);
  EXPECT_NEAR(r.instances[1].duration_days, (50.0 * kDay + 600 - (10.0 * kDay + 720)) / kDay, 1e-12);

  // With a 1-day blackout the close endpoint is kept.
  const auto short_tau = curate_task(cohort, onset(30));
  EXPECT_EQ(short_tau.log.dropped_blackout, 0u);
  EXPECT_EQ(short_tau.log.final_events, 2u);

  auto sexed = onset(365);
  sexed.sex_filter = Sex::Male;
  EXPECT_THROW(curate_task(cohort, sexed), Error);  // zero eligible
  auto missing = onset(365);
  missing.endpoint_rule.codes = {"NOPE"};
  EXPECT_THROW(curate_task(cohort, missing), Error);
}

TEST(Curation, DeathEndpointAndNextAfterSnapshot) {
  auto p = visits_patient("d", {0, 1, 2, 100}, {});
  add_event(p, 600, "PROG");
  add_event(p, 1 * kDay + 700, "IDX");
  add_event(p, 100 * kDay + 600, "PROG");
  TaskSpec t;
  t.name = "prog";
  t.category = TaskCategory::Progression;
  t.tau_days = 365;
  t.snapshot_rule.kind = SnapshotKind::FirstOccurrence;
  t.snapshot_rule.codes = {"IDX"};
  t.endpoint_rule.codes = {"PROG"};
  t.endpoint_rule.mode = EndpointMode::FirstEver;
  auto q = visits_patient("q", {0, 1, 5}, {});
  add_event(q, 1 * kDay + 700, "IDX");
  q.death_time_min = 200 * kDay;
  const std::vector<PatientRecord> cohort = {p, q};

  auto first = curate_task(cohort, t);
  EXPECT_EQ(first.log.dropped_no_snapshot, 1u);
  ASSERT_EQ(first.instances.size(), 1u);
  EXPECT_FALSE(first.instances[0].event);  // death is censoring here
  EXPECT_NEAR(first.instances[0].duration_days, (200.0 * kDay - (kDay + 700.0)) / kDay, 1e-12);

  t.endpoint_rule.mode = EndpointMode::NextAfterSnapshot;
  t.endpoint_rule.include_death = true;
  auto next = curate_task(cohort, t);
  ASSERT_EQ(next.instances.size(), 2u);
  EXPECT_TRUE(next.instances[0].event);
  EXPECT_NEAR(next.instances[0].duration_days, (99.0 * kDay - 100.0) / kDay, 1e-12);
  EXPECT_TRUE(next.instances[1].event);
  EXPECT_NEAR(next.instances[1].duration_days, (200.0 * kDay - (kDay + 700.0)) / kDay, 1e-12);
}

TEST(Curation, AdmissionOffsetSnapshots) {
  auto p = visits_patient("a", {1, 2, 40}, {2});
  add_event(p, 60 * kDay, "OUT");
  TaskSpec t;
  t.name = "ops";
  t.category = TaskCategory::Operations;
  t.tau_days = 30;
  t.snapshot_rule.kind = SnapshotKind::AdmissionOffset;
  t.endpoint_rule.codes = {"OUT"};
  const auto r = curate_task({p}, t);
  ASSERT_EQ(r.instances.size(), 1u);
  EXPECT_EQ(r.instances[0].snapshot_min, 2 * kDay + 600 + kDay);
}

TEST(Incidence, Examples) {
  std::vector<TteInstance> xs;
  for (int i = 0; i < 10; ++i) xs.push_back({"p" + std::to_string(i), 0, 5.0 * (i + 1), i % 3 == 0});
  EXPECT_DOUBLE_EQ(incidence(xs, 1000), 40.0);
  EXPECT_DOUBLE_EQ(incidence(xs, 20), 20.0);  // events at 5 and 20 days
  for (auto& x : xs) x.event = true;
  EXPECT_DOUBLE_EQ(incidence(xs, 1000), 100.0);
  for (auto& x : xs) x.event = false;
  EXPECT_DOUBLE_EQ(incidence(xs, 1000), 0.0);
  EXPECT_THROW(incidence({}, 10), Error);
}
namespace {

// Expected event patients straight from the generator's ground truth.
std::set<std::string> manifest_onset_events(const synth::GeneratedCohort& g, const TaskSpec& spec) {
  const auto& ps = g.manifest.patients;
  double lo = -1e300, hi = 1e300;
  if (spec.age_sd_filter) {
    std::vector<double> ages;
    for (const auto& t : ps) {
      if (split_assign(t.patient_id) == Split::Train && t.endpoint_min.count("END-ONSET")) {
        ages.push_back(static_cast<double>(t.endpoint_min.at("END-ONSET")));
      }
    }
    double m = 0;
    for (double a : ages) m += a / static_cast<double>(ages.size());
    double v = 0;
    for (double a : ages) v += (a - m) * (a - m) / static_cast<double>(ages.size() - 1);
    lo = m - 2 * std::sqrt(v);
    hi = m + 2 * std::sqrt(v);
  }
  const double b = blackout_days(spec.tau_days) * 1440.0;
  std::set<std::string> out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& t = ps[i];
    if (spec.sex_filter && g.patients[i].demographics.sex != *spec.sex_filter) continue;
    auto it = t.endpoint_min.find("END-ONSET");
    if (it == t.endpoint_min.end()) continue;
    bool any = false;
    for (std::size_t k = 5; k < t.encounters.size(); ++k) {
      const auto& e = t.encounters[k];
      const double s = static_cast<double>(e.end_min);
      if (e.inpatient && s < static_cast<double>(it->second) && s >= lo && s <= hi && static_cast<double>(it->second) - s >= b) {
        any = true;
      }
    }
    if (any) out.insert(t.patient_id);
  }
  return out;
}

std::set<std::string> manifest_progression_events(const synth::GeneratedCohort& g, int tau) {
  const double b = blackout_days(tau) * 1440.0;
  std::set<std::string> out;
  for (const auto& t : g.manifest.patients) {
    std::optional<std::int64_t> snap;
    for (const auto& f : t.factors) {
      if (f.code == "TRG-000") snap = snap ? std::min(*snap, f.onset_min) : f.onset_min;
    }
    if (!snap) continue;
    std::optional<std::int64_t> end;
    if (auto it = t.endpoint_min.find("END-PROG"); it != t.endpoint_min.end()) end = it->second;
    if (t.death_min) end = end ? std::min(*end, *t.death_min) : *t.death_min;
    if (end && *snap < *end && static_cast<double>(*end - *snap) >= b) out.insert(t.patient_id);
  }
  return out;
}

void check_invariants(const CurationResult& r, const TaskSpec& spec) {
  EXPECT_TRUE(r.log.reconciles());
  std::set<std::string> ids;
  for (const auto& x : r.instances) {
    EXPECT_TRUE(ids.insert(x.patient_id).second) << "duplicate " << x.patient_id;
    if (x.event) EXPECT_GE(x.duration_days, blackout_days(spec.tau_days));
    EXPECT_LE(x.duration_days * kMinutesPerDay, static_cast<double>(kMinutesPer100Years));
    EXPECT_GE(x.duration_days, 0.0);
  }
}

}  // namespace

TEST(Curation, EventCountsMatchManifest) {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const auto g = synth::generate_cohort(synth::standard_config(1500, seed));
    auto a = onset(730, true);
    auto b = onset(90);
    b.name = "onset-female";
    b.sex_filter = Sex::Female;
    TaskSpec prog;
    prog.name = "prog";
    prog.category = TaskCategory::Progression;
    prog.tau_days = 365;
    prog.snapshot_rule.kind = SnapshotKind::FirstOccurrence;
    prog.snapshot_rule.codes = {"TRG-000"};
    prog.endpoint_rule.codes = {"END-PROG"};
    prog.endpoint_rule.include_death = true;
    const auto results = curate_tasks(g.patients, {a, b, prog}, {.seed = seed});
    const std::vector<std::set<std::string>> want = {manifest_onset_events(g, a), manifest_onset_events(g, b),
                                                     manifest_progression_events(g, 365)};
    const std::vector<TaskSpec> specs = {a, b, prog};
    for (std::size_t k = 0; k < 3; ++k) {
      std::set<std::string> got;
      for (const auto& x : results[k].instances) {
        if (x.event) got.insert(x.patient_id);
      }
      EXPECT_GT(want[k].size(), 10u);
      EXPECT_EQ(results[k].log.final_events, want[k].size()) << specs[k].name << " seed " << seed;
      EXPECT_EQ(got, want[k]) << specs[k].name << " seed " << seed;
      check_invariants(results[k], specs[k]);
    }
  }
}

TEST(Curation, DeterministicGivenSeed) {
  const auto g = synth::generate_cohort(synth::standard_config(600, 4));
  const auto a = curate_task(g.patients, onset(365), {.seed = 9});
  const auto b = curate_task(g.patients, onset(365), {.seed = 9});
  EXPECT_EQ(a.instances, b.instances);
  const auto c = curate_task(g.patients, onset(365), {.seed = 10});
  EXPECT_EQ(a.instances.size(), c.instances.size());
  EXPECT_NE(instances_to_csv(a.instances), instances_to_csv(c.instances));
}
