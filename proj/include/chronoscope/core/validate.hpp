#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "chronoscope/core/types.hpp"

namespace chronoscope {

enum class Violation {
  NegativeTime,
  UnsortedEvents,
  PayloadKind,      // structured event with a dense payload or vice versa
  DenseDimension,   // dense payload length differs from the configured modality dimension
  NonFinite,
  NegativeAge,
};

struct ViolationEntry {
  Violation kind;
  std::size_t event_index;  // npos for patient-level violations
  std::string message;
};

struct ValidationReport {
  std::vector<ViolationEntry> violations;
  bool clean() const noexcept { return violations.empty(); }
  bool has(Violation v) const noexcept {
    for (const auto& e : violations) {
      if (e.kind == v) return true;
    }
    return false;
  }
};

// Expected dense payload length per modality; 0 means "not checked".
using DenseDims = std::array<std::size_t, kNumModalities>;

inline ValidationReport validate_patient(const PatientRecord& p, const DenseDims& dims = {}) {
  ValidationReport report;
  constexpr auto npos = static_cast<std::size_t>(-1);
  auto add = [&](Violation v, std::size_t i, std::string msg) { report.violations.push_back({v, i, std::move(msg)}); };

  if (p.demographics.age_at_last_event_min < 0) add(Violation::NegativeAge, npos, "negative age at last event");
  for (double v : p.demographics.ethnicity_vec) {
    if (!std::isfinite(v)) {
      add(Violation::NonFinite, npos, "non-finite ethnicity embedding");
      break;
    }
  }

  for (std::size_t i = 0; i < p.events.size(); ++i) {
    const auto& e = p.events[i];
    if (e.time_min < 0) add(Violation::NegativeTime, i, "event time before birth");
    if (i > 0 && e.time_min < p.events[i - 1].time_min) add(Violation::UnsortedEvents, i, "events not sorted by time");

    const bool dense = std::holds_alternative<DenseVec>(e.payload);
    if (is_unstructured(e.modality) != dense) {
      add(Violation::PayloadKind, i,
          std::string(to_string(e.modality)) + (dense ? " event carries a dense payload" : " event lacks a dense payload"));
      continue;
    }
    if (dense) {
      const auto& x = e.dense();
      const std::size_t want = dims[index_of(e.modality)];
      if (want != 0 && x.size() != want) {
        add(Violation::DenseDimension, i,
            "dense payload has dim " + std::to_string(x.size()) + ", expected " + std::to_string(want));
      }
      for (double v : x) {
        if (!std::isfinite(v)) {
          add(Violation::NonFinite, i, "non-finite dense payload");
          break;
        }
      }
    } else if (const auto* m = std::get_if<Measurement>(&e.payload); m && !std::isfinite(m->value)) {
      add(Violation::NonFinite, i, "non-finite measurement");
    }
  }
  return report;
}

}  // namespace chronoscope
