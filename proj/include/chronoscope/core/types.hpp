#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "chronoscope/core/error.hpp"

namespace chronoscope {

inline constexpr std::int64_t kMinutesPerDay = 24 * 60;
inline constexpr double kMinutesPerYear = 365.25 * 24.0 * 60.0;
// Encoder time inputs are expressed as a fraction of 100 years.
inline constexpr double kMinutesPer100Years = 100.0 * kMinutesPerYear;
inline constexpr double kMaxDurationDays = 36500.0;

enum class Modality : std::uint8_t {
  Diagnosis,
  Medication,
  Lab,
  Vital,
  Flowsheet,
  Encounter,  // admission / discharge / outpatient visit markers
  NoteText,
  ReportText,
  Image,
};

inline constexpr std::size_t kNumModalities = 9;
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {
    Modality::Diagnosis, Modality::Medication, Modality::Lab,        Modality::Vital, Modality::Flowsheet,
    Modality::Encounter, Modality::NoteText,   Modality::ReportText, Modality::Image};

inline constexpr std::array<std::string_view, kNumModalities> kModalityNames = {
    "Diagnosis", "Medication", "Lab", "Vital", "Flowsheet", "Encounter", "NoteText", "ReportText", "Image"};

constexpr std::size_t index_of(Modality m) noexcept { return static_cast<std::size_t>(m); }
constexpr std::string_view to_string(Modality m) noexcept { return kModalityNames[index_of(m)]; }

inline Modality modality_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kNumModalities; ++i) {
    if (kModalityNames[i] == s) return kAllModalities[i];
  }
  fail(ErrorKind::Validation, "unknown modality '" + std::string(s) + "'");
}

constexpr bool is_unstructured(Modality m) noexcept {
  return m == Modality::NoteText || m == Modality::ReportText || m == Modality::Image;
}
constexpr bool is_structured(Modality m) noexcept { return !is_unstructured(m); }
// Modalities whose tokens are (code, bin) or (code, category) pairs and carry a subdomain class.
constexpr bool is_measurement(Modality m) noexcept {
  return m == Modality::Lab || m == Modality::Vital || m == Modality::Flowsheet;
}

struct TokenId {
  std::uint32_t value = 0;
  friend bool operator==(TokenId, TokenId) = default;
  friend auto operator<=>(TokenId, TokenId) = default;
};

using DenseVec = std::vector<double>;

// Raw numeric measurement, before binning.
struct Measurement {
  double value = 0.0;
  friend bool operator==(const Measurement&, const Measurement&) = default;
};

// Raw categorical answer, before canonicalization.
struct Answer {
  std::string text;
  friend bool operator==(const Answer&, const Answer&) = default;
};

// monostate: a code-only structured event (diagnosis, medication, encounter marker) not yet tokenized.
using Payload = std::variant<std::monostate, TokenId, Measurement, Answer, DenseVec>;

struct EventRecord {
  std::int64_t time_min = 0;  // minutes since birth
  Modality modality = Modality::Diagnosis;
  std::string code;
  Payload payload;

  bool has_token() const noexcept { return std::holds_alternative<TokenId>(payload); }
  TokenId token() const { return std::get<TokenId>(payload); }
  const DenseVec& dense() const { return std::get<DenseVec>(payload); }

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

enum class Sex : std::uint8_t { Male, Female, Unknown };

inline constexpr std::string_view to_string(Sex s) noexcept {
  switch (s) {
    case Sex::Male:
      return "Male";
    case Sex::Female:
      return "Female";
    default:
      return "Unknown";
  }
}

inline Sex sex_from_string(std::string_view s) {
  if (s == "Male") return Sex::Male;
  if (s == "Female") return Sex::Female;
  if (s == "Unknown") return Sex::Unknown;
  fail(ErrorKind::Validation, "unknown sex '" + std::string(s) + "'");
}

struct Demographics {
  Sex sex = Sex::Unknown;
  DenseVec ethnicity_vec;
  std::int64_t birth_epoch_min = 0;  // minutes since 1970-01-01
  std::int64_t age_at_last_event_min = 0;

  friend bool operator==(const Demographics&, const Demographics&) = default;
};

struct PatientRecord {
  std::string patient_id;
  Demographics demographics;
  std::vector<EventRecord> events;  // ascending time_min, stable under ties
  std::optional<std::int64_t> death_time_min;

  friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

enum class Split : std::uint8_t { Train, Val, Test };

inline constexpr std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    default:
      return "test";
  }
}

inline Split split_from_string(std::string_view s) {
  if (s == "train" || s == "Train") return Split::Train;
  if (s == "val" || s == "Val") return Split::Val;
  if (s == "test" || s == "Test") return Split::Test;
  fail(ErrorKind::Validation, "unknown split '" + std::string(s) + "'");
}

struct TteInstance {
  std::string patient_id;
  std::int64_t snapshot_min = 0;
  double duration_days = 0.0;
  bool event = false;
  Split split = Split::Train;

  friend bool operator==(const TteInstance&, const TteInstance&) = default;
};

enum class TaskCategory : std::uint8_t { Onset, Progression, TreatmentResponse, AdverseEvent, Operations };

inline constexpr std::array<std::string_view, 5> kTaskCategoryNames = {"Onset", "Progression", "TreatmentResponse",
                                                                       "AdverseEvent", "Operations"};

inline std::string_view to_string(TaskCategory c) noexcept { return kTaskCategoryNames[static_cast<std::size_t>(c)]; }

inline TaskCategory task_category_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kTaskCategoryNames.size(); ++i) {
    if (kTaskCategoryNames[i] == s) return static_cast<TaskCategory>(i);
  }
  fail(ErrorKind::Validation, "unknown task category '" + std::string(s) + "'");
}

enum class SnapshotKind : std::uint8_t {
  DischargeAfterVisits,  // any discharge marker after the first N visits
  FirstOccurrence,       // first occurrence of any listed code
  AdmissionOffset,       // admission marker + fixed offset
};

struct SnapshotRule {
  SnapshotKind kind = SnapshotKind::DischargeAfterVisits;
  std::vector<std::string> codes;         // FirstOccurrence
  int min_prior_visits = 5;               // DischargeAfterVisits
  std::int64_t offset_min = kMinutesPerDay;  // AdmissionOffset
};

enum class EndpointMode : std::uint8_t {
  FirstEver,          // absolute first occurrence; snapshots must precede it
  NextAfterSnapshot,  // first occurrence strictly after each snapshot
};

struct EndpointRule {
  std::vector<std::string> codes;
  bool include_death = false;
  EndpointMode mode = EndpointMode::FirstEver;
};

struct TaskSpec {
  std::string name;
  TaskCategory category = TaskCategory::Onset;
  int tau_days = 365;
  SnapshotRule snapshot_rule;
  EndpointRule endpoint_rule;
  std::optional<Sex> sex_filter;
  bool age_sd_filter = false;
};

}  // namespace chronoscope
