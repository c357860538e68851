#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "chronoscope/core/binio.hpp"
#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/types.hpp"
#include "chronoscope/core/vocabulary.hpp"
#include "json.hpp"

namespace chronoscope {

using json = nlohmann::json;

// ---------------------------------------------------------------- patients (NDJSON)

inline json to_json(const EventRecord& e) {
  json j = {{"t", e.time_min}, {"m", to_string(e.modality)}, {"c", e.code}};
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, TokenId>) {
          j["tok"] = p.value;
        } else if constexpr (std::is_same_v<P, Measurement>) {
          j["v"] = p.value;
        } else if constexpr (std::is_same_v<P, Answer>) {
          j["a"] = p.text;
        } else if constexpr (std::is_same_v<P, DenseVec>) {
          j["x"] = p;
        }
      },
      e.payload);
  return j;
}

inline EventRecord event_from_json(const json& j) {
  EventRecord e;
  e.time_min = j.at("t").get<std::int64_t>();
  e.modality = modality_from_string(j.at("m").get<std::string>());
  e.code = j.at("c").get<std::string>();
  if (auto it = j.find("tok"); it != j.end()) {
    e.payload = TokenId{it->get<std::uint32_t>()};
  } else if (auto v = j.find("v"); v != j.end()) {
    e.payload = Measurement{v->get<double>()};
  } else if (auto a = j.find("a"); a != j.end()) {
    e.payload = Answer{a->get<std::string>()};
  } else if (auto x = j.find("x"); x != j.end()) {
    e.payload = x->get<DenseVec>();
  }
  return e;
}

inline json to_json(const PatientRecord& p) {
  json events = json::array();
  for (const auto& e : p.events) events.push_back(to_json(e));
  json j = {{"id", p.patient_id},
            {"sex", to_string(p.demographics.sex)},
            {"eth", p.demographics.ethnicity_vec},
            {"birth", p.demographics.birth_epoch_min},
            {"age_last", p.demographics.age_at_last_event_min},
            {"events", std::move(events)}};
  if (p.death_time_min) j["death"] = *p.death_time_min;
  return j;
}

inline PatientRecord patient_from_json(const json& j) {
  PatientRecord p;
  p.patient_id = j.at("id").get<std::string>();
  p.demographics.sex = sex_from_string(j.at("sex").get<std::string>());
  p.demographics.ethnicity_vec = j.at("eth").get<DenseVec>();
  p.demographics.birth_epoch_min = j.at("birth").get<std::int64_t>();
  p.demographics.age_at_last_event_min = j.at("age_last").get<std::int64_t>();
  for (const auto& e : j.at("events")) p.events.push_back(event_from_json(e));
  if (auto it = j.find("death"); it != j.end() && !it->is_null()) p.death_time_min = it->get<std::int64_t>();
  return p;
}

inline std::string to_ndjson(const std::vector<PatientRecord>& cohort) {
  std::string out;
  for (const auto& p : cohort) {
    out += to_json(p).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<PatientRecord> from_ndjson(std::string_view text) {
  std::vector<PatientRecord> cohort;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      cohort.push_back(patient_from_json(json::parse(line)));
    } catch (const json::exception& ex) {
      fail(ErrorKind::Validation, "cohort line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return cohort;
}

inline void save_cohort(const std::string& path, const std::vector<PatientRecord>& cohort) {
  write_file(path, to_ndjson(cohort));
}

// ---------------------------------------------------------------- patients (binary columnar)

namespace detail {
inline constexpr std::string_view kCohortMagic = "CHRSCOH1";
enum class PayloadTag : std::uint8_t { None = 0, Token = 1, Value = 2, Answer = 3, Dense = 4 };
}  // namespace detail

// Columnar layout: patient columns first, then flat event columns with per-patient offsets.
inline std::string to_columnar(const std::vector<PatientRecord>& cohort) {
  using detail::PayloadTag;
  binio::Writer w;
  w.put_raw(detail::kCohortMagic);
  w.put<std::uint64_t>(cohort.size());
  for (const auto& p : cohort) w.put_string(p.patient_id);
  for (const auto& p : cohort) w.put<std::uint8_t>(static_cast<std::uint8_t>(p.demographics.sex));
  for (const auto& p : cohort) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.demographics.ethnicity_vec.size()));
    w.put_array(p.demographics.ethnicity_vec.data(), p.demographics.ethnicity_vec.size());
  }
  for (const auto& p : cohort) w.put<std::int64_t>(p.demographics.birth_epoch_min);
  for (const auto& p : cohort) w.put<std::int64_t>(p.demographics.age_at_last_event_min);
  for (const auto& p : cohort) w.put<std::uint8_t>(p.death_time_min.has_value());
  for (const auto& p : cohort) w.put<std::int64_t>(p.death_time_min.value_or(0));
  std::uint64_t offset = 0;
  w.put<std::uint64_t>(offset);
  for (const auto& p : cohort) {
    offset += p.events.size();
    w.put<std::uint64_t>(offset);
  }
  auto each_event = [&](auto&& f) {
    for (const auto& p : cohort)
      for (const auto& e : p.events) f(e);
  };
  each_event([&](const EventRecord& e) { w.put<std::int64_t>(e.time_min); });
  each_event([&](const EventRecord& e) { w.put<std::uint8_t>(static_cast<std::uint8_t>(e.modality)); });
  each_event([&](const EventRecord& e) { w.put_string(e.code); });
  each_event([&](const EventRecord& e) { w.put<std::uint8_t>(static_cast<std::uint8_t>(e.payload.index())); });
  each_event([&](const EventRecord& e) {
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, TokenId>) {
            w.put<std::uint32_t>(p.value);
          } else if constexpr (std::is_same_v<P, Measurement>) {
            w.put<double>(p.value);
          } else if constexpr (std::is_same_v<P, Answer>) {
            w.put_string(p.text);
          } else if constexpr (std::is_same_v<P, DenseVec>) {
            w.put<std::uint32_t>(static_cast<std::uint32_t>(p.size()));
            w.put_array(p.data(), p.size());
          }
        },
        e.payload);
  });
  return std::move(w).take();
}

inline std::vector<PatientRecord> from_columnar(std::string_view data) {
  using detail::PayloadTag;
  binio::Reader r(data);
  if (r.get_raw(detail::kCohortMagic.size()) != detail::kCohortMagic) fail(ErrorKind::Io, "not a columnar cohort file");
  const auto n = r.get<std::uint64_t>();
  std::vector<PatientRecord> cohort(n);
  for (auto& p : cohort) p.patient_id = r.get_string();
  for (auto& p : cohort) p.demographics.sex = static_cast<Sex>(r.get<std::uint8_t>());
  for (auto& p : cohort) {
    p.demographics.ethnicity_vec.resize(r.get<std::uint32_t>());
    for (auto& v : p.demographics.ethnicity_vec) v = r.get<double>();
  }
  for (auto& p : cohort) p.demographics.birth_epoch_min = r.get<std::int64_t>();
  for (auto& p : cohort) p.demographics.age_at_last_event_min = r.get<std::int64_t>();
  std::vector<std::uint8_t> has_death(n);
  for (auto& h : has_death) h = r.get<std::uint8_t>();
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = r.get<std::int64_t>();
    if (has_death[i]) cohort[i].death_time_min = d;
  }
  std::vector<std::uint64_t> offsets(n + 1);
  for (auto& o : offsets) o = r.get<std::uint64_t>();
  for (std::size_t i = 0; i < n; ++i) cohort[i].events.resize(offsets[i + 1] - offsets[i]);
  auto each_event = [&](auto&& f) {
    for (auto& p : cohort)
      for (auto& e : p.events) f(e);
  };
  each_event([&](EventRecord& e) { e.time_min = r.get<std::int64_t>(); });
  each_event([&](EventRecord& e) { e.modality = static_cast<Modality>(r.get<std::uint8_t>()); });
  each_event([&](EventRecord& e) { e.code = r.get_string(); });
  std::vector<std::uint8_t> tags;
  tags.reserve(offsets.back());
  each_event([&](EventRecord&) { tags.push_back(r.get<std::uint8_t>()); });
  std::size_t k = 0;
  each_event([&](EventRecord& e) {
    switch (static_cast<PayloadTag>(tags[k++])) {
      case PayloadTag::None:
        e.payload = std::monostate{};
        break;
      case PayloadTag::Token:
        e.payload = TokenId{r.get<std::uint32_t>()};
        break;
      case PayloadTag::Value:
        e.payload = Measurement{r.get<double>()};
        break;
      case PayloadTag::Answer:
        e.payload = Answer{r.get_string()};
        break;
      case PayloadTag::Dense: {
        DenseVec x(r.get<std::uint32_t>());
        for (auto& v : x) v = r.get<double>();
        e.payload = std::move(x);
        break;
      }
      default:
        fail(ErrorKind::Io, "corrupt payload tag in columnar cohort");
    }
  });
  if (!r.at_end()) fail(ErrorKind::Io, "trailing bytes in columnar cohort");
  return cohort;
}

// Loads either format, sniffing the columnar magic.
inline std::vector<PatientRecord> load_cohort(const std::string& path) {
  const auto data = read_file(path);
  if (data.starts_with(detail::kCohortMagic)) return from_columnar(data);
  return from_ndjson(data);
}

// ---------------------------------------------------------------- vocabulary

inline std::string_view to_string(QualifierKind k) noexcept {
  switch (k) {
    case QualifierKind::Bin:
      return "bin";
    case QualifierKind::Category:
      return "category";
    default:
      return "none";
  }
}

inline QualifierKind qualifier_kind_from_string(std::string_view s) {
  if (s == "bin") return QualifierKind::Bin;
  if (s == "category") return QualifierKind::Category;
  if (s == "none") return QualifierKind::None;
  fail(ErrorKind::Validation, "unknown qualifier kind '" + std::string(s) + "'");
}

inline json to_json(const Vocabulary& v) {
  json entries = json::array();
  for (const auto& e : v.entries()) {
    entries.push_back({{"id", e.id.value},
                       {"modality", to_string(e.modality)},
                       {"code", e.code},
                       {"kind", to_string(e.kind)},
                       {"qualifier", e.qualifier},
                       {"subdomain", e.subdomain}});
  }
  return {{"schema_version", Vocabulary::kSchemaVersion}, {"size", v.size()}, {"entries", std::move(entries)}};
}

inline Vocabulary vocabulary_from_json(const json& j) {
  require(j.at("schema_version").get<int>() == Vocabulary::kSchemaVersion, "unsupported vocabulary schema version");
  std::vector<VocabEntry> entries;
  for (const auto& e : j.at("entries")) {
    entries.push_back({TokenId{e.at("id").get<std::uint32_t>()}, modality_from_string(e.at("modality").get<std::string>()),
                       e.at("code").get<std::string>(), qualifier_kind_from_string(e.at("kind").get<std::string>()),
                       e.at("qualifier").get<std::string>(), e.at("subdomain").get<std::string>()});
  }
  return Vocabulary(std::move(entries));
}

// ---------------------------------------------------------------- tasks and instances

inline json to_json(const TaskSpec& t) {
  std::string kind = t.snapshot_rule.kind == SnapshotKind::DischargeAfterVisits ? "discharge_after_visits"
                     : t.snapshot_rule.kind == SnapshotKind::FirstOccurrence    ? "first_occurrence"
                                                                                : "admission_offset";
  json j = {{"name", t.name},
            {"category", to_string(t.category)},
            {"tau_days", t.tau_days},
            {"snapshot",
             {{"kind", kind},
              {"codes", t.snapshot_rule.codes},
              {"min_prior_visits", t.snapshot_rule.min_prior_visits},
              {"offset_min", t.snapshot_rule.offset_min}}},
            {"endpoint",
             {{"codes", t.endpoint_rule.codes},
              {"include_death", t.endpoint_rule.include_death},
              {"mode", t.endpoint_rule.mode == EndpointMode::FirstEver ? "first_ever" : "next_after_snapshot"}}},
            {"age_sd_filter", t.age_sd_filter}};
  j["sex_filter"] = t.sex_filter ? json(std::string(to_string(*t.sex_filter))) : json(nullptr);
  return j;
}

inline TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  t.name = j.at("name").get<std::string>();
  t.category = task_category_from_string(j.at("category").get<std::string>());
  t.tau_days = j.at("tau_days").get<int>();
  require(t.tau_days > 0, "task '" + t.name + "': tau_days must be positive");
  const auto& s = j.at("snapshot");
  const auto kind = s.at("kind").get<std::string>();
  if (kind == "discharge_after_visits") {
    t.snapshot_rule.kind = SnapshotKind::DischargeAfterVisits;
  } else if (kind == "first_occurrence") {
    t.snapshot_rule.kind = SnapshotKind::FirstOccurrence;
  } else if (kind == "admission_offset") {
    t.snapshot_rule.kind = SnapshotKind::AdmissionOffset;
  } else {
    fail(ErrorKind::Validation, "task '" + t.name + "': unknown snapshot kind '" + kind + "'");
  }
  t.snapshot_rule.codes = s.value("codes", std::vector<std::string>{});
  t.snapshot_rule.min_prior_visits = s.value("min_prior_visits", 5);
  t.snapshot_rule.offset_min = s.value("offset_min", kMinutesPerDay);
  const auto& e = j.at("endpoint");
  t.endpoint_rule.codes = e.value("codes", std::vector<std::string>{});
  t.endpoint_rule.include_death = e.value("include_death", false);
  const auto mode = e.value("mode", std::string("first_ever"));
  require(mode == "first_ever" || mode == "next_after_snapshot", "task '" + t.name + "': unknown endpoint mode");
  t.endpoint_rule.mode = mode == "first_ever" ? EndpointMode::FirstEver : EndpointMode::NextAfterSnapshot;
  if (auto it = j.find("sex_filter"); it != j.end() && !it->is_null()) t.sex_filter = sex_from_string(it->get<std::string>());
  t.age_sd_filter = j.value("age_sd_filter", false);
  return t;
}

inline std::vector<TaskSpec> tasks_from_json(const json& j) {
  std::vector<TaskSpec> out;
  const json& list = j.is_array() ? j : j.at("tasks");
  for (const auto& t : list) out.push_back(task_from_json(t));
  return out;
}

inline std::string format_double(double v, int digits = 17) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

inline std::string instances_to_csv(const std::vector<TteInstance>& xs) {
  std::string out = "patient_id,snapshot_min,duration_days,event,split\n";
  for (const auto& x : xs) {
    out += x.patient_id + ',' + std::to_string(x.snapshot_min) + ',' + format_double(x.duration_days) + ',' +
           (x.event ? "1" : "0") + ',' + std::string(to_string(x.split)) + '\n';
  }
  return out;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t pos = 0;
  while (true) {
    auto end = line.find(',', pos);
    cells.emplace_back(line.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  if (!cells.empty() && !cells.back().empty() && cells.back().back() == '\r') cells.back().pop_back();
  return cells;
}

inline std::vector<TteInstance> instances_from_csv(std::string_view text) {
  std::vector<TteInstance> out;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    auto c = split_csv_line(line);
    require(c.size() == 5, "instance CSV rows need 5 columns");
    TteInstance x;
    x.patient_id = c[0];
    x.snapshot_min = std::stoll(c[1]);
    x.duration_days = std::stod(c[2]);
    x.event = c[3] == "1";
    x.split = split_from_string(c[4]);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace chronoscope
