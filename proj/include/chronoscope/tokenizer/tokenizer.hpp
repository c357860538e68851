#pragma once

// Structured-value preprocessing: sign-log transform, percentile-anchored binning, categorical
// canonicalization, vocabulary construction and record tokenization.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "chronoscope/core/io.hpp"
#include "chronoscope/core/parallel.hpp"
#include "chronoscope/core/types.hpp"
#include "chronoscope/core/vocabulary.hpp"

namespace chronoscope::tok {

inline constexpr int kNumBins = 10;
inline constexpr int kDegenerateBin = 4;
inline constexpr std::string_view kOtherLabel = "OTHER";

// Thrown by fit_bins when the sample has no spread.
class Degenerate : public Error {
 public:
  explicit Degenerate(const std::string& code)
      : Error(ErrorKind::Validation, "Degenerate: no spread in values for code '" + code + "'") {}
};

inline double transform_value(double x) {
  require(std::isfinite(x), "transform_value: non-finite input");
  return std::copysign(std::log1p(std::abs(x)), x);
}

// Linear interpolation between order statistics at rank p·(n−1).
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), "percentile of an empty sample");
  const double rank = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct BinSpec {
  std::string code;
  std::array<double, kNumBins + 1> edges{};
  double p2_5 = 0.0;
  double p97_5 = 0.0;
  bool degenerate = false;  // every value maps to kDegenerateBin

  friend bool operator==(const BinSpec&, const BinSpec&) = default;
};

namespace detail {

inline BinSpec spec_from_percentiles(std::string code, double lo, double hi) {
  BinSpec s;
  s.code = std::move(code);
  s.p2_5 = lo;
  s.p97_5 = hi;
  const double w = (hi - lo) / 8.0;
  for (int i = 0; i <= kNumBins; ++i) s.edges[static_cast<std::size_t>(i)] = lo + (i - 1) * w;
  s.edges[1] = lo;
  s.edges[9] = hi;
  return s;
}

inline std::vector<double> sorted_transformed(const std::vector<double>& values) {
  std::vector<double> t;
  t.reserve(values.size());
  for (double v : values) t.push_back(transform_value(v));
  std::sort(t.begin(), t.end());
  return t;
}

}  // namespace detail

inline BinSpec fit_bins(const std::string& code, const std::vector<double>& values) {
  const auto t = detail::sorted_transformed(values);
  if (t.empty() || t.front() == t.back()) throw Degenerate(code);
  const double lo = percentile_sorted(t, 0.025);
  const double hi = percentile_sorted(t, 0.975);
  if (!(hi > lo)) throw Degenerate(code);
  return detail::spec_from_percentiles(code, lo, hi);
}

// Pipeline variant: degenerate samples yield a single-bin spec instead of an error.
inline BinSpec fit_bins_lenient(const std::string& code, const std::vector<double>& values, bool* was_degenerate = nullptr) {
  try {
    auto s = fit_bins(code, values);
    if (was_degenerate) *was_degenerate = false;
    return s;
  } catch (const Degenerate&) {
    if (was_degenerate) *was_degenerate = true;
    const double c = values.empty() ? 0.0 : transform_value(values.front());
    auto s = detail::spec_from_percentiles(code, c - 4.0, c + 4.0);
    s.p2_5 = s.p97_5 = c;
    s.degenerate = true;
    return s;
  }
}

inline int assign_bin(const BinSpec& spec, double x) {
  require(!std::isnan(x), "assign_bin: NaN input");
  if (spec.degenerate) return kDegenerateBin;
  const double t = std::isinf(x) ? x : transform_value(x);
  // Count interior edges ≤ t: edges[1..9] delimit half-open bins [lo, hi).
  const auto first = spec.edges.begin() + 1;
  const auto last = spec.edges.begin() + kNumBins;
  return static_cast<int>(std::upper_bound(first, last, t) - first);
}

// ---------------------------------------------------------------- categories

inline std::string normalize_answer(std::string_view raw) {
  std::size_t b = 0, e = raw.size();
  while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
  std::string out(raw.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

struct CategoryMap {
  std::string code;
  std::vector<std::string> canonical_labels;           // sorted; always contains OTHER
  std::map<std::string, std::string> synonym_table;    // normalized raw string -> canonical label

  friend bool operator==(const CategoryMap&, const CategoryMap&) = default;
};

// Default synonym rules (normalized raw string -> canonical label).
inline const std::map<std::string, std::string>& default_rule_table() {
  static const std::map<std::string, std::string> table = {
      {"pos", "Positive"},      {"positive", "Positive"}, {"+", "Positive"},    {"detected", "Positive"},
      {"reactive", "Positive"}, {"neg", "Negative"},      {"negative", "Negative"}, {"-", "Negative"},
      {"not detected", "Negative"}, {"nonreactive", "Negative"}, {"normal", "Normal"}, {"abnormal", "Abnormal"},
  };
  return table;
}

inline std::string canonicalize_category(const CategoryMap& map, std::string_view raw) {
  auto it = map.synonym_table.find(normalize_answer(raw));
  return it == map.synonym_table.end() ? std::string(kOtherLabel) : it->second;
}

// Restricts the rule table to labels observed for this code; unmatched answers fall to OTHER.
inline CategoryMap fit_category_map(const std::string& code, const std::vector<std::string>& answers,
                                    const std::map<std::string, std::string>& rules = default_rule_table()) {
  CategoryMap m;
  m.code = code;
  std::set<std::string> labels{std::string(kOtherLabel)};
  for (const auto& a : answers) {
    if (auto it = rules.find(normalize_answer(a)); it != rules.end()) labels.insert(it->second);
  }
  for (const auto& [raw, label] : rules) {
    if (labels.count(label)) m.synonym_table.emplace(raw, label);
  }
  m.canonical_labels.assign(labels.begin(), labels.end());
  return m;
}

// ---------------------------------------------------------------- units

// Per-code unit conversion applied before binning; codes without an entry pass through unchanged.
struct UnitTable {
  std::map<std::string, std::function<double(double)>> conversions;
  double apply(const std::string& code, double v) const {
    auto it = conversions.find(code);
    return it == conversions.end() ? v : it->second(v);
  }
};

// ---------------------------------------------------------------- vocabulary

using SubdomainMap = std::map<std::string, std::string>;

// Synthetic codes encode their class as the prefix before the last '-' (e.g. LAB-C1-007 -> LAB-C1).
inline std::string default_subdomain(const std::string& code) {
  const auto pos = code.rfind('-');
  return pos == std::string::npos || pos == 0 ? code : code.substr(0, pos);
}

inline std::string subdomain_of(const SubdomainMap& map, const std::string& code) {
  auto it = map.find(code);
  return it == map.end() ? default_subdomain(code) : it->second;
}

inline Vocabulary build_vocabulary(const std::vector<PatientRecord>& cohort, const std::map<std::string, BinSpec>& bin_specs,
                                   const std::map<std::string, CategoryMap>& category_maps,
                                   const SubdomainMap& subdomain_map = {}) {
  struct Key {
    Modality modality;
    std::string code;
    QualifierKind kind;
    std::string qualifier;
    auto operator<=>(const Key&) const = default;
  };
  std::set<Key> keys;
  for (const auto& p : cohort) {
    for (const auto& e : p.events) {
      if (is_unstructured(e.modality)) continue;
      if (!is_measurement(e.modality)) {
        keys.insert({e.modality, e.code, QualifierKind::None, {}});
        continue;
      }
      if (std::holds_alternative<Answer>(e.payload)) {
        auto it = category_maps.find(e.code);
        require(it != category_maps.end(), "build_vocabulary: no category map for code '" + e.code + "'");
        for (const auto& label : it->second.canonical_labels) keys.insert({e.modality, e.code, QualifierKind::Category, label});
      } else {
        auto it = bin_specs.find(e.code);
        require(it != bin_specs.end(), "build_vocabulary: no bin spec for code '" + e.code + "'");
        if (it->second.degenerate) {
          keys.insert({e.modality, e.code, QualifierKind::Bin, std::to_string(kDegenerateBin)});
        } else {
          for (int b = 0; b < kNumBins; ++b) keys.insert({e.modality, e.code, QualifierKind::Bin, std::to_string(b)});
        }
      }
    }
  }
  std::vector<VocabEntry> entries;
  entries.reserve(keys.size());
  for (const auto& k : keys) {
    VocabEntry v;
    v.id = TokenId{static_cast<std::uint32_t>(entries.size())};
    v.modality = k.modality;
    v.code = k.code;
    v.kind = k.kind;
    v.qualifier = k.qualifier;
    if (is_measurement(k.modality)) v.subdomain = subdomain_of(subdomain_map, k.code);
    entries.push_back(std::move(v));
  }
  return Vocabulary(std::move(entries));
}

// ---------------------------------------------------------------- fitted tokenizer

struct Tokenizer {
  Vocabulary vocab;
  std::map<std::string, BinSpec> bins;
  std::map<std::string, CategoryMap> categories;
  std::vector<std::string> degenerate_codes;  // codes fitted with a single-bin spec
  UnitTable units;
};

struct TokenizeStats {
  std::size_t kept = 0;
  std::size_t dropped_unknown = 0;  // codes or qualifiers absent from the vocabulary
};

// Fits bin specs and category maps on the given (training) records and builds the vocabulary.
inline Tokenizer fit_tokenizer(const std::vector<PatientRecord>& train, const SubdomainMap& subdomains = {},
                               const UnitTable& units = {}, std::size_t threads = 1) {
  Tokenizer t;
  t.units = units;
  std::map<std::string, std::vector<double>> numeric;
  std::map<std::string, std::vector<std::string>> answers;
  for (const auto& p : train) {
    for (const auto& e : p.events) {
      if (!is_measurement(e.modality)) continue;
      if (const auto* m = std::get_if<Measurement>(&e.payload)) {
        numeric[e.code].push_back(units.apply(e.code, m->value));
      } else if (const auto* a = std::get_if<Answer>(&e.payload)) {
        answers[e.code].push_back(a->text);
      }
    }
  }
  std::vector<const std::pair<const std::string, std::vector<double>>*> items;
  for (const auto& kv : numeric) items.push_back(&kv);
  std::vector<BinSpec> specs(items.size());
  std::vector<char> degenerate(items.size(), 0);
  parallel_for(items.size(), threads, [&](std::size_t i) {
    bool d = false;
    specs[i] = fit_bins_lenient(items[i]->first, items[i]->second, &d);
    degenerate[i] = d;
  });
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (degenerate[i]) t.degenerate_codes.push_back(specs[i].code);
    t.bins.emplace(specs[i].code, std::move(specs[i]));
  }
  for (const auto& [code, a] : answers) t.categories.emplace(code, fit_category_map(code, a));
  t.vocab = build_vocabulary(train, t.bins, t.categories, subdomains);
  return t;
}

// Maps raw structured events to tokens. Unstructured events pass through; events whose code is not
// in the vocabulary are dropped and counted.
inline PatientRecord tokenize_patient(const PatientRecord& p, const Tokenizer& t, TokenizeStats* stats = nullptr) {
  PatientRecord out;
  out.patient_id = p.patient_id;
  out.demographics = p.demographics;
  out.death_time_min = p.death_time_min;
  out.events.reserve(p.events.size());
  TokenizeStats local;
  for (const auto& e : p.events) {
    if (is_unstructured(e.modality) || e.has_token()) {
      out.events.push_back(e);
      ++local.kept;
      continue;
    }
    std::optional<TokenId> id;
    if (const auto* m = std::get_if<Measurement>(&e.payload)) {
      if (auto it = t.bins.find(e.code); it != t.bins.end()) {
        id = t.vocab.find(e.code, QualifierKind::Bin, std::to_string(assign_bin(it->second, t.units.apply(e.code, m->value))));
      }
    } else if (const auto* a = std::get_if<Answer>(&e.payload)) {
      if (auto it = t.categories.find(e.code); it != t.categories.end()) {
        id = t.vocab.find(e.code, QualifierKind::Category, canonicalize_category(it->second, a->text));
      }
    } else {
      id = t.vocab.find(e.code);
    }
    if (!id) {
      ++local.dropped_unknown;
      continue;
    }
    out.events.push_back({e.time_min, e.modality, e.code, *id});
    ++local.kept;
  }
  if (stats) {
    stats->kept += local.kept;
    stats->dropped_unknown += local.dropped_unknown;
  }
  return out;
}

inline std::vector<PatientRecord> tokenize_cohort(const std::vector<PatientRecord>& cohort, const Tokenizer& t,
                                                  TokenizeStats* stats = nullptr) {
  std::vector<PatientRecord> out;
  out.reserve(cohort.size());
  for (const auto& p : cohort) out.push_back(tokenize_patient(p, t, stats));
  return out;
}

// ---------------------------------------------------------------- serialization

inline json specs_to_json(const Tokenizer& t) {
  json bins = json::array();
  for (const auto& [code, s] : t.bins) {
    bins.push_back({{"code", code}, {"edges", s.edges}, {"p2_5", s.p2_5}, {"p97_5", s.p97_5}, {"degenerate", s.degenerate}});
  }
  json cats = json::array();
  for (const auto& [code, m] : t.categories) {
    cats.push_back({{"code", code}, {"labels", m.canonical_labels}, {"synonyms", m.synonym_table}});
  }
  return {{"schema_version", 1}, {"bins", std::move(bins)}, {"categories", std::move(cats)}};
}

inline void specs_from_json(const json& j, Tokenizer& t) {
  require(j.value("schema_version", 1) == 1, "unsupported spec schema version");
  t.bins.clear();
  t.categories.clear();
  t.degenerate_codes.clear();
  for (const auto& b : j.at("bins")) {
    BinSpec s;
    s.code = b.at("code").get<std::string>();
    s.edges = b.at("edges").get<std::array<double, kNumBins + 1>>();
    s.p2_5 = b.at("p2_5").get<double>();
    s.p97_5 = b.at("p97_5").get<double>();
    s.degenerate = b.value("degenerate", false);
    if (s.degenerate) t.degenerate_codes.push_back(s.code);
    t.bins.emplace(s.code, std::move(s));
  }
  for (const auto& c : j.at("categories")) {
    CategoryMap m;
    m.code = c.at("code").get<std::string>();
    m.canonical_labels = c.at("labels").get<std::vector<std::string>>();
    m.synonym_table = c.at("synonyms").get<std::map<std::string, std::string>>();
    t.categories.emplace(m.code, std::move(m));
  }
}

inline Tokenizer load_tokenizer(const std::string& vocab_path, const std::string& specs_path) {
  Tokenizer t;
  t.vocab = vocabulary_from_json(json::parse(read_file(vocab_path)));
  specs_from_json(json::parse(read_file(specs_path)), t);
  return t;
}

}  // namespace chronoscope::tok
