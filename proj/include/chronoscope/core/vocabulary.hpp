#pragma once

#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "chronoscope/core/types.hpp"

namespace chronoscope {

enum class QualifierKind : std::uint8_t { None, Bin, Category };

struct VocabEntry {
  TokenId id;
  Modality modality = Modality::Diagnosis;
  std::string code;
  QualifierKind kind = QualifierKind::None;
  std::string qualifier;  // bin index ("0".."9") or canonical category label
  std::string subdomain;  // set for Lab / Vital / Flowsheet

  friend bool operator==(const VocabEntry&, const VocabEntry&) = default;
};

// Dense token space. Tokens are grouped into restricted decoding vocabularies: one per modality,
// and one per (modality, subdomain) for measurement modalities.
class Vocabulary {
 public:
  static constexpr int kSchemaVersion = 1;

  Vocabulary() = default;

  explicit Vocabulary(std::vector<VocabEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& e = entries_[i];
      require(e.id.value == i, "vocabulary token ids must be dense and ordered");
      require(!is_measurement(e.modality) || !e.subdomain.empty(),
              "measurement token '" + e.code + "' lacks a subdomain class");
      auto [it, inserted] = by_key_.emplace(Key{e.code, e.kind, e.qualifier}, e.id);
      require(inserted, "duplicate vocabulary entry for code '" + e.code + "' qualifier '" + e.qualifier + "'");
      const auto gkey = std::make_pair(e.modality, is_measurement(e.modality) ? e.subdomain : std::string{});
      auto git = group_index_.find(gkey);
      if (git == group_index_.end()) {
        git = group_index_.emplace(gkey, groups_.size()).first;
        groups_.emplace_back();
      }
      groups_[git->second].push_back(e.id);
      group_of_.push_back(git->second);
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<VocabEntry>& entries() const noexcept { return entries_; }
  const VocabEntry& entry(TokenId id) const { return entries_.at(id.value); }

  std::optional<TokenId> find(const std::string& code, QualifierKind kind = QualifierKind::None,
                              const std::string& qualifier = {}) const {
    auto it = by_key_.find(Key{code, kind, qualifier});
    if (it == by_key_.end()) return std::nullopt;
    return it->second;
  }

  // Restricted decoding vocabularies.
  std::size_t num_groups() const noexcept { return groups_.size(); }
  const std::vector<TokenId>& group(std::size_t g) const { return groups_.at(g); }
  std::size_t group_of(TokenId id) const { return group_of_.at(id.value); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

 private:
  using Key = std::tuple<std::string, QualifierKind, std::string>;
  std::vector<VocabEntry> entries_;
  std::map<Key, TokenId> by_key_;
  std::map<std::pair<Modality, std::string>, std::size_t> group_index_;
  std::vector<std::vector<TokenId>> groups_;
  std::vector<std::size_t> group_of_;
};

}  // namespace chronoscope
