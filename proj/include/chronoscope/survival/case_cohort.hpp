#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/types.hpp"

namespace chronoscope::surv {

// Indices (ascending) kept by case-cohort subsampling: every event, plus at most max_ratio
// censored instances per event drawn uniformly without replacement.
inline std::vector<std::size_t> case_cohort_indices(const std::vector<TteInstance>& xs, double max_ratio = 4.0,
                                                    std::uint64_t seed = 0) {
  require(max_ratio > 0.0, "case_cohort_sample: max_ratio must be positive");
  std::vector<std::size_t> events, censored;
  for (std::size_t i = 0; i < xs.size(); ++i) (xs[i].event ? events : censored).push_back(i);
  require(!events.empty(), "case_cohort_sample: no uncensored instances");
  const auto cap = static_cast<std::size_t>(std::floor(max_ratio * static_cast<double>(events.size())));
  if (censored.size() > cap) {
    std::mt19937_64 rng(hash_combine(seed, 0xCA5EC0ULL));
    std::shuffle(censored.begin(), censored.end(), rng);
    censored.resize(cap);
  }
  std::vector<std::size_t> keep = events;
  keep.insert(keep.end(), censored.begin(), censored.end());
  std::sort(keep.begin(), keep.end());
  return keep;
}

inline std::vector<TteInstance> case_cohort_sample(const std::vector<TteInstance>& xs, double max_ratio = 4.0,
                                                   std::uint64_t seed = 0) {
  std::vector<TteInstance> out;
  for (auto i : case_cohort_indices(xs, max_ratio, seed)) out.push_back(xs[i]);
  return out;
}

// Subsamples the Train split only; Val and Test rows pass through untouched and in order.
inline std::vector<TteInstance> apply_case_cohort(const std::vector<TteInstance>& all, double max_ratio = 4.0,
                                                  std::uint64_t seed = 0) {
  std::vector<TteInstance> train;
  for (const auto& x : all) {
    if (x.split == Split::Train) train.push_back(x);
  }
  auto kept = case_cohort_sample(train, max_ratio, seed);
  for (const auto& x : all) {
    if (x.split != Split::Train) kept.push_back(x);
  }
  return kept;
}

}  // namespace chronoscope::surv
