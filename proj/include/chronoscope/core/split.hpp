#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/types.hpp"

namespace chronoscope {

struct SplitRatios {
  double train = 0.75;
  double val = 0.05;
  double test = 0.20;
};

// Deterministic, data-independent split: the id is hashed with the seed and mapped to [0,1).
inline Split split_assign(std::string_view patient_id, const SplitRatios& ratios = {}, std::uint64_t seed = 0) {
  require(ratios.train >= 0 && ratios.val >= 0 && ratios.test >= 0, "split ratios must be non-negative");
  require(std::abs(ratios.train + ratios.val + ratios.test - 1.0) < 1e-9, "split ratios must sum to 1");
  const double u = to_unit_interval(hash64(patient_id, seed));
  if (u < ratios.train) return Split::Train;
  if (u < ratios.train + ratios.val) return Split::Val;
  return Split::Test;
}

}  // namespace chronoscope
