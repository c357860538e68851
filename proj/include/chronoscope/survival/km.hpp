#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "chronoscope/core/error.hpp"
#include "chronoscope/core/types.hpp"

namespace chronoscope::surv {

// Observed (time, indicator) pairs; the common input of every estimator here.
struct SurvivalData {
  std::vector<double> time;
  std::vector<bool> event;

  std::size_t size() const { return time.size(); }
};

inline SurvivalData survival_data(const std::vector<TteInstance>& xs) {
  SurvivalData d;
  d.time.reserve(xs.size());
  d.event.reserve(xs.size());
  for (const auto& x : xs) {
    d.time.push_back(x.duration_days);
    d.event.push_back(x.event);
  }
  return d;
}

enum class KmTarget { Event, Censoring };

// Right-continuous step function; S = 1 before times.front().
struct KmCurve {
  std::vector<double> times;
  std::vector<double> survival;
  std::vector<std::size_t> at_risk;

  // S(t).
  double at(double t) const {
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    return it == times.begin() ? 1.0 : survival[static_cast<std::size_t>(it - times.begin()) - 1];
  }
  // S(t⁻).
  double left(double t) const {
    const auto it = std::lower_bound(times.begin(), times.end(), t);
    return it == times.begin() ? 1.0 : survival[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

// Product-limit estimator. Risk set at t is every observation with time ≥ t. Only times with at
// least one target event become steps.
inline KmCurve kaplan_meier(const SurvivalData& d, KmTarget target = KmTarget::Event) {
  require(d.size() > 0, "kaplan_meier: no observations");
  require(d.time.size() == d.event.size(), "kaplan_meier: time/event length mismatch");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.time[a] < d.time[b]; });
  KmCurve c;
  double s = 1.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = d.time[order[i]];
    require(t >= 0.0, "kaplan_meier: negative time");
    const std::size_t n = order.size() - i;
    std::size_t hits = 0;
    std::size_t j = i;
    for (; j < order.size() && d.time[order[j]] == t; ++j) {
      const bool ev = d.event[order[j]];
      if (target == KmTarget::Event ? ev : !ev) ++hits;
    }
    if (hits > 0) {
      s *= 1.0 - static_cast<double>(hits) / static_cast<double>(n);
      c.times.push_back(t);
      c.survival.push_back(s);
      c.at_risk.push_back(n);
    }
    i = j;
  }
  return c;
}

inline KmCurve kaplan_meier(const std::vector<TteInstance>& xs, KmTarget target = KmTarget::Event) {
  return kaplan_meier(survival_data(xs), target);
}

// Nelson–Aalen cumulative hazard at each distinct event time.
struct StepFunction {
  std::vector<double> times;
  std::vector<double> values;

  double at(double t) const {
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    return it == times.begin() ? 0.0 : values[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

inline StepFunction nelson_aalen(const SurvivalData& d) {
  require(d.size() > 0, "nelson_aalen: no observations");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.time[a] < d.time[b]; });
  StepFunction h;
  double acc = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = d.time[order[i]];
    const std::size_t n = order.size() - i;
    std::size_t hits = 0;
    std::size_t j = i;
    for (; j < order.size() && d.time[order[j]] == t; ++j) hits += d.event[order[j]];
    if (hits > 0) {
      acc += static_cast<double>(hits) / static_cast<double>(n);
      h.times.push_back(t);
      h.values.push_back(acc);
    }
    i = j;
  }
  return h;
}

}  // namespace chronoscope::surv
