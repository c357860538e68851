#pragma once

// Time-dependent discrimination and calibration metrics at a horizon τ (days), with IPCW
// from the censoring Kaplan–Meier curve Ĝ.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "chronoscope/survival/km.hpp"

namespace chronoscope::metrics {

using surv::KmCurve;
using surv::KmTarget;
using surv::SurvivalData;

inline KmCurve censoring_curve(const SurvivalData& d) { return surv::kaplan_meier(d, KmTarget::Censoring); }

namespace detail {

inline void check_inputs(const std::vector<double>& scores, const SurvivalData& d, const char* name) {
  require(scores.size() == d.size(), std::string(name) + ": scores and instances differ in length");
  require(d.time.size() == d.event.size(), std::string(name) + ": time/event length mismatch");
  for (double s : scores) require(std::isfinite(s), std::string(name) + ": non-finite score");
}

// Fenwick tree over risk ranks, counting inserted items.
class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : t_(n + 1, 0.0) {}
  void add(std::size_t i, double v) {
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += v;
  }
  // Sum over [0, i).
  double prefix(std::size_t i) const {
    double s = 0.0;
    for (; i > 0; i -= i & (~i + 1)) s += t_[i];
    return s;
  }

 private:
  std::vector<double> t_;
};

// Dense ranks of values (equal values share a rank).
inline std::vector<std::size_t> dense_ranks(const std::vector<double>& v, std::size_t* n_distinct) {
  std::vector<double> u = v;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  std::vector<std::size_t> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    r[i] = static_cast<std::size_t>(std::lower_bound(u.begin(), u.end(), v[i]) - u.begin());
  }
  *n_distinct = u.size();
  return r;
}

}  // namespace detail

// Cases: T_i ≤ τ with an event, weighted 1/Ĝ(T_i⁻). Controls: T_j > τ, weighted 1/Ĝ(τ).
// Fraction of weighted (case, control) pairs ranked correctly; ties count ½.
// Cases with Ĝ(T_i⁻) = 0 are excluded and counted in *excluded.
inline double cumulative_dynamic_auc(const std::vector<double>& risks, const SurvivalData& d, double tau, const KmCurve& G,
                                     std::size_t* excluded = nullptr) {
  detail::check_inputs(risks, d, "cumulative_dynamic_auc");
  std::vector<double> controls;
  std::vector<std::pair<double, double>> cases;  // (risk, weight)
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.time[i] > tau) {
      controls.push_back(risks[i]);
    } else if (d.event[i]) {
      const double g = G.left(d.time[i]);
      if (g > 0.0) {
        cases.emplace_back(risks[i], 1.0 / g);
      } else {
        ++dropped;
      }
    }
  }
  if (excluded) *excluded = dropped;
  if (cases.empty()) fail(ErrorKind::Undefined, "cumulative_dynamic_auc: no cases by tau");
  if (controls.empty()) fail(ErrorKind::Undefined, "cumulative_dynamic_auc: no controls beyond tau");
  if (!(G.at(tau) > 0.0)) fail(ErrorKind::Undefined, "cumulative_dynamic_auc: censoring survival is zero at tau");
  std::sort(controls.begin(), controls.end());
  double num = 0.0, den = 0.0;
  for (const auto& [r, w] : cases) {
    const auto lo = std::lower_bound(controls.begin(), controls.end(), r);
    const auto hi = std::upper_bound(lo, controls.end(), r);
    num += w * (static_cast<double>(lo - controls.begin()) + 0.5 * static_cast<double>(hi - lo));
    den += w * static_cast<double>(controls.size());
  }
  // The control weight 1/Ĝ(τ) is common to every pair and cancels.
  return num / den;
}

// Truncated IPCW concordance: pairs with T_i < T_j, T_i < τ, δ_i = 1, weighted 1/Ĝ(T_i⁻)².
inline double uno_c_index(const std::vector<double>& risks, const SurvivalData& d, double tau, const KmCurve& G) {
  detail::check_inputs(risks, d, "uno_c_index");
  std::size_t n_ranks = 0;
  const auto rank = detail::dense_ranks(risks, &n_ranks);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.time[a] > d.time[b]; });
  detail::Fenwick tree(n_ranks);
  double inserted = 0.0, num = 0.0, den = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && d.time[order[j]] == d.time[order[i]]) ++j;
    const double t = d.time[order[i]];
    if (t < tau) {
      for (std::size_t k = i; k < j; ++k) {
        const auto a = order[k];
        if (!d.event[a]) continue;
        const double g = G.left(t);
        if (!(g > 0.0)) continue;
        const double w = 1.0 / (g * g);
        const double less = tree.prefix(rank[a]);
        const double equal = tree.prefix(rank[a] + 1) - less;
        num += w * (less + 0.5 * equal);
        den += w * inserted;
      }
    }
    for (std::size_t k = i; k < j; ++k) {
      tree.add(rank[order[k]], 1.0);
      inserted += 1.0;
    }
    i = j;
  }
  if (!(den > 0.0)) fail(ErrorKind::Undefined, "uno_c_index: no comparable pairs");
  return num / den;
}

// (1/n) Σ w_i (Y_i − p̂_i)², w_i = 1{T_i>τ}/Ĝ(τ) + 1{T_i≤τ, δ_i=1}/Ĝ(T_i⁻).
inline double ipcw_brier(const std::vector<double>& probs, const SurvivalData& d, double tau, const KmCurve& G) {
  detail::check_inputs(probs, d, "ipcw_brier");
  require(d.size() > 0, "ipcw_brier: no instances");
  for (double p : probs) require(p >= 0.0 && p <= 1.0, "ipcw_brier: probabilities must lie in [0,1]");
  const double g_tau = G.at(tau);
  double total = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.time[i] > tau) {
      if (!(g_tau > 0.0)) fail(ErrorKind::Undefined, "ipcw_brier: censoring survival is zero at tau");
      total += probs[i] * probs[i] / g_tau;
    } else if (d.event[i]) {
      const double g = G.left(d.time[i]);
      if (!(g > 0.0)) fail(ErrorKind::Undefined, "ipcw_brier: censoring survival is zero before an event");
      total += (1.0 - probs[i]) * (1.0 - probs[i]) / g;
    }
  }
  return total / static_cast<double>(d.size());
}

// Binary labels at τ after removing instances censored before τ: 1 = event by τ, 0 = event-free past τ.
inline std::pair<std::vector<double>, std::vector<int>> labels_at(const std::vector<double>& risks, const SurvivalData& d,
                                                                  double tau) {
  detail::check_inputs(risks, d, "balanced_accuracy");
  std::pair<std::vector<double>, std::vector<int>> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.time[i] > tau) {
      out.first.push_back(risks[i]);
      out.second.push_back(0);
    } else if (d.event[i]) {
      out.first.push_back(risks[i]);
      out.second.push_back(1);
    }
  }
  return out;
}

// Positive prediction means risk ≥ threshold.
inline double balanced_accuracy_at(const std::vector<double>& risks, const std::vector<int>& labels, double threshold) {
  double tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < risks.size(); ++i) {
    const bool pos = risks[i] >= threshold;
    if (labels[i]) {
      (pos ? tp : fn) += 1;
    } else {
      (pos ? fp : tn) += 1;
    }
  }
  if (tp + fn == 0 || tn + fp == 0) fail(ErrorKind::Undefined, "balanced_accuracy: a single class after removing early censoring");
  return 0.5 * (tp / (tp + fn) + tn / (tn + fp));
}

// Maximizer over the unique validation risks; the smallest threshold wins ties.
inline double choose_threshold(const std::vector<double>& risks, const std::vector<int>& labels) {
  std::vector<double> u = risks;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  if (u.empty()) fail(ErrorKind::Undefined, "balanced_accuracy: empty validation set");
  double best_t = u.front(), best = -1.0;
  // Sweep: positives are the suffix starting at each unique value.
  std::vector<std::size_t> order(risks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return risks[a] < risks[b]; });
  double P = 0, N = 0;
  for (int l : labels) (l ? P : N) += 1;
  if (P == 0 || N == 0) fail(ErrorKind::Undefined, "balanced_accuracy: degenerate validation set (single class)");
  double fn = 0, tn = 0;  // below the threshold
  std::size_t k = 0;
  for (double t : u) {
    while (k < order.size() && risks[order[k]] < t) {
      (labels[order[k]] ? fn : tn) += 1;
      ++k;
    }
    const double ba = 0.5 * ((P - fn) / P + tn / N);
    if (ba > best) {
      best = ba;
      best_t = t;
    }
  }
  return best_t;
}

inline double balanced_accuracy(const std::vector<double>& risks_val, const SurvivalData& val, const std::vector<double>& risks_test,
                                const SurvivalData& test, double tau) {
  const auto [rv, lv] = labels_at(risks_val, val, tau);
  const auto [rt, lt] = labels_at(risks_test, test, tau);
  return balanced_accuracy_at(rt, lt, choose_threshold(rv, lv));
}

struct Calibration {
  double ici = 0.0;
  double mce = 0.0;
  std::vector<double> mean_pred;  // per bin
  std::vector<double> observed;   // per bin, 1 − KM(τ)
};

// Equal-count bins on the rank of predicted risk (stable: equal predictions keep input order).
inline Calibration calibration_indices(const std::vector<double>& probs, const SurvivalData& d, double tau, int n_bins = 10) {
  detail::check_inputs(probs, d, "calibration_indices");
  require(n_bins > 0, "calibration_indices: n_bins must be positive");
  const auto n = d.size();
  require(n >= static_cast<std::size_t>(n_bins), "calibration_indices: fewer instances than bins");
  if (std::all_of(probs.begin(), probs.end(), [&](double p) { return p == probs.front(); })) {
    fail(ErrorKind::Undefined, "calibration_indices: constant predictions collapse to a single bin");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  Calibration c;
  for (int k = 0; k < n_bins; ++k) {
    const std::size_t lo = n * static_cast<std::size_t>(k) / static_cast<std::size_t>(n_bins);
    const std::size_t hi = n * static_cast<std::size_t>(k + 1) / static_cast<std::size_t>(n_bins);
    if (hi == lo) fail(ErrorKind::Undefined, "calibration_indices: empty bin");
    SurvivalData b;
    double mean = 0.0;
    for (std::size_t r = lo; r < hi; ++r) {
      b.time.push_back(d.time[order[r]]);
      b.event.push_back(d.event[order[r]]);
      mean += probs[order[r]];
    }
    mean /= static_cast<double>(hi - lo);
    const double obs = 1.0 - surv::kaplan_meier(b).at(tau);
    c.mean_pred.push_back(mean);
    c.observed.push_back(obs);
    const double gap = std::abs(obs - mean);
    c.ici += gap / n_bins;
    c.mce = std::max(c.mce, gap);
  }
  return c;
}

}  // namespace chronoscope::metrics
