#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/core/parallel.hpp"
#include "chronoscope/metrics/metrics.hpp"

namespace chronoscope::metrics {

// A metric evaluated on a resample, given as row indices into the full data (repeats allowed).
// Throwing Error(Undefined) marks the resample as undefined.
using ResampledMetric = std::function<double(const std::vector<std::size_t>& rows)>;

struct MetricReport {
  std::string metric;
  double point = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_bootstraps = 0;
  int n_undefined = 0;
  double tau_days = 0.0;
  std::size_t n_instances = 0;
  std::size_t n_events_by_tau = 0;
  bool point_outside_ci = false;
};

// Linear-interpolation percentile of a sorted sample, q in [0, 1].
inline double percentile(const std::vector<double>& sorted, double q) {
  require(!sorted.empty(), "percentile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<std::size_t> resample_rows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> rows(n);
  for (auto& r : rows) r = pick(rng);
  return rows;
}

namespace detail {

// Metric values over n_boot resamples; NaN marks an undefined resample.
inline std::vector<double> bootstrap_values(const ResampledMetric& f, std::size_t n, int n_boot, std::uint64_t seed,
                                            std::uint64_t stream, int threads) {
  std::vector<double> out(static_cast<std::size_t>(n_boot));
  parallel_for(out.size(), resolve_threads(threads), [&](std::size_t b) {
    const auto rows = resample_rows(n, hash_combine(hash_combine(seed, stream), b));
    try {
      out[b] = f(rows);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Undefined) throw;
      out[b] = std::nan("");
    }
  });
  return out;
}

inline void check_undefined(const std::vector<double>& v) {
  const auto bad = std::count_if(v.begin(), v.end(), [](double x) { return std::isnan(x); });
  if (static_cast<double>(bad) > 0.1 * static_cast<double>(v.size())) {
    fail(ErrorKind::Undefined, "bootstrap: metric undefined on " + std::to_string(bad) + " of " + std::to_string(v.size()) +
                                   " resamples");
  }
}

}  // namespace detail

// Percentile 95% interval over patient-level resamples; undefined resamples are skipped and counted.
inline MetricReport bootstrap_ci(const ResampledMetric& f, std::size_t n, int n_boot = 100, std::uint64_t seed = 0,
                                 int threads = 0) {
  require(n > 0, "bootstrap_ci: no instances");
  require(n_boot > 0, "bootstrap_ci: need at least one resample");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  MetricReport r;
  r.point = f(all);
  r.n_instances = n;
  r.n_bootstraps = n_boot;
  auto vals = detail::bootstrap_values(f, n, n_boot, seed, 0, threads);
  detail::check_undefined(vals);
  std::vector<double> ok;
  for (double v : vals) {
    if (!std::isnan(v)) ok.push_back(v);
  }
  r.n_undefined = n_boot - static_cast<int>(ok.size());
  std::sort(ok.begin(), ok.end());
  r.ci_low = percentile(ok, 0.025);
  r.ci_high = percentile(ok, 0.975);
  r.point_outside_ci = r.point < r.ci_low || r.point > r.ci_high;
  return r;
}

// Two-sided unpaired bootstrap test of metric(A) − metric(B). Each replicate draws two
// independent resamples I, J and uses D = ½[(A(I) − B(J)) + (A(J) − B(I))], so exchanging the
// arms negates every D and leaves p unchanged. p = 2·min(P(D ≤ 0), P(D ≥ 0)), capped at 1.
inline double bootstrap_significance(const ResampledMetric& a, const ResampledMetric& b, std::size_t n, int n_boot = 100,
                                     std::uint64_t seed = 0, int threads = 0) {
  require(n > 0, "bootstrap_significance: no instances");
  require(n_boot > 0, "bootstrap_significance: need at least one resample");
  std::vector<double> ai(static_cast<std::size_t>(n_boot)), aj(ai.size()), bi(ai.size()), bj(ai.size());
  parallel_for(ai.size(), resolve_threads(threads), [&](std::size_t k) {
    const auto I = resample_rows(n, hash_combine(hash_combine(seed, 1), k));
    const auto J = resample_rows(n, hash_combine(hash_combine(seed, 2), k));
    auto eval = [](const ResampledMetric& f, const std::vector<std::size_t>& rows) {
      try {
        return f(rows);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Undefined) throw;
        return std::nan("");
      }
    };
    ai[k] = eval(a, I);
    aj[k] = eval(a, J);
    bi[k] = eval(b, I);
    bj[k] = eval(b, J);
  });
  std::vector<double> diffs;
  std::size_t undefined = 0;
  for (std::size_t k = 0; k < ai.size(); ++k) {
    const double d = 0.5 * ((ai[k] - bj[k]) + (aj[k] - bi[k]));
    if (std::isnan(d)) {
      ++undefined;
    } else {
      diffs.push_back(d);
    }
  }
  if (static_cast<double>(undefined) > 0.1 * static_cast<double>(n_boot)) {
    fail(ErrorKind::Undefined, "bootstrap_significance: metric undefined on " + std::to_string(undefined) + " of " +
                                   std::to_string(n_boot) + " resamples");
  }
  const double m = static_cast<double>(diffs.size());
  const double le = static_cast<double>(std::count_if(diffs.begin(), diffs.end(), [](double d) { return d <= 0.0; }));
  const double ge = static_cast<double>(std::count_if(diffs.begin(), diffs.end(), [](double d) { return d >= 0.0; }));
  return std::min(1.0, 2.0 * std::min(le, ge) / m);
}

namespace detail {

inline SurvivalData take(const SurvivalData& d, const std::vector<std::size_t>& rows) {
  SurvivalData out;
  out.time.reserve(rows.size());
  out.event.reserve(rows.size());
  for (auto r : rows) {
    out.time.push_back(d.time[r]);
    out.event.push_back(d.event[r]);
  }
  return out;
}

inline std::vector<double> take(const std::vector<double>& v, const std::vector<std::size_t>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

}  // namespace detail

// Resampled metric adapters; Ĝ is re-estimated on every resample.
inline ResampledMetric auc_metric(const std::vector<double>& risks, const SurvivalData& d, double tau) {
  return [&risks, &d, tau](const std::vector<std::size_t>& rows) {
    const auto s = detail::take(d, rows);
    return cumulative_dynamic_auc(detail::take(risks, rows), s, tau, censoring_curve(s));
  };
}

inline ResampledMetric c_index_metric(const std::vector<double>& risks, const SurvivalData& d, double tau) {
  return [&risks, &d, tau](const std::vector<std::size_t>& rows) {
    const auto s = detail::take(d, rows);
    return uno_c_index(detail::take(risks, rows), s, tau, censoring_curve(s));
  };
}

inline ResampledMetric brier_metric(const std::vector<double>& probs, const SurvivalData& d, double tau) {
  return [&probs, &d, tau](const std::vector<std::size_t>& rows) {
    const auto s = detail::take(d, rows);
    return ipcw_brier(detail::take(probs, rows), s, tau, censoring_curve(s));
  };
}

// The threshold is fixed from validation; only the test set is resampled.
inline ResampledMetric balanced_accuracy_metric(double threshold, const std::vector<double>& risks, const SurvivalData& d,
                                                double tau) {
  return [threshold, &risks, &d, tau](const std::vector<std::size_t>& rows) {
    const auto [r, l] = labels_at(detail::take(risks, rows), detail::take(d, rows), tau);
    return balanced_accuracy_at(r, l, threshold);
  };
}

inline ResampledMetric ici_metric(const std::vector<double>& probs, const SurvivalData& d, double tau) {
  return [&probs, &d, tau](const std::vector<std::size_t>& rows) {
    return calibration_indices(detail::take(probs, rows), detail::take(d, rows), tau).ici;
  };
}

inline ResampledMetric mce_metric(const std::vector<double>& probs, const SurvivalData& d, double tau) {
  return [&probs, &d, tau](const std::vector<std::size_t>& rows) {
    return calibration_indices(detail::take(probs, rows), detail::take(d, rows), tau).mce;
  };
}

inline std::size_t events_by(const SurvivalData& d, double tau) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < d.size(); ++i) k += d.event[i] && d.time[i] <= tau;
  return k;
}

inline json to_json(const MetricReport& r) {
  return {{"metric", r.metric},         {"point", r.point},
          {"ci_low", r.ci_low},         {"ci_high", r.ci_high},
          {"n_bootstraps", r.n_bootstraps}, {"n_undefined", r.n_undefined},
          {"tau_days", r.tau_days},     {"n_instances", r.n_instances},
          {"n_events_by_tau", r.n_events_by_tau}, {"point_outside_ci", r.point_outside_ci}};
}

inline std::string csv_header() {
  return "task,model,metric,point,ci_low,ci_high,n_bootstraps,n_undefined,tau_days,n_instances,n_events_by_tau,point_outside_ci\n";
}

inline std::string csv_row(const std::string& task, const std::string& model, const MetricReport& r) {
  return task + ',' + model + ',' + r.metric + ',' + format_double(r.point) + ',' + format_double(r.ci_low) + ',' +
         format_double(r.ci_high) + ',' + std::to_string(r.n_bootstraps) + ',' + std::to_string(r.n_undefined) + ',' +
         format_double(r.tau_days) + ',' + std::to_string(r.n_instances) + ',' + std::to_string(r.n_events_by_tau) + ',' +
         (r.point_outside_ci ? "1" : "0") + '\n';
}

}  // namespace chronoscope::metrics
