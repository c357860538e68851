#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "chronoscope/metrics/bootstrap.hpp"

using namespace chronoscope;
using namespace chronoscope::metrics;

namespace {

// Censoring survival for the fixtures below, written out by hand as a step function.
struct HandCurve {
  std::vector<double> times, values;
  KmCurve curve() const { return {times, values, std::vector<std::size_t>(times.size(), 1)}; }
  double left(double t) const {
    double s = 1.0;
    for (std::size_t k = 0; k < times.size(); ++k) {
      if (times[k] < t) s = values[k];
    }
    return s;
  }
  double at(double t) const {
    double s = 1.0;
    for (std::size_t k = 0; k < times.size(); ++k) {
      if (times[k] <= t) s = values[k];
    }
    return s;
  }
};

double plain_auc(const std::vector<double>& r, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0;
      }
    }
  }
  return num / den;
}

SurvivalData uncensored(const std::vector<double>& t) { return {t, std::vector<bool>(t.size(), true)}; }

}  // namespace

TEST(CensoringCurve, MatchesHandProductLimit) {
  const SurvivalData d{{1, 2, 3, 4, 5, 6, 7, 8}, {true, false, true, true, false, true, false, false}};
  const auto g = censoring_curve(d);
  const HandCurve h{{2, 5, 7, 8}, {6.0 / 7, 6.0 / 7 * 3 / 4, 6.0 / 7 * 3 / 4 / 2, 0.0}};
  for (double t : {0.5, 1.0, 2.0, 2.5, 5.0, 6.0, 7.0, 8.0}) {
    EXPECT_NEAR(g.at(t), h.at(t), 1e-15);
    EXPECT_NEAR(g.left(t), h.left(t), 1e-15);
  }
}

TEST(CumulativeDynamicAuc, WeightedPairOracle) {
  const SurvivalData d{{1, 2, 3, 4, 5, 6, 7, 8}, {true, false, true, true, false, true, false, false}};
  const std::vector<double> r = {0.9, 0.1, 0.4, 0.7, 0.2, 0.4, 0.8, 0.3};
  const double tau = 5;
  const HandCurve h{{2, 5, 7, 8}, {6.0 / 7, 6.0 / 7 * 3 / 4, 6.0 / 7 * 3 / 4 / 2, 0.0}};
  double num = 0, den = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const bool case_i = d.time[i] <= tau && d.event[i];
      const bool ctrl_j = d.time[j] > tau;
      if (!case_i || !ctrl_j) continue;
      const double w = 1.0 / h.left(d.time[i]) * 1.0 / h.at(tau);
      den += w;
      num += w * (r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0);
    }
  }
  EXPECT_NEAR(cumulative_dynamic_auc(r, d, tau, censoring_curve(d)), num / den, 1e-10);
  EXPECT_NEAR(cumulative_dynamic_auc(r, d, tau, h.curve()), num / den, 1e-10);
}

TEST(CumulativeDynamicAuc, TrivialCasesAndErrors) {
  const auto d = uncensored({1, 2, 3, 4, 5, 6});
  const auto g = censoring_curve(d);
  EXPECT_EQ(cumulative_dynamic_auc({6, 5, 4, 3, 2, 1}, d, 3, g), 1.0);
  EXPECT_EQ(cumulative_dynamic_auc({1, 1, 1, 1, 1, 1}, d, 3, g), 0.5);
  try {
    cumulative_dynamic_auc({1, 2, 3, 4, 5, 6}, d, 10, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Undefined);
  }
  EXPECT_THROW(cumulative_dynamic_auc({1, 2, 3, 4, 5, 6}, d, 0.5, g), Error);
}

TEST(CumulativeDynamicAuc, ZeroCensoringEqualsPlainAuc) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 47);
    std::vector<double> t, r;
    for (int i = 0; i < n; ++i) {
      t.push_back(static_cast<double>(1 + rng() % 20));
      r.push_back(static_cast<double>(rng() % 10));
    }
    const double tau = 10;
    std::vector<int> y;
    for (double v : t) y.push_back(v <= tau ? 1 : 0);
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    const auto d = uncensored(t);
    EXPECT_EQ(cumulative_dynamic_auc(r, d, tau, censoring_curve(d)), plain_auc(r, y));
  }
}

TEST(CumulativeDynamicAuc, InvariantUnderMonotoneTransformAndOrder) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n;
  SurvivalData d;
  std::vector<double> r;
  for (int i = 0; i < 300; ++i) {
    d.time.push_back(std::round(100 * std::exp(n(rng))));
    d.event.push_back(rng() % 3 != 0);
    r.push_back(n(rng));
  }
  const auto g = censoring_curve(d);
  const double a = cumulative_dynamic_auc(r, d, 100, g);
  std::vector<double> rt;
  for (double v : r) rt.push_back(std::exp(3 * v) + 2);
  EXPECT_EQ(cumulative_dynamic_auc(rt, d, 100, g), a);
  SurvivalData dp;
  std::vector<double> rp;
  for (int i = 299; i >= 0; --i) {
    dp.time.push_back(d.time[static_cast<std::size_t>(i)]);
    dp.event.push_back(d.event[static_cast<std::size_t>(i)]);
    rp.push_back(r[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(cumulative_dynamic_auc(rp, dp, 100, censoring_curve(dp)), a, 1e-14);
  EXPECT_NEAR(uno_c_index(rp, dp, 100, censoring_curve(dp)), uno_c_index(r, d, 100, g), 1e-14);
}

TEST(UnoCIndex, NoCensoringEqualsHarrell) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> t, r;
    for (int i = 0; i < 30; ++i) {
      t.push_back(static_cast<double>(1 + rng() % 15));
      r.push_back(static_cast<double>(rng() % 8));
    }
    double num = 0, den = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (t[i] < t[j]) {
          den += 1;
          num += r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0;
        }
      }
    }
    const auto d = uncensored(t);
    EXPECT_NEAR(uno_c_index(r, d, 1e9, censoring_curve(d)), num / den, 1e-12);
  }
}

TEST(UnoCIndex, CensoredOracleAndTrivialCases) {
  const SurvivalData d{{1, 2, 3, 4, 5, 6, 7, 8}, {true, false, true, true, false, true, false, false}};
  const std::vector<double> r = {0.9, 0.1, 0.4, 0.7, 0.2, 0.4, 0.8, 0.3};
  const HandCurve h{{2, 5, 7, 8}, {6.0 / 7, 6.0 / 7 * 3 / 4, 6.0 / 7 * 3 / 4 / 2, 0.0}};
  const double tau = 6.5;
  double num = 0, den = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      if (!(d.time[i] < d.time[j] && d.time[i] < tau && d.event[i])) continue;
      const double w = 1.0 / (h.left(d.time[i]) * h.left(d.time[i]));
      den += w;
      num += w * (r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0);
    }
  }
  EXPECT_NEAR(uno_c_index(r, d, tau, censoring_curve(d)), num / den, 1e-10);

  const auto u = uncensored({1, 2, 3, 4});
  EXPECT_EQ(uno_c_index({1, 2, 3, 4}, u, 10, censoring_curve(u)), 0.0);
  const SurvivalData one{{1, 2}, {true, false}};
  EXPECT_EQ(uno_c_index({2, 1}, one, 10, censoring_curve(one)), 1.0);
  const SurvivalData none{{1, 2}, {false, false}};
  EXPECT_THROW(uno_c_index({2, 1}, none, 10, censoring_curve(none)), Error);
}

TEST(IpcwBrier, Examples) {
  const auto u = uncensored({1, 2, 3, 4, 5, 6});
  const auto g = censoring_curve(u);
  EXPECT_EQ(ipcw_brier({1, 1, 1, 0, 0, 0}, u, 3, g), 0.0);
  EXPECT_DOUBLE_EQ(ipcw_brier(std::vector<double>(6, 0.5), u, 3, g), 0.25);

  const SurvivalData d{{1, 2, 3, 4, 5, 6}, {true, false, true, false, true, false}};
  const std::vector<double> p = {0.8, 0.3, 0.6, 0.2, 0.1, 0.05};
  // Ĝ steps to 4/5 at the censoring at 2 (5 at risk); later steps fall beyond τ.
  const double g2 = 4.0 / 5;
  const double tau = 3.5;
  const double want = ((1 - 0.8) * (1 - 0.8) / 1.0 + (1 - 0.6) * (1 - 0.6) / g2 + 0.2 * 0.2 / g2 + 0.1 * 0.1 / g2 +
                       0.05 * 0.05 / g2) / 6.0;
  EXPECT_NEAR(ipcw_brier(p, d, tau, censoring_curve(d)), want, 1e-12);
  EXPECT_THROW(ipcw_brier({1.2, 0, 0, 0, 0, 0}, d, tau, censoring_curve(d)), Error);
}

TEST(IpcwBrier, PerfectProbabilitiesAreAMinimum) {
  std::mt19937_64 rng(14);
  SurvivalData d;
  for (int i = 0; i < 200; ++i) {
    d.time.push_back(static_cast<double>(1 + rng() % 50));
    d.event.push_back(rng() % 4 != 0);
  }
  const double tau = 25;
  std::vector<double> p;
  for (std::size_t i = 0; i < d.size(); ++i) p.push_back(d.time[i] <= tau && d.event[i] ? 1.0 : 0.0);
  const auto g = censoring_curve(d);
  const double best = ipcw_brier(p, d, tau, g);
  for (std::size_t i = 0; i < d.size(); i += 7) {
    auto q = p;
    q[i] = p[i] == 1.0 ? 0.95 : 0.05;
    const double v = ipcw_brier(q, d, tau, g);
    if (d.time[i] <= tau && !d.event[i]) {
      EXPECT_EQ(v, best);  // censored before τ carries zero weight
    } else {
      EXPECT_GT(v, best);
    }
  }
}

TEST(BalancedAccuracy, Examples) {
  const auto val = uncensored({1, 2, 3, 4, 5, 6});
  const std::vector<double> rv = {6, 5, 4, 3, 2, 1};
  EXPECT_EQ(balanced_accuracy(rv, val, rv, val, 3), 1.0);
  const auto [r, l] = labels_at(rv, val, 3);
  EXPECT_EQ(balanced_accuracy_at(r, l, *std::min_element(r.begin(), r.end())), 0.5);
  const auto single = uncensored({1, 2});
  EXPECT_THROW(balanced_accuracy({1, 2}, single, rv, val, 3), Error);

  std::mt19937_64 rng(15);
  std::normal_distribution<double> n;
  SurvivalData a, b;
  std::vector<double> ra, rb;
  for (int i = 0; i < 2000; ++i) {
    a.time.push_back(static_cast<double>(1 + rng() % 20));
    a.event.push_back(true);
    ra.push_back(n(rng));
    b.time.push_back(static_cast<double>(1 + rng() % 20));
    b.event.push_back(true);
    rb.push_back(n(rng));
  }
  EXPECT_NEAR(balanced_accuracy(ra, a, rb, b, 10), 0.5, 0.05);
}

TEST(BalancedAccuracy, CensoredBeforeTauRemoved) {
  const SurvivalData d{{1, 2, 5, 6}, {true, false, false, true}};
  const auto [r, l] = labels_at({0.9, 0.8, 0.1, 0.2}, d, 3);
  EXPECT_EQ(r, (std::vector<double>{0.9, 0.1, 0.2}));
  EXPECT_EQ(l, (std::vector<int>{1, 0, 0}));
}

TEST(Calibration, PerfectAndOffsetFixtures) {
  // Ten bins of ten; bin k holds k events before τ = 5 and no censoring.
  SurvivalData d;
  std::vector<double> p;
  for (int k = 0; k < 10; ++k) {
    for (int i = 0; i < 10; ++i) {
      d.time.push_back(i < k ? 1.0 + i % 3 : 10.0);
      d.event.push_back(i < k);
      p.push_back(k / 10.0);
    }
  }
  const auto perfect = calibration_indices(p, d, 5);
  EXPECT_NEAR(perfect.ici, 0.0, 1e-10);
  EXPECT_NEAR(perfect.mce, 0.0, 1e-10);
  for (auto& v : p) v += 0.1;
  const auto off = calibration_indices(p, d, 5);
  EXPECT_NEAR(off.ici, 0.1, 1e-10);
  EXPECT_NEAR(off.mce, 0.1, 1e-10);
  EXPECT_THROW(calibration_indices(std::vector<double>(100, 0.3), d, 5), Error);
}

TEST(Calibration, MceDominatesIci) {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 20; ++trial) {
    SurvivalData d;
    std::vector<double> p;
    for (int i = 0; i < 200; ++i) {
      d.time.push_back(1 + 30 * u(rng));
      d.event.push_back(u(rng) < 0.7);
      p.push_back(u(rng));
    }
    const auto c = calibration_indices(p, d, 15);
    EXPECT_GE(c.mce, c.ici);
  }
}

TEST(Bootstrap, ConstantSeedAndBinomialWidth) {
  const ResampledMetric constant = [](const std::vector<std::size_t>&) { return 0.7; };
  const auto c = bootstrap_ci(constant, 50);
  EXPECT_EQ(c.ci_low, 0.7);
  EXPECT_EQ(c.ci_high, 0.7);

  std::mt19937_64 rng(17);
  std::vector<double> x;
  for (int i = 0; i < 1000; ++i) x.push_back(static_cast<double>(rng() % 2));
  const ResampledMetric mean = [&](const std::vector<std::size_t>& rows) {
    double s = 0;
    for (auto r : rows) s += x[r];
    return s / static_cast<double>(rows.size());
  };
  const auto a = bootstrap_ci(mean, x.size(), 100, 5, 1);
  const auto b = bootstrap_ci(mean, x.size(), 100, 5, 3);
  EXPECT_EQ(a.ci_low, b.ci_low);
  EXPECT_EQ(a.ci_high, b.ci_high);
  const auto w = bootstrap_ci(mean, x.size(), 2000, 6);
  EXPECT_NEAR(w.ci_high - w.ci_low, 2 * 1.96 * 0.0158, 0.1 * 2 * 1.96 * 0.0158);
}

TEST(Bootstrap, UndefinedResamplesSkippedOrRejected) {
  const ResampledMetric sometimes = [](const std::vector<std::size_t>& rows) {
    if (rows[0] == 9 && rows[1] < 5) fail(ErrorKind::Undefined, "x");
    return 1.0;
  };
  const auto r = bootstrap_ci(sometimes, 10, 200, 1, 1);
  EXPECT_GT(r.n_undefined, 0);
  const ResampledMetric mostly = [](const std::vector<std::size_t>& rows) {
    if (rows[0] >= 5) fail(ErrorKind::Undefined, "x");
    return 1.0;
  };
  EXPECT_THROW(bootstrap_ci(mostly, 10, 200, 1, 1), Error);
}

TEST(BootstrapSignificance, IdenticalSwappedAndSeparable) {
  std::mt19937_64 rng(18);
  std::normal_distribution<double> n;
  SurvivalData d;
  std::vector<double> oracle, noise;
  for (int i = 0; i < 400; ++i) {
    const double z = n(rng);
    d.time.push_back(std::ceil(50 * std::exp(-1.5 * z + 0.3 * n(rng))));
    d.event.push_back(rng() % 5 != 0);
    oracle.push_back(z);
    noise.push_back(n(rng));
  }
  const auto fa = auc_metric(oracle, d, 50), fb = auc_metric(noise, d, 50);
  EXPECT_GE(bootstrap_significance(fa, fa, d.size(), 100, 3), 0.8);
  const double p = bootstrap_significance(fa, fb, d.size(), 100, 3);
  EXPECT_LT(p, 0.01);
  const double mid = bootstrap_significance(auc_metric(noise, d, 50), auc_metric(std::vector<double>(noise.rbegin(), noise.rend()), d, 50),
                                            d.size(), 100, 4);
  const double mid_swapped = bootstrap_significance(auc_metric(std::vector<double>(noise.rbegin(), noise.rend()), d, 50),
                                                    auc_metric(noise, d, 50), d.size(), 100, 4);
  EXPECT_EQ(mid, mid_swapped);
  EXPECT_EQ(bootstrap_significance(fb, fa, d.size(), 100, 3), p);
}
