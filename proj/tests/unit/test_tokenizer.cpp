#include <gtest/gtest.h>

#include <random>

#include "chronoscope/tokenizer/tokenizer.hpp"

using namespace chronoscope;
using namespace chronoscope::tok;

namespace {

// Independent percentile: rank-based interpolation written out directly.
double oracle_percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const double f = std::floor(h);
  const auto i = static_cast<std::size_t>(f);
  if (i + 1 >= v.size()) return v.back();
  return v[i] * (1.0 - (h - f)) + v[i + 1] * (h - f);
}

EventRecord lab(std::int64_t t, std::string code, double v) { return {t, Modality::Lab, std::move(code), Measurement{v}}; }

}  // namespace

TEST(Transform, FixedPointsAndOddness) {
  EXPECT_EQ(transform_value(0.0), 0.0);
  EXPECT_NEAR(transform_value(std::exp(1.0) - 1.0), 1.0, 1e-15);
  EXPECT_NEAR(transform_value(-(std::exp(1.0) - 1.0)), -1.0, 1e-15);
  EXPECT_THROW(transform_value(std::nan("")), Error);
  EXPECT_THROW(transform_value(INFINITY), Error);
}

TEST(Transform, StrictlyMonotoneOnRandomPairs) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 20000; ++i) {
    double a = n(rng) * std::pow(10.0, i % 12 - 6), b = n(rng) * std::pow(10.0, i % 9 - 4);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    EXPECT_LT(transform_value(a), transform_value(b)) << a << " " << b;
  }
}

TEST(FitBins, UniformSamplePercentiles) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  std::vector<double> xs(1000);
  for (auto& x : xs) x = u(rng);
  const auto s = fit_bins("LAB", xs);
  std::vector<double> t;
  for (double x : xs) t.push_back(std::copysign(std::log(std::abs(x) + 1.0), x));
  EXPECT_NEAR(s.p2_5, oracle_percentile(t, 0.025), 1e-12);
  EXPECT_NEAR(s.p97_5, oracle_percentile(t, 0.975), 1e-12);
  // Sampling tolerance: 4 binomial standard deviations of the empirical quantile, mapped through t.
  EXPECT_NEAR(std::expm1(s.p2_5), 2.5, 2.0);
  EXPECT_NEAR(std::expm1(s.p97_5), 97.5, 2.0);
  EXPECT_DOUBLE_EQ(s.edges[1], s.p2_5);
  EXPECT_DOUBLE_EQ(s.edges[9], s.p97_5);
  for (int i = 0; i < kNumBins; ++i) EXPECT_LT(s.edges[i], s.edges[i + 1]);
  const double w = (s.p97_5 - s.p2_5) / 8.0;
  for (int i = 1; i < 9; ++i) EXPECT_NEAR(s.edges[i + 1] - s.edges[i], w, 1e-12);
}

TEST(FitBins, TwoValuedSample) {
  std::vector<double> xs(50, 0.0);
  xs.insert(xs.end(), 50, 1.0);
  const auto s = fit_bins("B", xs);
  EXPECT_DOUBLE_EQ(s.p2_5, 0.0);
  EXPECT_DOUBLE_EQ(s.p97_5, std::log(2.0));
  EXPECT_NEAR(s.edges[2] - s.edges[1], (std::log(2.0) - 0.0) / 8.0, 1e-15);
}

TEST(FitBins, ConstantIsDegenerate) {
  std::vector<double> xs(20, 3.0);
  EXPECT_THROW(fit_bins("C", xs), Degenerate);
  bool degenerate = false;
  const auto s = fit_bins_lenient("C", xs, &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_EQ(assign_bin(s, 3.0), kDegenerateBin);
  EXPECT_EQ(assign_bin(s, -100.0), kDegenerateBin);
}

TEST(AssignBin, ExtremesAndBoundary) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(10.0, 3.0);
  std::vector<double> xs(41);
  for (auto& x : xs) x = n(rng);
  const auto s = fit_bins("L", xs);
  auto sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  // With 41 samples the 2.5th percentile is exactly the second order statistic.
  ASSERT_DOUBLE_EQ(s.p2_5, transform_value(sorted[1]));
  EXPECT_EQ(assign_bin(s, sorted[1]), 1);
  EXPECT_EQ(assign_bin(s, sorted[0] - 1.0), 0);
  EXPECT_EQ(assign_bin(s, sorted.back() + 1.0), 9);
  EXPECT_EQ(assign_bin(s, 1e300), 9);
  EXPECT_THROW(assign_bin(s, std::nan("")), Error);
  // Oracle: linear scan of half-open intervals.
  for (double x : xs) {
    const double t = transform_value(x);
    int want = 0;
    for (int b = 1; b <= 9; ++b) {
      if (t >= s.edges[b]) want = b;
    }
    EXPECT_EQ(assign_bin(s, x), want);
  }
}

TEST(AssignBin, CentralMassNear95Percent) {
  std::mt19937_64 rng(7);
  std::lognormal_distribution<double> ln(1.0, 1.2);
  std::normal_distribution<double> n(-4.0, 20.0);
  for (int dist = 0; dist < 2; ++dist) {
    std::vector<double> xs(5000);
    for (auto& x : xs) x = dist == 0 ? ln(rng) : n(rng);
    const auto s = fit_bins("L", xs);
    int central = 0;
    for (double x : xs) central += assign_bin(s, x) >= 1 && assign_bin(s, x) <= 8;
    const double frac = central / 5000.0;
    EXPECT_GE(frac, 0.94);
    EXPECT_LE(frac, 0.96);
  }
}

TEST(Category, Canonicalization) {
  const auto m = fit_category_map("LAB-X", {"pos", "neg"});
  EXPECT_EQ(canonicalize_category(m, "POS "), "Positive");
  EXPECT_EQ(canonicalize_category(m, "+"), "Positive");
  EXPECT_EQ(canonicalize_category(m, " Negative"), "Negative");
  EXPECT_EQ(canonicalize_category(m, "indeterminate"), "OTHER");
  EXPECT_EQ(m.canonical_labels, (std::vector<std::string>{"Negative", "OTHER", "Positive"}));
  // Every synonym maps to exactly one canonical label that belongs to the inventory.
  for (const auto& [raw, label] : m.synonym_table) {
    EXPECT_NE(std::find(m.canonical_labels.begin(), m.canonical_labels.end(), label), m.canonical_labels.end());
  }
}

TEST(Vocabulary, CountByConstruction) {
  PatientRecord p;
  p.patient_id = "a";
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(5.0, 2.0);
  for (int i = 0; i < 5; ++i) p.events.push_back({i, Modality::Diagnosis, "DX-" + std::to_string(i), std::monostate{}});
  for (int l = 0; l < 3; ++l) {
    for (int k = 0; k < 30; ++k) p.events.push_back(lab(100 + k, "LAB-C" + std::to_string(l) + "-00" + std::to_string(l), n(rng)));
  }
  const auto t = fit_tokenizer({p});
  EXPECT_EQ(t.vocab.size(), 5u + 3u * 10u);
  const auto empty = fit_tokenizer({});
  EXPECT_EQ(empty.vocab.size(), 0u);
  EXPECT_THROW(build_vocabulary({p}, {}, {}), Error);
}

TEST(Tokenize, SplitSafeOnUnseenValues) {
  PatientRecord train;
  train.patient_id = "t";
  for (int k = 0; k < 40; ++k) train.events.push_back(lab(k, "LAB-C0-001", k));
  train.events.push_back({50, Modality::Lab, "LAB-C0-007", Answer{"pos"}});
  train.events.push_back({60, Modality::Diagnosis, "DX-001", std::monostate{}});
  const auto t = fit_tokenizer({train});

  PatientRecord val;
  val.patient_id = "v";
  val.events = {lab(1, "LAB-C0-001", -1e9), lab(2, "LAB-C0-001", 1e9), {3, Modality::Lab, "LAB-C0-007", Answer{"weird"}},
                {4, Modality::Diagnosis, "DX-999", std::monostate{}}, {5, Modality::NoteText, "NOTE", DenseVec{1.0}}};
  TokenizeStats stats;
  const auto out = tokenize_patient(val, t, &stats);
  ASSERT_EQ(out.events.size(), 4u);
  EXPECT_EQ(stats.dropped_unknown, 1u);
  EXPECT_EQ(t.vocab.entry(out.events[0].token()).qualifier, "0");
  EXPECT_EQ(t.vocab.entry(out.events[1].token()).qualifier, "9");
  EXPECT_EQ(t.vocab.entry(out.events[2].token()).qualifier, "OTHER");
  EXPECT_EQ(t.vocab.entry(out.events[0].token()).subdomain, "LAB-C0");
}

TEST(Tokenize, SpecsRoundTripBitExact) {
  PatientRecord train;
  train.patient_id = "t";
  std::mt19937_64 rng(9);
  std::lognormal_distribution<double> ln(0.3, 2.0);
  for (int k = 0; k < 300; ++k) train.events.push_back(lab(k, "LAB-C0-00" + std::to_string(k % 4), ln(rng)));
  train.events.push_back({400, Modality::Lab, "LAB-C1-007", Answer{"neg"}});
  const auto t = fit_tokenizer({train});
  Tokenizer back;
  specs_from_json(json::parse(specs_to_json(t).dump()), back);
  EXPECT_EQ(back.bins, t.bins);
  EXPECT_EQ(back.categories, t.categories);
}
