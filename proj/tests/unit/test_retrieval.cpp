#include <gtest/gtest.h>

#include <random>
#include <set>

#include "chronoscope/retrieval/index.hpp"
#include "encoder_fixtures.hpp"

using namespace fixtures;
using namespace chronoscope::retrieval;

namespace {

std::vector<DenseVec> gaussian_vectors(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<DenseVec> out(n, DenseVec(d));
  for (auto& v : out) {
    for (auto& x : v) x = g(rng);
  }
  return out;
}

std::vector<std::string> ids_for(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("P-" + std::to_string(100000 + i));
  return ids;
}

PatientRecord patient(const std::string& id, std::vector<std::pair<std::int64_t, int>> events) {
  PatientRecord p;
  p.patient_id = id;
  p.demographics.sex = Sex::Female;
  p.demographics.ethnicity_vec = {0.1, -0.2, 0.3};
  p.demographics.birth_epoch_min = 1000000;
  for (auto [t, tok] : events) p.events.push_back({t, Modality::Diagnosis, "c", TokenId{static_cast<std::uint32_t>(tok)}});
  return p;
}

}  // namespace

TEST(BuildIndex, IdenticalHistoriesEmptyHistoryAndDeterminism) {
  const auto cfg = tiny_config();
  auto P = init_params(cfg, 10);
  jitter(P, 3);
  const std::vector<PatientRecord> ps = {patient("a", {{100, 1}, {200, 2}}), patient("b", {{100, 1}, {200, 2}}),
                                         patient("c", {}), patient("d", {{50, 4}})};
  const auto idx = build_index(ps, P, cfg, 1000000 + 10000, Modality::Diagnosis, 1);
  EXPECT_EQ(RowVec(idx.rows.row(0)), RowVec(idx.rows.row(1)));
  EXPECT_NEAR(idx.rows.row(0).dot(idx.rows.row(1)), 1.0, 1e-12);
  EXPECT_TRUE(idx.rows.row(2).allFinite());
  for (Eigen::Index r = 0; r < idx.rows.rows(); ++r) EXPECT_NEAR(idx.rows.row(r).norm(), 1.0, 1e-6);
  const auto again = build_index(ps, P, cfg, 1000000 + 10000, Modality::Diagnosis, 2);
  EXPECT_EQ(serialize_index(idx), serialize_index(again));
  const auto back = deserialize_index(serialize_index(idx));
  EXPECT_EQ(back.ids, idx.ids);
  EXPECT_EQ(back.rows, idx.rows);
  EXPECT_EQ(back.prompt, Modality::Diagnosis);
}

TEST(BuildIndex, CalendarTruncation) {
  auto alive = patient("a", {{100, 1}, {200, 2}, {300, 3}});
  EXPECT_EQ(embedding_time(alive, 1000000 + 200), 199);
  auto dead = alive;
  dead.death_time_min = 300;
  EXPECT_EQ(embedding_time(dead, 1000000 + 5000), 300);
  EXPECT_EQ(embedding_time(dead, 1000000 + 250), 249);
  EXPECT_EQ(embedding_time(alive, 0), 0);
}

TEST(KnnQuery, HandExampleAndTies) {
  const std::vector<DenseVec> v = {{1, 0}, {0.6, 0.8}, {-1, 0}, {0.8, 0.6}, {0, -1}};
  const auto idx = index_from_vectors({"e", "d", "c", "b", "a"}, v);
  const DenseVec q = {1, 0.2};
  // Brute force: cosine with q.
  std::vector<std::pair<double, std::string>> scored;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double c = (v[i][0] * q[0] + v[i][1] * q[1]) / (std::hypot(v[i][0], v[i][1]) * std::hypot(q[0], q[1]));
    scored.emplace_back(-c, idx.ids[i]);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> want;
  for (const auto& s : scored) want.push_back(s.second);
  EXPECT_EQ(knn_query(idx, q, 5), want);
  EXPECT_EQ(knn_query(idx, {1, 0}, 1), std::vector<std::string>{"e"});
  // Equal similarity: ascending id.
  const auto tie = index_from_vectors({"z", "m", "a"}, {{1, 0}, {1, 0}, {1, 0}});
  EXPECT_EQ(knn_query(tie, {2, 0}, 3), (std::vector<std::string>{"a", "m", "z"}));
  EXPECT_THROW(knn_query(idx, {0, 0}, 1), Error);
  EXPECT_THROW(knn_query(idx, q, 6), Error);
}

TEST(KnnQuery, StoredRowFirstAndFullPermutation) {
  const auto idx = index_from_vectors(ids_for(200), gaussian_vectors(200, 16, 1));
  for (std::size_t r = 0; r < 200; r += 17) EXPECT_EQ(knn_query(idx, row_vector(idx, r), 1)[0], idx.ids[r]);
  auto all = knn_query(idx, row_vector(idx, 0), 200);
  std::sort(all.begin(), all.end());
  auto ids = idx.ids;
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(all, ids);
}

TEST(EvaluateRetrieval, WholeIndexRandomCohortAndRotation) {
  const std::size_t n = 2000;
  const auto vecs = gaussian_vectors(n, 16, 2);
  const auto ids = ids_for(n);
  const auto idx = index_from_vectors(ids, vecs);
  EXPECT_EQ(evaluate_retrieval(idx, ids, 5, 5, 1).mean, 1.0);

  std::vector<std::string> cohort;
  for (std::size_t i = 0; i < n; i += 5) cohort.push_back(ids[i]);
  const auto r = evaluate_retrieval(idx, cohort, 5, 5, 1);
  // Under random ranking each neighbour is a cohort member with the candidate-pool prevalence
  // (400 − 80) / (2000 − 80): the held-out fold leaves the index.
  EXPECT_NEAR(r.mean, 320.0 / 1920.0, 0.02);
  ASSERT_EQ(r.folds.size(), 5u);
  for (const auto& f : r.folds) EXPECT_NEAR(f.prevalence, 320.0 / 1920.0, 1e-15);
  std::size_t queries = 0;
  for (const auto& f : r.folds) queries += f.queries;
  EXPECT_EQ(queries, cohort.size());

  // Random orthogonal rotation.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Eigen::MatrixXd A(16, 16);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = g(rng);
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();
  std::vector<DenseVec> rotated;
  for (const auto& v : vecs) {
    const Eigen::VectorXd x = Q * Eigen::Map<const Eigen::VectorXd>(v.data(), 16);
    rotated.emplace_back(x.data(), x.data() + 16);
  }
  const auto rr = evaluate_retrieval(index_from_vectors(ids, rotated), cohort, 5, 5, 1);
  EXPECT_NEAR(rr.mean, r.mean, 1e-12);
  EXPECT_THROW(evaluate_retrieval(idx, {"missing"}, 5, 5, 1), Error);
}

TEST(EvaluateRetrieval, FoldsAreADisjointCover) {
  std::vector<std::size_t> members(103);
  std::iota(members.begin(), members.end(), 7);
  const auto folds = make_folds(members, 5, 11);
  std::multiset<std::size_t> seen;
  for (const auto& f : folds) {
    EXPECT_GE(f.size(), 20u);
    seen.insert(f.begin(), f.end());
  }
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), seen.size());
  EXPECT_EQ(seen.size(), members.size());
}

TEST(EvaluateRetrieval, NoSelfRetrieval) {
  // Cohort members are far from everything except themselves; without self-exclusion Acc@1 would be 1.
  auto vecs = gaussian_vectors(300, 8, 4);
  std::vector<std::string> cohort;
  const auto ids = ids_for(300);
  for (std::size_t i = 0; i < 10; ++i) {
    vecs[i] = DenseVec(8, 0.0);
    vecs[i][i % 8] = 1000.0;
    vecs[i][(i + 1) % 8] = static_cast<double>(i);
    cohort.push_back(ids[i]);
  }
  const auto r = evaluate_retrieval(index_from_vectors(ids, vecs), cohort, 1, 5, 1);
  EXPECT_LT(r.mean, 1.0);
}

TEST(BinomialSf, Values) {
  EXPECT_NEAR(binomial_sf(2, 3, 0.5), 0.5, 1e-15);
  EXPECT_NEAR(binomial_sf(3, 3, 0.5), 0.125, 1e-15);
  EXPECT_EQ(binomial_sf(0, 3, 0.5), 1.0);
  EXPECT_NEAR(binomial_sf(1, 10, 0.1), 1.0 - std::pow(0.9, 10), 1e-14);
}
