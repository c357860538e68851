#pragma once

// Exact cosine-similarity patient search and the k-fold Acc@k retrieval protocol.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "chronoscope/encoder/checkpoint.hpp"
#include "chronoscope/encoder/pretrain.hpp"

namespace chronoscope::retrieval {

using enc::Mat;
using enc::RowVec;

struct SearchIndex {
  Mat rows;  // unit L2 norm
  std::vector<std::string> ids;
  std::int64_t as_of_epoch_min = 0;
  Modality prompt = Modality::Diagnosis;

  std::size_t size() const { return ids.size(); }
};

// Minutes since birth at which a patient is embedded for a calendar as-of time: events strictly
// before as_of; patients who died before as_of keep their whole record.
inline std::int64_t embedding_time(const PatientRecord& p, std::int64_t as_of_epoch_min) {
  const std::int64_t rel = as_of_epoch_min - p.demographics.birth_epoch_min;
  if (p.death_time_min && *p.death_time_min < rel) {
    const std::int64_t last = p.events.empty() ? 0 : p.events.back().time_min;
    return std::max(last, *p.death_time_min);
  }
  return std::max<std::int64_t>(rel - 1, 0);
}

inline RowVec unit(const DenseVec& v, const std::string& what) {
  RowVec r = Eigen::Map<const RowVec>(v.data(), static_cast<Eigen::Index>(v.size()));
  const double n = r.norm();
  if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::Numeric, what + ": zero or non-finite vector");
  return r / n;
}

inline SearchIndex index_from_vectors(const std::vector<std::string>& ids, const std::vector<DenseVec>& vecs,
                                      std::int64_t as_of_epoch_min = 0, Modality prompt = Modality::Diagnosis) {
  require(ids.size() == vecs.size(), "build_index: ids and vectors differ in length");
  SearchIndex idx;
  idx.ids = ids;
  idx.as_of_epoch_min = as_of_epoch_min;
  idx.prompt = prompt;
  if (ids.empty()) return idx;
  idx.rows.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(vecs.front().size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(vecs[i].size() == vecs.front().size(), "build_index: inconsistent vector dimension");
    idx.rows.row(static_cast<Eigen::Index>(i)) = unit(vecs[i], "build_index row " + ids[i]);
  }
  return idx;
}

inline SearchIndex build_index(const std::vector<PatientRecord>& patients, const enc::Params& P, const enc::EncoderConfig& cfg,
                               std::int64_t as_of_epoch_min, Modality prompt = Modality::Diagnosis, int threads = 0) {
  std::vector<const PatientRecord*> ptrs;
  std::vector<std::int64_t> times;
  std::vector<std::string> ids;
  for (const auto& p : patients) {
    ptrs.push_back(&p);
    times.push_back(embedding_time(p, as_of_epoch_min));
    ids.push_back(p.patient_id);
  }
  const auto vecs = enc::embed_patients(ptrs, times, P, cfg, prompt, resolve_threads(threads));
  return index_from_vectors(ids, vecs, as_of_epoch_min, prompt);
}

// Comparator: the raw payload of each patient's most recent note before as_of. Patients without
// a note are left out.
inline SearchIndex build_last_note_index(const std::vector<PatientRecord>& patients, std::int64_t as_of_epoch_min) {
  std::vector<std::string> ids;
  std::vector<DenseVec> vecs;
  for (const auto& p : patients) {
    const auto t = embedding_time(p, as_of_epoch_min);
    const DenseVec* last = nullptr;
    for (const auto& e : p.events) {
      if (e.time_min > t) break;
      if (e.modality == Modality::NoteText) last = &e.dense();
    }
    if (last) {
      ids.push_back(p.patient_id);
      vecs.push_back(*last);
    }
  }
  return index_from_vectors(ids, vecs, as_of_epoch_min, Modality::NoteText);
}

// Top-k rows by cosine similarity, ties broken by ascending id. `allowed` (optional) masks candidates.
inline std::vector<std::size_t> knn_rows(const SearchIndex& idx, const DenseVec& query, std::size_t k,
                                         const std::vector<char>* allowed = nullptr) {
  require(static_cast<Eigen::Index>(query.size()) == idx.rows.cols(), "knn_query: query dimension mismatch");
  require(std::any_of(query.begin(), query.end(), [](double v) { return v != 0.0; }), "knn_query: zero query vector");
  const RowVec q = unit(query, "knn_query");
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (!allowed || (*allowed)[i]) cand.push_back(i);
  }
  require(k <= cand.size(), "knn_query: k exceeds the number of candidates");
  const Eigen::VectorXd s = idx.rows * q.transpose();
  auto better = [&](std::size_t a, std::size_t b) {
    const double sa = s(static_cast<Eigen::Index>(a)), sb = s(static_cast<Eigen::Index>(b));
    return sa != sb ? sa > sb : idx.ids[a] < idx.ids[b];
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
  cand.resize(k);
  return cand;
}

inline std::vector<std::string> knn_query(const SearchIndex& idx, const DenseVec& query, std::size_t k) {
  std::vector<std::string> out;
  for (auto r : knn_rows(idx, query, k)) out.push_back(idx.ids[r]);
  return out;
}

inline DenseVec row_vector(const SearchIndex& idx, std::size_t r) {
  const auto row = idx.rows.row(static_cast<Eigen::Index>(r));
  return DenseVec(row.data(), row.data() + row.size());
}

// One-sided binomial tail P(X ≥ x) for X ~ Bin(n, p).
inline double binomial_sf(std::size_t x, std::size_t n, double p) {
  require(p >= 0.0 && p <= 1.0, "binomial_sf: p outside [0,1]");
  if (x == 0) return 1.0;
  if (x > n) return 0.0;
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;
  double total = 0.0;
  for (std::size_t j = x; j <= n; ++j) {
    const double lj = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(j) + 1) -
                      std::lgamma(static_cast<double>(n - j) + 1) + static_cast<double>(j) * std::log(p) +
                      static_cast<double>(n - j) * std::log1p(-p);
    total += std::exp(lj);
  }
  return std::min(1.0, total);
}

struct FoldResult {
  std::size_t queries = 0;
  std::size_t hits = 0;        // cohort members among all retrieved neighbours
  double accuracy = 0.0;       // mean over queries of hits/k
  double prevalence = 0.0;     // cohort share of the candidate pool
  double p_value = 1.0;        // one-sided binomial test of hits against prevalence
};

struct RetrievalReport {
  std::size_t k = 5;
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double sd = 0.0;
  bool small_cohort = false;  // fewer than n_folds·k members
};

// Disjoint folds covering the cohort (seeded shuffle, then round-robin).
inline std::vector<std::vector<std::size_t>> make_folds(const std::vector<std::size_t>& members, int n_folds, std::uint64_t seed) {
  require(n_folds > 0, "evaluate_retrieval: n_folds must be positive");
  auto order = members;
  std::mt19937_64 rng(hash_combine(seed, 0xF01DULL));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(n_folds));
  for (std::size_t i = 0; i < order.size(); ++i) folds[i % folds.size()].push_back(order[i]);
  return folds;
}

inline RetrievalReport evaluate_retrieval(const SearchIndex& idx, const std::vector<std::string>& cohort_ids, std::size_t k = 5,
                                          int n_folds = 5, std::uint64_t seed = 0, int threads = 0) {
  require(k > 0, "evaluate_retrieval: k must be positive");
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < idx.size(); ++i) row_of.emplace(idx.ids[i], i);
  std::vector<char> in_cohort(idx.size(), 0);
  std::vector<std::size_t> members;
  for (const auto& id : cohort_ids) {
    auto it = row_of.find(id);
    if (it == row_of.end()) fail(ErrorKind::Validation, "evaluate_retrieval: cohort patient '" + id + "' is not in the index");
    if (!in_cohort[it->second]) members.push_back(it->second);
    in_cohort[it->second] = 1;
  }
  require(members.size() >= static_cast<std::size_t>(n_folds), "evaluate_retrieval: cohort smaller than the number of folds");
  RetrievalReport rep;
  rep.k = k;
  rep.small_cohort = members.size() < static_cast<std::size_t>(n_folds) * k;
  const auto folds = make_folds(members, n_folds, seed);
  rep.folds.resize(folds.size());
  parallel_for(folds.size(), resolve_threads(threads), [&](std::size_t f) {
    std::vector<char> allowed(idx.size(), 1);
    for (auto r : folds[f]) allowed[r] = 0;  // the held-out fold (including each query) leaves the index
    FoldResult fr;
    fr.queries = folds[f].size();
    double acc = 0.0;
    for (auto q : folds[f]) {
      std::size_t h = 0;
      for (auto r : knn_rows(idx, row_vector(idx, q), k, &allowed)) h += in_cohort[r] != 0;
      fr.hits += h;
      acc += static_cast<double>(h) / static_cast<double>(k);
    }
    fr.accuracy = acc / static_cast<double>(fr.queries);
    const double pool = static_cast<double>(idx.size() - folds[f].size());
    fr.prevalence = static_cast<double>(members.size() - folds[f].size()) / pool;
    fr.p_value = binomial_sf(fr.hits, fr.queries * k, fr.prevalence);
    rep.folds[f] = fr;
  });
  for (const auto& f : rep.folds) rep.mean += f.accuracy / static_cast<double>(rep.folds.size());
  if (rep.folds.size() > 1) {
    double ss = 0.0;
    for (const auto& f : rep.folds) ss += (f.accuracy - rep.mean) * (f.accuracy - rep.mean);
    rep.sd = std::sqrt(ss / static_cast<double>(rep.folds.size() - 1));
  }
  return rep;
}

inline std::string serialize_index(const SearchIndex& idx) {
  json meta = {{"kind", "index"}, {"ids", idx.ids}, {"as_of_epoch_min", idx.as_of_epoch_min}, {"prompt", to_string(idx.prompt)}};
  return enc::write_tensor_container(meta, {{"rows", idx.rows}});
}

inline SearchIndex deserialize_index(std::string_view bytes) {
  auto [meta, tensors] = enc::read_tensor_container(bytes);
  require(meta.value("kind", std::string()) == "index", "container is not a search index");
  SearchIndex idx;
  idx.ids = meta.at("ids").get<std::vector<std::string>>();
  idx.as_of_epoch_min = meta.at("as_of_epoch_min").get<std::int64_t>();
  idx.prompt = modality_from_string(meta.at("prompt").get<std::string>());
  if (tensors.size() != 1 || tensors[0].name != "rows") fail(ErrorKind::Io, "search index: missing rows tensor");
  idx.rows = std::move(tensors[0].value);
  if (static_cast<std::size_t>(idx.rows.rows()) != idx.ids.size() && !idx.ids.empty()) {
    fail(ErrorKind::Io, "search index: row count does not match ids");
  }
  return idx;
}

}  // namespace chronoscope::retrieval
