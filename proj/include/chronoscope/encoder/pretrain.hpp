#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/parallel.hpp"
#include "chronoscope/encoder/model.hpp"

namespace chronoscope::enc {

// Linear warmup from 0 to peak, then cosine decay to 0 at total.
inline double lr_at(int it, int warmup, int total, double peak) {
  if (total <= 0) return 0.0;
  if (it <= warmup) return warmup == 0 ? peak : peak * static_cast<double>(it) / warmup;
  if (it >= total) return 0.0;
  const double progress = static_cast<double>(it - warmup) / static_cast<double>(total - warmup);
  return 0.5 * peak * (1.0 + std::cos(M_PI * progress));
}

class AdamW {
 public:
  AdamW(const Params& shape, const EncoderConfig& cfg) : cfg_(cfg), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

  void step(Params& p, Params& g, double lr_base, double lr_heads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto pt = p.tensors();
    auto gt = g.tensors();
    auto mt = m_.tensors();
    auto vt = v_.tensors();
    for (std::size_t i = 0; i < pt.size(); ++i) {
      const double lr = pt[i].group == ParamGroup::Base ? lr_base : lr_heads;
      auto& w = *pt[i].value;
      const auto& gr = *gt[i].value;
      auto& m = *mt[i].value;
      auto& v = *vt[i].value;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gr;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gr.cwiseAbs2();
      if (pt[i].decay) w *= 1.0 - lr * cfg_.weight_decay;
      w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.adam_eps);
    }
  }

 private:
  EncoderConfig cfg_;
  Params m_, v_;
  int t_ = 0;
};

// Scales gradients so that their global L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(Params& g, double max_norm) {
  double sq = 0.0;
  for (auto& t : g.tensors()) sq += t.value->squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    for (auto& t : g.tensors()) *t.value *= max_norm / norm;
  }
  return norm;
}

struct ValPoint {
  int iter = 0;
  double l_struct = 0.0;
  double l_unstruct = 0.0;
  double total() const { return l_struct + l_unstruct; }
};

struct ReconstructionEval {
  SeqLoss loss;
  double mean_vocab = 0.0;  // mean restricted-vocabulary size over masked structured positions
};

struct PretrainResult {
  Params params;
  std::vector<double> train_loss;
  std::vector<ValPoint> val;
  int best_iter = 0;
};

namespace detail {

inline std::vector<std::size_t> nonempty(const std::vector<PatientRecord>& xs) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i].events.empty()) idx.push_back(i);
  }
  return idx;
}

// Number of fixed gradient shards; results do not depend on the worker count.
inline constexpr std::size_t kGradShards = 8;

}  // namespace detail

// Held-out reconstruction loss: most recent max_seq events per patient, deterministic masks.
inline ReconstructionEval evaluate_reconstruction(const Params& P, const EncoderConfig& cfg, const DecodeGroups& groups,
                                                  const std::vector<PatientRecord>& patients, std::size_t max_patients,
                                                  std::size_t threads = 1) {
  const auto idx = detail::nonempty(patients);
  const std::size_t n = std::min(max_patients, idx.size());
  std::vector<SeqLoss> losses(n);
  std::vector<double> vocab_sum(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& p = patients[idx[i]];
    const std::size_t end = p.events.size();
    const std::size_t begin = end > static_cast<std::size_t>(cfg.max_seq) ? end - static_cast<std::size_t>(cfg.max_seq) : 0;
    auto in = build_input(p, begin, end, cfg, static_cast<std::size_t>(P.W_emb.rows()), p.demographics.age_at_last_event_min);
    std::mt19937_64 rng(hash_combine(hash64(p.patient_id, cfg.seed), 0x7A1ULL));
    apply_masking(in, rng, cfg.mask_ratio);
    losses[i] = sequence_step(P, cfg, groups, in, 0, 0, nullptr);
    for (const auto& e : in.events) {
      if (e.masked && !e.is_prompt && !is_unstructured(e.modality)) {
        vocab_sum[i] += static_cast<double>(groups.members[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(e.token)])].size());
      }
    }
  });
  ReconstructionEval out;
  double vs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    vs += vocab_sum[i];
  }
  out.mean_vocab = out.loss.n_struct ? vs / static_cast<double>(out.loss.n_struct) : 0.0;
  return out;
}

using ProgressFn = std::function<void(int iter, double train_loss, const ValPoint* val)>;

// Masked-modeling pretraining with AdamW, two LR groups, clipping, warmup + cosine schedule, periodic
// validation and best-validation checkpoint selection.
inline PretrainResult pretrain(const std::vector<PatientRecord>& train, const std::vector<PatientRecord>& val,
                               const EncoderConfig& cfg, const Vocabulary& vocab, std::size_t threads = 1,
                               const ProgressFn& progress = {}) {
  cfg.validate();
  PretrainResult res;
  res.params = init_params(cfg, vocab.size());
  if (cfg.total_iters == 0) return res;
  const auto groups = DecodeGroups::from(vocab);
  const auto pool = detail::nonempty(train);
  require(!pool.empty(), "pretrain: training split has no events");

  Params& P = res.params;
  AdamW opt(P, cfg);
  std::vector<Params> shard_grads(detail::kGradShards, P.zeros_like());
  Params grad = P.zeros_like();
  Params best = P;
  double best_val = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(hash_combine(cfg.seed, 0x9E7ULL));
  const int warmup = cfg.warmup();
  const auto V = vocab.size();

  auto validate = [&](int iter) {
    const auto ev = evaluate_reconstruction(P, cfg, groups, val, static_cast<std::size_t>(cfg.val_patients), threads);
    ValPoint vp{iter, ev.loss.struct_mean(), ev.loss.unstruct_mean()};
    if (!std::isfinite(vp.total())) fail(ErrorKind::Numeric, "pretrain: non-finite validation loss at iteration " + std::to_string(iter));
    res.val.push_back(vp);
    if (vp.total() < best_val) {
      best_val = vp.total();
      best = P;
      res.best_iter = iter;
    }
    return vp;
  };
  if (!val.empty()) validate(0);

  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int it = 0; it < cfg.total_iters; ++it) {
    // Sample windows and masks for the whole batch first: the loss normalizers are batch-global.
    std::vector<SeqInput> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    MaskCounts counts;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& p = train[pool[pick(rng)]];
      const std::size_t n = p.events.size();
      std::size_t begin = 0;
      if (n > static_cast<std::size_t>(cfg.max_seq)) {
        std::uniform_int_distribution<std::size_t> start(0, n - static_cast<std::size_t>(cfg.max_seq));
        begin = start(rng);
      }
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.max_seq));
      auto in = build_input(p, begin, end, cfg, V, p.demographics.age_at_last_event_min);
      apply_masking(in, rng, cfg.mask_ratio);
      const auto c = count_masked(in);
      counts.n_struct += c.n_struct;
      counts.n_unstruct += c.n_unstruct;
      batch.push_back(std::move(in));
    }
    const double ws = counts.n_struct ? 1.0 / static_cast<double>(counts.n_struct) : 0.0;
    const double wu = counts.n_unstruct ? 1.0 / static_cast<double>(counts.n_unstruct) : 0.0;

    std::vector<SeqLoss> shard_loss(detail::kGradShards);
    parallel_for(detail::kGradShards, threads, [&](std::size_t s) {
      shard_grads[s].set_zero();
      for (std::size_t b = s; b < batch.size(); b += detail::kGradShards) {
        shard_loss[s] += sequence_step(P, cfg, groups, batch[b], ws, wu, &shard_grads[s]);
      }
    });
    grad.set_zero();
    SeqLoss loss;
    for (std::size_t s = 0; s < detail::kGradShards; ++s) {
      add_into(grad, shard_grads[s]);
      loss += shard_loss[s];
    }
    const double l = loss.total();
    if (!std::isfinite(l)) fail(ErrorKind::Numeric, "pretrain: non-finite loss at iteration " + std::to_string(it));
    res.train_loss.push_back(l);
    clip_grad_norm(grad, cfg.grad_clip);
    const double lr_b = lr_at(it + 1, warmup, cfg.total_iters, cfg.lr_base);
    const double lr_h = lr_at(it + 1, warmup, cfg.total_iters, cfg.lr_heads);
    opt.step(P, grad, lr_b, lr_h);
    if (!P.all_finite()) fail(ErrorKind::Numeric, "pretrain: non-finite parameters after iteration " + std::to_string(it));

    const bool do_val = !val.empty() && cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.total_iters);
    if (do_val) {
      const auto vp = validate(it + 1);
      if (progress) progress(it + 1, l, &vp);
    } else if (progress) {
      progress(it + 1, l, nullptr);
    }
  }
  if (!val.empty()) res.params = std::move(best);
  return res;
}

// ---------------------------------------------------------------- patient embeddings

inline constexpr std::size_t kMaxHistoryEvents = 100000;

inline bool valid_prompt(Modality m) { return m == Modality::Diagnosis || m == Modality::NoteText || m == Modality::Image; }

// Builds the inference input: events up to as_of (capped to the most recent 100,000, then windowed to
// max_seq) plus a masked prompt position carrying the time encoding of the last retained event.
inline SeqInput prompt_input(const PatientRecord& p, const EncoderConfig& cfg, std::size_t vocab_size, Modality prompt,
                             std::int64_t as_of_min) {
  require(as_of_min >= 0, "embed_patient: as_of before birth for patient " + p.patient_id);
  require(valid_prompt(prompt), "embed_patient: prompt modality must be Diagnosis, NoteText or Image");
  const auto end = static_cast<std::size_t>(
      std::upper_bound(p.events.begin(), p.events.end(), as_of_min, [](std::int64_t t, const EventRecord& e) { return t < e.time_min; }) -
      p.events.begin());
  std::size_t begin = end > kMaxHistoryEvents ? end - kMaxHistoryEvents : 0;
  if (end - begin > static_cast<std::size_t>(cfg.max_seq)) begin = end - static_cast<std::size_t>(cfg.max_seq);
  auto in = build_input(p, begin, end, cfg, vocab_size, as_of_min);
  SeqEvent q;
  q.modality = prompt;
  q.tau = end > begin ? time_fraction(p.events[end - 1].time_min) : time_fraction(as_of_min);
  q.masked = true;
  q.is_prompt = true;
  in.events.push_back(std::move(q));
  return in;
}

inline DenseVec embed_patient(const PatientRecord& p, const Params& P, const EncoderConfig& cfg, Modality prompt,
                              std::int64_t as_of_min) {
  const auto in = prompt_input(p, cfg, static_cast<std::size_t>(P.W_emb.rows()), prompt, as_of_min);
  ForwardCache c;
  const Mat& H = forward(P, cfg, in, c);
  const RowVec h = H.row(H.rows() - 1);
  return DenseVec(h.data(), h.data() + h.size());
}

// Embeds each patient at its own as-of time.
inline std::vector<DenseVec> embed_patients(const std::vector<const PatientRecord*>& patients, const std::vector<std::int64_t>& as_of,
                                            const Params& P, const EncoderConfig& cfg, Modality prompt, std::size_t threads = 1) {
  require(patients.size() == as_of.size(), "embed_patients: one as-of time per patient required");
  std::vector<DenseVec> out(patients.size());
  parallel_for(patients.size(), threads, [&](std::size_t i) { out[i] = embed_patient(*patients[i], P, cfg, prompt, as_of[i]); });
  return out;
}

}  // namespace chronoscope::enc
