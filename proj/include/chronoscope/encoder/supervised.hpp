#pragma once

// Supervised baseline: the same encoder trained end-to-end with a discrete-time hazard head on CLS.

#include <cmath>
#include <limits>
#include <vector>

#include "chronoscope/encoder/pretrain.hpp"

namespace chronoscope::enc {

// Bin edges in days, ending with +∞.
inline std::vector<double> make_time_bins(int tau_days) {
  require(tau_days > 0, "make_time_bins: tau must be positive");
  const double inf = std::numeric_limits<double>::infinity();
  if (tau_days > 365) {
    std::vector<double> e{0.0};
    for (int i = 1; i <= 10; ++i) e.push_back(365.0 * i);
    e.push_back(inf);
    return e;
  }
  return {0, 7, 15, 30, 90, 180, 365, inf};
}

// 1-based bin j with edges[j−1] ≤ d < edges[j].
inline int observed_bin(const std::vector<double>& edges, double duration_days) {
  require(duration_days >= 0, "observed_bin: negative duration");
  const auto it = std::upper_bound(edges.begin(), edges.end(), duration_days);
  return static_cast<int>(it - edges.begin());
}

// NLL of a discrete-time survival observation. Hazards h_1..h_J in (0,1); y is 1-based.
inline double discrete_hazard_loss(const std::vector<double>& h, int y, bool event) {
  require(y >= 1 && y <= static_cast<int>(h.size()), "discrete_hazard_loss: bin index out of range");
  for (double v : h) require(v > 0.0 && v < 1.0, "discrete_hazard_loss: hazards must lie in (0,1)");
  double loss = 0.0;
  const int survived = event ? y - 1 : y;
  for (int k = 0; k < survived; ++k) loss -= std::log1p(-h[static_cast<std::size_t>(k)]);
  if (event) loss -= std::log(h[static_cast<std::size_t>(y - 1)]);
  return loss;
}

// Gradient of discrete_hazard_loss with respect to logits a_j, where h_j = sigmoid(a_j).
inline std::vector<double> discrete_hazard_logit_grad(const std::vector<double>& h, int y, bool event) {
  std::vector<double> g(h.size(), 0.0);
  const int survived = event ? y - 1 : y;
  for (int k = 0; k < survived; ++k) g[static_cast<std::size_t>(k)] = h[static_cast<std::size_t>(k)];
  if (event) g[static_cast<std::size_t>(y - 1)] = h[static_cast<std::size_t>(y - 1)] - 1.0;
  return g;
}

inline double sigmoid(double a) { return a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a)); }

struct HazardHead {
  Linear out;  // E → J
};

struct SupervisedModel {
  Params encoder;
  HazardHead head;
  std::vector<double> edges;
};

struct SupervisedExample {
  const PatientRecord* patient = nullptr;
  std::int64_t snapshot_min = 0;
  double duration_days = 0.0;
  bool event = false;
};

struct SupervisedConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int max_epochs = 40;
  int patience = 5;
  std::uint64_t seed = 0;
};

namespace detail {

inline SeqInput supervised_input(const SupervisedExample& ex, const EncoderConfig& cfg, std::size_t V) {
  const auto& p = *ex.patient;
  const auto end = static_cast<std::size_t>(
      std::upper_bound(p.events.begin(), p.events.end(), ex.snapshot_min,
                       [](std::int64_t t, const EventRecord& e) { return t < e.time_min; }) -
      p.events.begin());
  const std::size_t begin = end > static_cast<std::size_t>(cfg.max_seq) ? end - static_cast<std::size_t>(cfg.max_seq) : 0;
  return build_input(p, begin, end, cfg, V, ex.snapshot_min);
}

inline std::vector<double> hazards_from(const RowVec& logits) {
  std::vector<double> h(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    h[static_cast<std::size_t>(j)] = std::clamp(sigmoid(logits(j)), 1e-12, 1.0 - 1e-12);
  }
  return h;
}

}  // namespace detail

inline std::vector<double> predict_hazards(const SupervisedModel& m, const EncoderConfig& cfg, const SupervisedExample& ex) {
  auto in = detail::supervised_input(ex, cfg, static_cast<std::size_t>(m.encoder.W_emb.rows()));
  ForwardCache c;
  const Mat& H = forward(m.encoder, cfg, in, c);
  return detail::hazards_from(linear_fwd(H.row(0), m.head.out));
}

// Cumulative incidence by tau: 1 − Π_{bins ending at or before tau} (1 − h_j).
inline double predicted_risk(const std::vector<double>& hazards, const std::vector<double>& edges, double tau_days) {
  double s = 1.0;
  for (std::size_t j = 0; j < hazards.size(); ++j) {
    if (edges[j] >= tau_days) break;
    s *= 1.0 - hazards[j];
  }
  return 1.0 - s;
}

inline double supervised_loss(const SupervisedModel& m, const EncoderConfig& cfg, const std::vector<SupervisedExample>& xs) {
  double total = 0.0;
  for (const auto& ex : xs) {
    const auto h = predict_hazards(m, cfg, ex);
    total += discrete_hazard_loss(h, observed_bin(m.edges, ex.duration_days), ex.event);
  }
  return xs.empty() ? 0.0 : total / static_cast<double>(xs.size());
}

// Trains encoder + head from scratch with AdamW and early stopping on validation NLL.
inline SupervisedModel train_supervised(const std::vector<SupervisedExample>& train, const std::vector<SupervisedExample>& val,
                                        const EncoderConfig& cfg, std::size_t vocab_size, int tau_days,
                                        const SupervisedConfig& sc = {}) {
  require(!train.empty(), "train_supervised: no training examples");
  SupervisedModel m;
  m.encoder = init_params(cfg, vocab_size);
  m.edges = make_time_bins(tau_days);
  const int J = static_cast<int>(m.edges.size()) - 1;
  std::mt19937_64 rng(hash_combine(sc.seed, 0x5E9ULL));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.E)));
  m.head.out.W.resize(cfg.E, J);
  for (Eigen::Index i = 0; i < m.head.out.W.size(); ++i) m.head.out.W.data()[i] = normal(rng);
  m.head.out.b = Mat::Constant(1, J, -3.0);

  EncoderConfig opt_cfg = cfg;
  AdamW opt(m.encoder, opt_cfg);
  Mat hm_W = Mat::Zero(cfg.E, J), hv_W = Mat::Zero(cfg.E, J), hm_b = Mat::Zero(1, J), hv_b = Mat::Zero(1, J);
  int head_t = 0;
  const auto V = vocab_size;

  SupervisedModel best = m;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < sc.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sc.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(sc.batch_size));
      Params g = m.encoder.zeros_like();
      Linear gh{Mat::Zero(cfg.E, J), Mat::Zero(1, J)};
      const double w = 1.0 / static_cast<double>(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const auto& ex = train[order[b]];
        const auto in = detail::supervised_input(ex, cfg, V);
        ForwardCache c;
        const Mat& H = forward(m.encoder, cfg, in, c);
        const RowVec h0 = H.row(0);
        const auto hz = detail::hazards_from(linear_fwd(h0, m.head.out));
        const auto ga = discrete_hazard_logit_grad(hz, observed_bin(m.edges, ex.duration_days), ex.event);
        Mat dlogit(1, J);
        for (int j = 0; j < J; ++j) dlogit(0, j) = w * ga[static_cast<std::size_t>(j)];
        Mat dH = Mat::Zero(H.rows(), H.cols());
        dH.row(0) = linear_bwd(h0, m.head.out, dlogit, &gh).row(0);
        const Mat dZ = encode_bwd(m.encoder, cfg, c, dH, &g);
        assemble_bwd(m.encoder, in, c, dZ, g);
      }
      clip_grad_norm(g, cfg.grad_clip);
      opt.step(m.encoder, g, sc.lr, sc.lr);
      ++head_t;
      const double bc1 = 1.0 - std::pow(cfg.beta1, head_t), bc2 = 1.0 - std::pow(cfg.beta2, head_t);
      auto adam = [&](Mat& p, const Mat& gr, Mat& mm, Mat& vv) {
        mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * gr;
        vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * gr.cwiseAbs2();
        p.array() -= sc.lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + cfg.adam_eps);
      };
      adam(m.head.out.W, gh.W, hm_W, hv_W);
      adam(m.head.out.b, gh.b, hm_b, hv_b);
    }
    const double vl = supervised_loss(m, cfg, val.empty() ? train : val);
    if (!std::isfinite(vl)) fail(ErrorKind::Numeric, "train_supervised: non-finite validation loss in epoch " + std::to_string(epoch));
    if (vl < best_val) {
      best_val = vl;
      best = m;
      since_best = 0;
    } else if (++since_best >= sc.patience) {
      break;
    }
  }
  return best;
}

}  // namespace chronoscope::enc
