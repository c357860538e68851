#pragma once

// Masked multimodal temporal transformer: input assembly, pre-LN encoder blocks, reconstruction losses,
// and the matching reverse-mode gradients.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "chronoscope/core/types.hpp"
#include "chronoscope/core/vocabulary.hpp"
#include "chronoscope/encoder/params.hpp"

namespace chronoscope::enc {

inline constexpr int kPrefix = 4;  // CLS, sex, ethnicity, age

struct SeqEvent {
  double tau = 0.0;  // event time as a fraction of 100 years
  Modality modality = Modality::Diagnosis;
  int token = -1;    // structured events
  DenseVec dense;    // unstructured events
  bool masked = false;
  bool is_prompt = false;  // appended query position; never a reconstruction target
};

struct SeqInput {
  int sex = 2;
  DenseVec eth;
  double age = 0.0;  // age at the last event, as a fraction of 100 years
  std::vector<SeqEvent> events;

  std::size_t length() const { return kPrefix + events.size(); }
};

inline int sex_index(Sex s) {
  switch (s) {
    case Sex::Male:
      return 0;
    case Sex::Female:
      return 1;
    default:
      return 2;
  }
}

inline double time_fraction(std::int64_t minutes) { return static_cast<double>(minutes) / kMinutesPer100Years; }

// Restricted decoding vocabularies as dense index lists.
struct DecodeGroups {
  std::vector<std::vector<int>> members;
  std::vector<int> group_of;

  static DecodeGroups from(const Vocabulary& v) {
    DecodeGroups g;
    g.members.resize(v.num_groups());
    g.group_of.resize(v.size());
    for (std::size_t i = 0; i < v.num_groups(); ++i) {
      for (auto id : v.group(i)) g.members[i].push_back(static_cast<int>(id.value));
    }
    for (std::size_t t = 0; t < v.size(); ++t) g.group_of[t] = static_cast<int>(v.group_of(TokenId{static_cast<std::uint32_t>(t)}));
    return g;
  }
};

// Canonical order for events sharing a timestamp, so that encoder outputs do not depend on ingestion
// order of simultaneous events.
inline bool canonical_less(const SeqEvent& a, const SeqEvent& b) {
  if (a.tau != b.tau) return a.tau < b.tau;
  if (a.modality != b.modality) return a.modality < b.modality;
  if (a.token != b.token) return a.token < b.token;
  return std::lexicographical_compare(a.dense.begin(), a.dense.end(), b.dense.begin(), b.dense.end());
}

// Builds encoder input for events [begin, end) of a tokenized record. The age token uses the last
// retained event (or `age_min` when no events are retained).
inline SeqInput build_input(const PatientRecord& p, std::size_t begin, std::size_t end, const EncoderConfig& cfg,
                            std::size_t vocab_size, std::int64_t age_min) {
  SeqInput in;
  in.sex = sex_index(p.demographics.sex);
  require(static_cast<int>(p.demographics.ethnicity_vec.size()) == cfg.B,
          "patient " + p.patient_id + ": ethnicity embedding has dim " + std::to_string(p.demographics.ethnicity_vec.size()) +
              ", encoder expects " + std::to_string(cfg.B));
  in.eth = p.demographics.ethnicity_vec;
  in.age = time_fraction(end > begin ? p.events[end - 1].time_min : age_min);
  in.events.reserve(end - begin + 1);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& e = p.events[i];
    SeqEvent s;
    s.tau = time_fraction(e.time_min);
    s.modality = e.modality;
    if (is_unstructured(e.modality)) {
      s.dense = e.dense();
      require(static_cast<int>(s.dense.size()) == cfg.d_k[dense_slot(e.modality)],
              "patient " + p.patient_id + ": dense payload dimension mismatch");
    } else {
      require(e.has_token(), "patient " + p.patient_id + ": structured event '" + e.code + "' is not tokenized");
      require(e.token().value < vocab_size, "patient " + p.patient_id + ": unknown token id " + std::to_string(e.token().value));
      s.token = static_cast<int>(e.token().value);
    }
    in.events.push_back(std::move(s));
  }
  std::stable_sort(in.events.begin(), in.events.end(), canonical_less);
  return in;
}

// Masks each non-prefix, non-prompt position independently with probability rho.
template <class Rng>
void apply_masking(SeqInput& in, Rng& rng, double rho) {
  require(rho >= 0.0 && rho < 1.0, "mask ratio must lie in [0, 1)");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& e : in.events) {
    if (!e.is_prompt) e.masked = u(rng) < rho;
  }
}

// ---------------------------------------------------------------- primitives

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
}

inline Mat linear_fwd(const Mat& x, const Linear& l) {
  Mat y = x * l.W;
  y.rowwise() += l.b.row(0);
  return y;
}

// Accumulates parameter gradients (if g) and returns dx.
inline Mat linear_bwd(const Mat& x, const Linear& l, const Mat& dy, Linear* g) {
  if (g) {
    g->W.noalias() += x.transpose() * dy;
    g->b += dy.colwise().sum();
  }
  return dy * l.W.transpose();
}

inline Mat gelu_fwd(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

inline Mat layer_norm_fwd(const Mat& x, const Mat& g, const Mat& b, double eps, LnCache& c) {
  const auto n = x.rows();
  const auto E = static_cast<double>(x.cols());
  c.xhat.resize(n, x.cols());
  c.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / E;
    auto d = (x.row(i).array() - mu).eval();
    const double var = d.square().sum() / E;
    const double r = 1.0 / std::sqrt(var + eps);
    c.xhat.row(i) = d * r;
    c.rstd(i) = r;
  }
  Mat y = (c.xhat.array().rowwise() * g.row(0).array()).matrix();
  y.rowwise() += b.row(0);
  return y;
}

inline Mat layer_norm_bwd(const LnCache& c, const Mat& g, const Mat& dy, Mat* dg, Mat* db) {
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  const Mat dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
  const auto E = static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / E;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / E;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------- forward

struct BlockCache {
  Mat x_in;
  LnCache ln1;
  Mat a, q, k, v;
  std::vector<Mat> P;  // attention probabilities per head
  Mat att;
  Mat x_mid;
  LnCache ln2;
  Mat m, f_pre, f_act;
};

struct ForwardCache {
  Mat eth_in, eth_pre, age_in, age_pre, time_in, time_pre;
  std::vector<Mat> dense_in;  // per event (empty for structured)
  Mat Z;
  std::vector<BlockCache> blocks;
  Mat x_final;
  LnCache lnf;
  Mat H;
};

// Input embeddings Z (L × E): prefix tokens, then content + time encoding per event.
inline const Mat& assemble(const Params& P, const EncoderConfig& cfg, const SeqInput& in, ForwardCache& c) {
  const int E = cfg.E;
  const auto n = static_cast<Eigen::Index>(in.events.size());
  c.Z.resize(kPrefix + n, E);
  c.Z.row(0) = P.cls.row(0);
  c.Z.row(1) = P.W_sex.row(in.sex);
  c.eth_in = Eigen::Map<const RowVec>(in.eth.data(), static_cast<Eigen::Index>(in.eth.size()));
  c.eth_pre = linear_fwd(c.eth_in, P.eth.l1);
  c.Z.row(2) = linear_fwd(gelu_fwd(c.eth_pre), P.eth.l2).row(0);
  c.age_in = Mat::Constant(1, 1, in.age);
  c.age_pre = linear_fwd(c.age_in, P.age.l1);
  c.Z.row(3) = linear_fwd(gelu_fwd(c.age_pre), P.age.l2).row(0);
  if (n == 0) return c.Z;
  c.time_in.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) c.time_in(i, 0) = in.events[static_cast<std::size_t>(i)].tau;
  c.time_pre = linear_fwd(c.time_in, P.time.l1);
  c.Z.bottomRows(n) = linear_fwd(gelu_fwd(c.time_pre), P.time.l2);
  c.dense_in.assign(static_cast<std::size_t>(n), Mat());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = in.events[static_cast<std::size_t>(i)];
    auto row = c.Z.row(kPrefix + i);
    if (e.masked) {
      row += P.mask.row(static_cast<Eigen::Index>(index_of(e.modality)));
    } else if (is_unstructured(e.modality)) {
      auto& x = c.dense_in[static_cast<std::size_t>(i)];
      x = Eigen::Map<const RowVec>(e.dense.data(), static_cast<Eigen::Index>(e.dense.size()));
      row += linear_fwd(x, P.proj[dense_slot(e.modality)]).row(0);
    } else {
      row += P.W_emb.row(e.token);
    }
  }
  return c.Z;
}

inline Mat block_fwd(const Block& b, const EncoderConfig& cfg, const Mat& x, BlockCache& c) {
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto L = x.rows();
  c.x_in = x;
  c.a = layer_norm_fwd(x, b.ln1_g, b.ln1_b, cfg.ln_eps, c.ln1);
  c.q = linear_fwd(c.a, b.q);
  c.k = linear_fwd(c.a, b.k);
  c.v = linear_fwd(c.a, b.v);
  c.att.resize(L, cfg.E);
  c.P.resize(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    Mat S = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < L; ++i) {
      const double mx = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - mx).exp().matrix();
      S.row(i) /= S.row(i).sum();
    }
    c.att.middleCols(h * dh, dh).noalias() = S * c.v.middleCols(h * dh, dh);
    c.P[static_cast<std::size_t>(h)] = std::move(S);
  }
  c.x_mid = x + linear_fwd(c.att, b.o);
  c.m = layer_norm_fwd(c.x_mid, b.ln2_g, b.ln2_b, cfg.ln_eps, c.ln2);
  c.f_pre = linear_fwd(c.m, b.fc1);
  c.f_act = gelu_fwd(c.f_pre);
  return c.x_mid + linear_fwd(c.f_act, b.fc2);
}

// Contextual states H (L × E) from input embeddings Z.
inline const Mat& encode(const Params& P, const EncoderConfig& cfg, const Mat& Z, ForwardCache& c) {
  c.blocks.resize(P.blocks.size());
  Mat x = Z;
  for (std::size_t l = 0; l < P.blocks.size(); ++l) x = block_fwd(P.blocks[l], cfg, x, c.blocks[l]);
  c.x_final = std::move(x);
  c.H = layer_norm_fwd(c.x_final, P.lnf_g, P.lnf_b, cfg.ln_eps, c.lnf);
  return c.H;
}

inline const Mat& forward(const Params& P, const EncoderConfig& cfg, const SeqInput& in, ForwardCache& c) {
  assemble(P, cfg, in, c);
  return encode(P, cfg, c.Z, c);
}

// ---------------------------------------------------------------- backward

inline Mat block_bwd(const Block& b, const EncoderConfig& cfg, const BlockCache& c, const Mat& dx_out, Block* g) {
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  // MLP branch.
  const Mat df_act = linear_bwd(c.f_act, b.fc2, dx_out, g ? &g->fc2 : nullptr);
  const Mat df_pre = (df_act.array() * c.f_pre.unaryExpr([](double v) { return gelu_grad(v); }).array()).matrix();
  const Mat dm = linear_bwd(c.m, b.fc1, df_pre, g ? &g->fc1 : nullptr);
  Mat dx_mid = dx_out + layer_norm_bwd(c.ln2, b.ln2_g, dm, g ? &g->ln2_g : nullptr, g ? &g->ln2_b : nullptr);
  // Attention branch.
  const Mat datt = linear_bwd(c.att, b.o, dx_mid, g ? &g->o : nullptr);
  Mat dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < cfg.n_heads; ++h) {
    const Mat& Ph = c.P[static_cast<std::size_t>(h)];
    const auto dO = datt.middleCols(h * dh, dh);
    const Mat dP = dO * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = Ph.transpose() * dO;
    const Eigen::VectorXd rs = (dP.array() * Ph.array()).rowwise().sum();
    const Mat dS = (Ph.array() * (dP.array().colwise() - rs.array())).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = dS * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = dS.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat da = linear_bwd(c.a, b.q, dq, g ? &g->q : nullptr);
  da += linear_bwd(c.a, b.k, dk, g ? &g->k : nullptr);
  da += linear_bwd(c.a, b.v, dv, g ? &g->v : nullptr);
  return dx_mid + layer_norm_bwd(c.ln1, b.ln1_g, da, g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
}

// Back-propagates dH to dZ, accumulating encoder-block gradients when g is given.
inline Mat encode_bwd(const Params& P, const EncoderConfig& cfg, const ForwardCache& c, const Mat& dH, Params* g) {
  Mat dx = layer_norm_bwd(c.lnf, P.lnf_g, dH, g ? &g->lnf_g : nullptr, g ? &g->lnf_b : nullptr);
  for (std::size_t l = P.blocks.size(); l-- > 0;) {
    dx = block_bwd(P.blocks[l], cfg, c.blocks[l], dx, g ? &g->blocks[l] : nullptr);
  }
  return dx;
}

inline void mlp2_bwd(const Mlp2& m, const Mat& in, const Mat& pre, const Mat& dout, Mlp2& g) {
  const Mat act = gelu_fwd(pre);
  const Mat dact = linear_bwd(act, m.l2, dout, &g.l2);
  const Mat dpre = (dact.array() * pre.unaryExpr([](double v) { return gelu_grad(v); }).array()).matrix();
  linear_bwd(in, m.l1, dpre, &g.l1);
}

inline void assemble_bwd(const Params& P, const SeqInput& in, const ForwardCache& c, const Mat& dZ, Params& g) {
  g.cls.row(0) += dZ.row(0);
  g.W_sex.row(in.sex) += dZ.row(1);
  mlp2_bwd(P.eth, c.eth_in, c.eth_pre, dZ.row(2), g.eth);
  mlp2_bwd(P.age, c.age_in, c.age_pre, dZ.row(3), g.age);
  const auto n = static_cast<Eigen::Index>(in.events.size());
  if (n == 0) return;
  mlp2_bwd(P.time, c.time_in, c.time_pre, dZ.bottomRows(n), g.time);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = in.events[static_cast<std::size_t>(i)];
    const auto drow = dZ.row(kPrefix + i);
    if (e.masked) {
      g.mask.row(static_cast<Eigen::Index>(index_of(e.modality))) += drow;
    } else if (is_unstructured(e.modality)) {
      const auto slot = dense_slot(e.modality);
      linear_bwd(c.dense_in[static_cast<std::size_t>(i)], P.proj[slot], drow, &g.proj[slot]);
    } else {
      g.W_emb.row(e.token) += drow;
    }
  }
}

// ---------------------------------------------------------------- reconstruction losses

struct SeqLoss {
  double struct_sum = 0.0;
  std::size_t n_struct = 0;
  double unstruct_sum = 0.0;
  std::size_t n_unstruct = 0;

  SeqLoss& operator+=(const SeqLoss& o) {
    struct_sum += o.struct_sum;
    n_struct += o.n_struct;
    unstruct_sum += o.unstruct_sum;
    n_unstruct += o.n_unstruct;
    return *this;
  }
  // Empty families contribute 0 instead of NaN.
  double struct_mean() const { return n_struct ? struct_sum / static_cast<double>(n_struct) : 0.0; }
  double unstruct_mean() const { return n_unstruct ? unstruct_sum / static_cast<double>(n_unstruct) : 0.0; }
  double total() const { return struct_mean() + unstruct_mean(); }
};

struct MaskCounts {
  std::size_t n_struct = 0;
  std::size_t n_unstruct = 0;
};

inline MaskCounts count_masked(const SeqInput& in) {
  MaskCounts m;
  for (const auto& e : in.events) {
    if (!e.masked || e.is_prompt) continue;
    if (is_unstructured(e.modality)) {
      ++m.n_unstruct;
    } else {
      ++m.n_struct;
    }
  }
  return m;
}

// Cross-entropy of the true token within its restricted vocabulary. Accumulates the weighted
// gradient into dh and the tied embedding rows when requested.
inline double structured_ce(const Params& P, const DecodeGroups& groups, const RowVec& h, int token, double weight,
                            RowVec* dh, Params* g) {
  const auto& members = groups.members[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(token)])];
  Eigen::VectorXd logits(static_cast<Eigen::Index>(members.size()));
  double true_logit = 0.0;
  for (std::size_t j = 0; j < members.size(); ++j) {
    logits(static_cast<Eigen::Index>(j)) = P.W_emb.row(members[j]).dot(h);
    if (members[j] == token) true_logit = logits(static_cast<Eigen::Index>(j));
  }
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  if (dh) {
    for (std::size_t j = 0; j < members.size(); ++j) {
      const double p = std::exp(logits(static_cast<Eigen::Index>(j)) - lse);
      const double coef = weight * (p - (members[j] == token ? 1.0 : 0.0));
      *dh += coef * P.W_emb.row(members[j]);
      if (g) g->W_emb.row(members[j]) += coef * h;
    }
  }
  return lse - true_logit;
}

// (1/d)‖x̂−x‖² + 1 − cos(x̂, x); the gradient is taken with respect to x̂.
inline double dense_recon_loss(const RowVec& xhat, const RowVec& x, RowVec* dxhat) {
  const double nx = x.norm();
  if (nx == 0.0) fail(ErrorKind::Validation, "DegenerateTarget: zero-norm unstructured target");
  const double d = static_cast<double>(x.size());
  const RowVec diff = xhat - x;
  const double nh = std::max(xhat.norm(), 1e-300);
  const double cos = xhat.dot(x) / (nh * nx);
  if (dxhat) *dxhat = (2.0 / d) * diff - (x / (nh * nx) - cos * xhat / (nh * nh));
  return diff.squaredNorm() / d + 1.0 - cos;
}

// Reconstruction losses over the masked positions of one sequence. With dH, fills the weighted
// gradient of w_struct·Σ CE + w_unstruct·Σ dense loss with respect to H and the head/tied parameters.
inline SeqLoss reconstruction_loss(const Params& P, const DecodeGroups& groups, const SeqInput& in, const Mat& H,
                                   double w_struct, double w_unstruct, Mat* dH, Params* g) {
  SeqLoss out;
  if (dH) dH->setZero(H.rows(), H.cols());
  for (std::size_t i = 0; i < in.events.size(); ++i) {
    const auto& e = in.events[i];
    if (!e.masked || e.is_prompt) continue;
    const auto r = static_cast<Eigen::Index>(kPrefix + i);
    const RowVec h = H.row(r);
    if (is_unstructured(e.modality)) {
      const auto slot = dense_slot(e.modality);
      const RowVec xhat = linear_fwd(h, P.head[slot]);
      const RowVec x = Eigen::Map<const RowVec>(e.dense.data(), static_cast<Eigen::Index>(e.dense.size()));
      RowVec dxhat;
      out.unstruct_sum += dense_recon_loss(xhat, x, dH ? &dxhat : nullptr);
      ++out.n_unstruct;
      if (dH) {
        const Mat gx = w_unstruct * dxhat;
        dH->row(r) += linear_bwd(h, P.head[slot], gx, g ? &g->head[slot] : nullptr).row(0);
      }
    } else {
      RowVec dh = RowVec::Zero(H.cols());
      out.struct_sum += structured_ce(P, groups, h, e.token, w_struct, dH ? &dh : nullptr, g);
      ++out.n_struct;
      if (dH) dH->row(r) += dh;
    }
  }
  return out;
}

// Forward + backward for one masked sequence. Gradients (if g) are scaled by the given weights, which
// carry the batch-global 1/|M_struct| and 1/|M_unstruct| normalizers.
inline SeqLoss sequence_step(const Params& P, const EncoderConfig& cfg, const DecodeGroups& groups, const SeqInput& in,
                             double w_struct, double w_unstruct, Params* g) {
  ForwardCache c;
  const Mat& H = forward(P, cfg, in, c);
  if (!g) return reconstruction_loss(P, groups, in, H, 0.0, 0.0, nullptr, nullptr);
  Mat dH;
  const auto loss = reconstruction_loss(P, groups, in, H, w_struct, w_unstruct, &dH, g);
  const Mat dZ = encode_bwd(P, cfg, c, dH, g);
  assemble_bwd(P, in, c, dZ, *g);
  return loss;
}

}  // namespace chronoscope::enc
