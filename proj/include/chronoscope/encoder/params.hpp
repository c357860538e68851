#pragma once

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include "chronoscope/encoder/config.hpp"

namespace chronoscope::enc {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Base: encoder blocks, embeddings, time encoding, mask vectors. Heads: projectors and prediction heads.
enum class ParamGroup { Base, Heads };

struct Linear {
  Mat W;  // in × out
  Mat b;  // 1 × out
};

struct Mlp2 {
  Linear l1, l2;
};

struct Block {
  Mat ln1_g, ln1_b;
  Linear q, k, v, o;
  Mat ln2_g, ln2_b;
  Linear fc1, fc2;
};

struct TensorRef {
  std::string name;
  Mat* value;
  ParamGroup group;
  bool decay;  // matrix-shaped weights only
};

struct Params {
  Mat W_emb;  // V × E, shared by input embedding and structured decoder
  Mat W_sex;  // 3 × E
  Mat cls;    // 1 × E
  Mat mask;   // one mask vector per modality, kNumModalities × E
  Mlp2 eth, age, time;
  std::array<Linear, 3> proj;  // d_k → E
  std::vector<Block> blocks;
  Mat lnf_g, lnf_b;
  std::array<Linear, 3> head;  // E → d_k

  std::vector<TensorRef> tensors() {
    std::vector<TensorRef> out;
    auto add = [&](std::string name, Mat& m, ParamGroup g, bool decay) { out.push_back({std::move(name), &m, g, decay}); };
    auto add_linear = [&](const std::string& name, Linear& l, ParamGroup g) {
      add(name + ".W", l.W, g, true);
      add(name + ".b", l.b, g, false);
    };
    add("W_emb", W_emb, ParamGroup::Base, true);
    add("W_sex", W_sex, ParamGroup::Base, true);
    add("cls", cls, ParamGroup::Base, false);
    add("mask", mask, ParamGroup::Base, false);
    add_linear("eth.l1", eth.l1, ParamGroup::Heads);
    add_linear("eth.l2", eth.l2, ParamGroup::Heads);
    add_linear("age.l1", age.l1, ParamGroup::Heads);
    add_linear("age.l2", age.l2, ParamGroup::Heads);
    add_linear("time.l1", time.l1, ParamGroup::Base);
    add_linear("time.l2", time.l2, ParamGroup::Base);
    for (std::size_t k = 0; k < proj.size(); ++k) add_linear("proj" + std::to_string(k), proj[k], ParamGroup::Heads);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const auto p = "block" + std::to_string(i) + ".";
      add(p + "ln1.g", b.ln1_g, ParamGroup::Base, false);
      add(p + "ln1.b", b.ln1_b, ParamGroup::Base, false);
      add_linear(p + "q", b.q, ParamGroup::Base);
      add_linear(p + "k", b.k, ParamGroup::Base);
      add_linear(p + "v", b.v, ParamGroup::Base);
      add_linear(p + "o", b.o, ParamGroup::Base);
      add(p + "ln2.g", b.ln2_g, ParamGroup::Base, false);
      add(p + "ln2.b", b.ln2_b, ParamGroup::Base, false);
      add_linear(p + "fc1", b.fc1, ParamGroup::Base);
      add_linear(p + "fc2", b.fc2, ParamGroup::Base);
    }
    add("lnf.g", lnf_g, ParamGroup::Base, false);
    add("lnf.b", lnf_b, ParamGroup::Base, false);
    for (std::size_t k = 0; k < head.size(); ++k) add_linear("head" + std::to_string(k), head[k], ParamGroup::Heads);
    return out;
  }

  std::size_t num_values() {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += static_cast<std::size_t>(t.value->size());
    return n;
  }

  // Same shapes, all zeros.
  Params zeros_like() const {
    Params z = *this;
    for (auto& t : z.tensors()) t.value->setZero();
    return z;
  }

  void set_zero() {
    for (auto& t : tensors()) t.value->setZero();
  }

  bool all_finite() {
    for (auto& t : tensors()) {
      if (!t.value->allFinite()) return false;
    }
    return true;
  }
};

inline void add_into(Params& dst, Params& src, double scale = 1.0) {
  auto a = dst.tensors();
  auto b = src.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) *a[i].value += scale * *b[i].value;
}

inline Params init_params(const EncoderConfig& cfg, std::size_t vocab_size) {
  cfg.validate();
  std::mt19937_64 rng(hash_combine(cfg.seed, 0x1A17ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  const int E = cfg.E;
  auto randn = [&](int r, int c, double stdev) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stdev * normal(rng);
    return m;
  };
  auto linear = [&](int in, int out, double scale = 1.0) {
    return Linear{randn(in, out, scale / std::sqrt(static_cast<double>(in))), Mat::Zero(1, out)};
  };
  Params p;
  p.W_emb = randn(static_cast<int>(vocab_size), E, 0.02);
  p.W_sex = randn(3, E, 0.02);
  p.cls = randn(1, E, 0.02);
  p.mask = randn(static_cast<int>(kNumModalities), E, 0.02);
  p.eth = {linear(cfg.B, E), linear(E, E)};
  p.age = {linear(1, E), linear(E, E)};
  p.time = {linear(1, E), linear(E, E)};
  for (std::size_t k = 0; k < 3; ++k) p.proj[k] = linear(cfg.d_k[k], E);
  const double resid = 1.0 / std::sqrt(2.0 * std::max(1, cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    Block b;
    b.ln1_g = Mat::Ones(1, E);
    b.ln1_b = Mat::Zero(1, E);
    b.q = linear(E, E);
    b.k = linear(E, E);
    b.v = linear(E, E);
    b.o = linear(E, E, resid);
    b.ln2_g = Mat::Ones(1, E);
    b.ln2_b = Mat::Zero(1, E);
    b.fc1 = linear(E, cfg.mlp_width());
    b.fc2 = linear(cfg.mlp_width(), E, resid);
    p.blocks.push_back(std::move(b));
  }
  p.lnf_g = Mat::Ones(1, E);
  p.lnf_b = Mat::Zero(1, E);
  for (std::size_t k = 0; k < 3; ++k) p.head[k] = linear(E, cfg.d_k[k]);
  return p;
}

}  // namespace chronoscope::enc
