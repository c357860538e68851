#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "chronoscope/core/io.hpp"
#include "chronoscope/core/types.hpp"

namespace chronoscope::enc {

// Unstructured modalities in projector / head order.
inline constexpr std::array<Modality, 3> kDenseModalities = {Modality::NoteText, Modality::ReportText, Modality::Image};

inline std::size_t dense_slot(Modality m) {
  switch (m) {
    case Modality::NoteText:
      return 0;
    case Modality::ReportText:
      return 1;
    case Modality::Image:
      return 2;
    default:
      fail(ErrorKind::Validation, "modality " + std::string(to_string(m)) + " has no dense slot");
  }
}

struct EncoderConfig {
  int E = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq = 256;
  double mask_ratio = 0.3;
  std::array<int, 3> d_k = {16, 16, 16};  // NoteText, ReportText, Image
  int B = 8;                              // ethnicity embedding dimension
  double lr_base = 1e-3;
  double lr_heads = 3e-3;
  int warmup_iters = -1;  // negative: 10% of total_iters
  int total_iters = 3000;
  double weight_decay = 1e-5;
  double grad_clip = 1.0;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int val_every = 100;
  int val_patients = 256;
  double ln_eps = 1e-5;
  std::uint64_t seed = 0;

  int mlp_width() const { return 4 * E; }
  int head_dim() const { return E / n_heads; }
  int warmup() const { return warmup_iters >= 0 ? warmup_iters : static_cast<int>(std::lround(0.1 * total_iters)); }

  void validate() const {
    require(E > 0 && n_layers >= 0 && n_heads > 0, "encoder dimensions must be positive");
    require(E % n_heads == 0, "E must be divisible by n_heads");
    require(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask ratio must lie in [0, 1)");
    require(max_seq > 0 && batch_size > 0 && total_iters >= 0, "invalid training sizes");
    for (int d : d_k) require(d > 0, "unstructured dimensions must be positive");
    require(B > 0, "ethnicity dimension must be positive");
    require(warmup() <= total_iters, "warmup longer than training");
  }
};

// Cluster-scale settings; not used by the tests.
inline EncoderConfig paper_preset() {
  EncoderConfig c;
  c.E = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.max_seq = 1536;
  c.B = 768;
  c.lr_base = 2e-4;
  c.lr_heads = 6e-4;
  c.warmup_iters = 3000;
  c.total_iters = 30000;
  c.batch_size = 1024;
  c.val_every = 1000;
  return c;
}

inline json to_json(const EncoderConfig& c) {
  return {{"E", c.E},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"max_seq", c.max_seq},
          {"mask_ratio", c.mask_ratio},
          {"d_k", c.d_k},
          {"B", c.B},
          {"lr_base", c.lr_base},
          {"lr_heads", c.lr_heads},
          {"warmup_iters", c.warmup_iters},
          {"total_iters", c.total_iters},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"val_every", c.val_every},
          {"val_patients", c.val_patients},
          {"ln_eps", c.ln_eps},
          {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c = j.value("preset", std::string()) == "paper" ? paper_preset() : EncoderConfig{};
  c.E = j.value("E", c.E);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.d_k = j.value("d_k", c.d_k);
  c.B = j.value("B", c.B);
  c.lr_base = j.value("lr_base", c.lr_base);
  c.lr_heads = j.value("lr_heads", c.lr_heads);
  c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
  c.total_iters = j.value("total_iters", c.total_iters);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.val_every = j.value("val_every", c.val_every);
  c.val_patients = j.value("val_patients", c.val_patients);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

}  // namespace chronoscope::enc
