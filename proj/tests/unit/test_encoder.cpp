#include <gtest/gtest.h>

#include "chronoscope/encoder/checkpoint.hpp"
#include "chronoscope/encoder/supervised.hpp"
#include "chronoscope/synth/cohort.hpp"
#include "chronoscope/tokenizer/tokenizer.hpp"
#include "encoder_fixtures.hpp"

using namespace fixtures;

namespace {

PatientRecord tokenized_patient(std::vector<std::pair<std::int64_t, int>> events) {
  PatientRecord p;
  p.patient_id = "tp";
  p.demographics.sex = Sex::Male;
  p.demographics.ethnicity_vec = {0.1, 0.2, -0.3};
  for (auto [t, tok] : events) {
    const auto m = tok < 5 ? Modality::Diagnosis : tok < 7 ? Modality::Medication : Modality::Lab;
    p.events.push_back({t, m, "c", TokenId{static_cast<std::uint32_t>(tok)}});
  }
  p.demographics.age_at_last_event_min = p.events.empty() ? 0 : p.events.back().time_min;
  return p;
}

RowVec time_encoding(const Params& P, double tau) {
  Mat in = Mat::Constant(1, 1, tau);
  return linear_fwd(gelu_fwd(linear_fwd(in, P.time.l1)), P.time.l2);
}

}  // namespace

TEST(EmbedSequence, PrefixOnlyForEmptyRecord) {
  const auto cfg = tiny_config();
  auto P = init_params(cfg, 10);
  const auto p = tokenized_patient({});
  const auto in = build_input(p, 0, 0, cfg, 10, 0);
  ForwardCache c;
  EXPECT_EQ(assemble(P, cfg, in, c).rows(), 4);
}

TEST(EmbedSequence, AdditiveTimeEncoding) {
  const auto cfg = tiny_config();
  auto P = init_params(cfg, 10);
  jitter(P, 4);
  const auto p = tokenized_patient({{100000, 3}, {900000, 3}});
  const auto in = build_input(p, 0, 2, cfg, 10, 0);
  ForwardCache c;
  const Mat Z = assemble(P, cfg, in, c);
  const RowVec want = time_encoding(P, in.events[0].tau) - time_encoding(P, in.events[1].tau);
  EXPECT_LT((Z.row(4) - Z.row(5) - want).cwiseAbs().maxCoeff(), 1e-14);

  P.time.l1.W.setZero();
  P.time.l1.b.setZero();
  P.time.l2.W.setZero();
  P.time.l2.b.setZero();
  const Mat Z0 = assemble(P, cfg, in, c);
  EXPECT_EQ(RowVec(Z0.row(4)), RowVec(P.W_emb.row(3)));
}

TEST(EmbedSequence, UnknownTokenIsRejected) {
  const auto cfg = tiny_config();
  const auto p = tokenized_patient({{10, 12}});
  EXPECT_THROW(build_input(p, 0, 1, cfg, 10, 0), Error);
}

TEST(Masking, RatioAndEdgeCases) {
  SeqInput in;
  in.events.resize(10000);
  std::mt19937_64 rng(1);
  apply_masking(in, rng, 0.0);
  EXPECT_EQ(count_masked(in).n_struct, 0u);
  apply_masking(in, rng, 0.3);
  const double frac = static_cast<double>(count_masked(in).n_struct) / 10000.0;
  EXPECT_GE(frac, 0.28);
  EXPECT_LE(frac, 0.32);
  EXPECT_THROW(apply_masking(in, rng, 1.0), Error);

  const auto cfg = tiny_config();
  const auto vocab = tiny_vocab();
  auto P = init_params(cfg, vocab.size());
  auto seq = tiny_sequence();
  apply_masking(seq, rng, 0.999);
  const auto loss = sequence_step(P, cfg, DecodeGroups::from(vocab), seq, 1, 1, nullptr);
  EXPECT_TRUE(std::isfinite(loss.total()));
}

TEST(StructuredLoss, UniformLogitsGiveLogV) {
  const auto vocab = tiny_vocab();
  const auto groups = DecodeGroups::from(vocab);
  auto P = init_params(tiny_config(), vocab.size());
  const RowVec h = RowVec::Zero(8);
  EXPECT_NEAR(structured_ce(P, groups, h, 2, 1, nullptr, nullptr), std::log(5.0), 1e-15);
  EXPECT_NEAR(structured_ce(P, groups, h, 6, 1, nullptr, nullptr), std::log(2.0), 1e-15);
  EXPECT_NEAR(structured_ce(P, groups, h, 8, 1, nullptr, nullptr), std::log(3.0), 1e-15);
}

TEST(StructuredLoss, HandSetLogits) {
  const auto vocab = tiny_vocab();
  const auto groups = DecodeGroups::from(vocab);
  auto P = init_params(tiny_config(), vocab.size());
  P.W_emb.setZero();
  // h = e_0, so logits are the first column of the diagnosis rows.
  const std::array<double, 5> logits = {0.5, -1.0, 2.0, 0.0, 1.5};
  for (int i = 0; i < 5; ++i) P.W_emb(i, 0) = logits[i];
  RowVec h = RowVec::Zero(8);
  h(0) = 1.0;
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  EXPECT_NEAR(structured_ce(P, groups, h, 1, 1, nullptr, nullptr), -(logits[1] - std::log(z)), 1e-14);
  // A dominant true logit drives the loss to zero.
  P.W_emb(1, 0) = 800.0;
  EXPECT_NEAR(structured_ce(P, groups, h, 1, 1, nullptr, nullptr), 0.0, 1e-12);
}

TEST(StructuredLoss, RestrictedProbabilitiesSumToOne) {
  const auto vocab = tiny_vocab();
  const auto groups = DecodeGroups::from(vocab);
  auto P = init_params(tiny_config(), vocab.size());
  jitter(P, 8, 1.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    RowVec h(8);
    for (auto& v : h) v = n(rng);
    for (const auto& members : groups.members) {
      double total = 0.0;
      for (int v : members) total += std::exp(-structured_ce(P, groups, h, v, 1, nullptr, nullptr));
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(UnstructuredLoss, Examples) {
  RowVec x(3);
  x << 1.0, -2.0, 0.5;
  EXPECT_NEAR(dense_recon_loss(x, x, nullptr), 0.0, 1e-15);
  EXPECT_NEAR(dense_recon_loss(-x, x, nullptr), (4.0 * x.squaredNorm()) / 3.0 + 2.0, 1e-14);
  RowVec y(3);
  y << 0.3, 0.7, -1.9;
  // Direct arithmetic.
  const double mse = ((0.3 - 1.0) * (0.3 - 1.0) + (0.7 + 2.0) * (0.7 + 2.0) + (-1.9 - 0.5) * (-1.9 - 0.5)) / 3.0;
  const double dot = 0.3 * 1.0 + 0.7 * -2.0 + -1.9 * 0.5;
  const double cos = dot / (std::sqrt(0.09 + 0.49 + 3.61) * std::sqrt(1.0 + 4.0 + 0.25));
  EXPECT_NEAR(dense_recon_loss(y, x, nullptr), mse + 1.0 - cos, 1e-14);
  EXPECT_THROW(dense_recon_loss(y, RowVec::Zero(3), nullptr), Error);
}

TEST(WeightTying, RowMutationMovesInputAndLogit) {
  const auto cfg = tiny_config();
  const auto vocab = tiny_vocab();
  const auto groups = DecodeGroups::from(vocab);
  auto P = init_params(cfg, vocab.size());
  const auto p = tokenized_patient({{10, 3}});
  const auto in = build_input(p, 0, 1, cfg, 10, 0);
  ForwardCache c;
  const Mat z_before = assemble(P, cfg, in, c);
  RowVec h = RowVec::Ones(8);
  const double ce_before = structured_ce(P, groups, h, 3, 1, nullptr, nullptr);
  P.W_emb.row(3).array() += 0.5;
  const Mat z_after = assemble(P, cfg, in, c);
  EXPECT_NEAR((z_after.row(4) - z_before.row(4)).sum(), 0.5 * 8, 1e-12);
  EXPECT_NE(structured_ce(P, groups, h, 3, 1, nullptr, nullptr), ce_before);
}

TEST(EmbedPatient, PermutingSimultaneousEventsIsExact) {
  const auto cfg = tiny_config();
  auto P = init_params(cfg, 10);
  jitter(P, 5);
  auto a = tokenized_patient({{100, 1}, {200, 4}, {200, 6}, {200, 8}, {300, 2}});
  auto b = a;
  std::swap(b.events[1], b.events[3]);
  std::swap(b.events[2], b.events[3]);
  EXPECT_EQ(embed_patient(a, P, cfg, Modality::Diagnosis, 1000), embed_patient(b, P, cfg, Modality::Diagnosis, 1000));
}

TEST(EmbedPatient, PromptsTruncationAndErrors) {
  auto cfg = tiny_config();
  auto P = init_params(cfg, 10);
  jitter(P, 6);
  const auto p = tokenized_patient({{100, 1}, {200, 4}, {201, 6}});
  EXPECT_NE(embed_patient(p, P, cfg, Modality::Diagnosis, 500), embed_patient(p, P, cfg, Modality::NoteText, 500));
  const auto early = embed_patient(p, P, cfg, Modality::Image, 50);
  for (double v : early) EXPECT_TRUE(std::isfinite(v));
  // History at t excludes the event at t+1.
  auto trimmed = p;
  trimmed.events.pop_back();
  EXPECT_EQ(embed_patient(p, P, cfg, Modality::Diagnosis, 200), embed_patient(trimmed, P, cfg, Modality::Diagnosis, 200));
  EXPECT_NE(embed_patient(p, P, cfg, Modality::Diagnosis, 201), embed_patient(trimmed, P, cfg, Modality::Diagnosis, 201));
  EXPECT_THROW(embed_patient(p, P, cfg, Modality::Diagnosis, -1), Error);
  EXPECT_THROW(embed_patient(p, P, cfg, Modality::Lab, 10), Error);
  // Window: only the most recent max_seq events enter the forward pass.
  cfg.max_seq = 2;
  auto older = p;
  older.events.front().payload = TokenId{0};
  EXPECT_EQ(embed_patient(p, P, cfg, Modality::Diagnosis, 500), embed_patient(older, P, cfg, Modality::Diagnosis, 500));
}

TEST(Schedule, Endpoints) {
  EXPECT_DOUBLE_EQ(lr_at(0, 100, 1000, 1e-3), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(100, 100, 1000, 1e-3), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(50, 100, 1000, 1e-3), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(1000, 100, 1000, 1e-3), 0.0);
  EXPECT_NEAR(lr_at(550, 100, 1000, 1e-3), 5e-4, 1e-15);
}

namespace {

struct SmallCohort {
  std::vector<PatientRecord> train, val;
  tok::Tokenizer tk;
};

SmallCohort small_cohort(std::size_t n) {
  auto cfg = synth::standard_config(n, 21);
  cfg.ethnicity_dim = 3;
  auto g = synth::generate_cohort(cfg);
  SmallCohort s;
  std::vector<PatientRecord> tr, va;
  for (std::size_t i = 0; i < g.patients.size(); ++i) (i % 5 == 0 ? va : tr).push_back(std::move(g.patients[i]));
  s.tk = tok::fit_tokenizer(tr);
  s.train = tok::tokenize_cohort(tr, s.tk);
  s.val = tok::tokenize_cohort(va, s.tk);
  return s;
}

EncoderConfig small_config() {
  auto c = tiny_config();
  c.E = 16;
  c.d_k = {16, 16, 16};
  c.max_seq = 64;
  c.batch_size = 8;
  c.val_every = 10;
  c.val_patients = 40;
  return c;
}

}  // namespace

TEST(Pretrain, ZeroIterationsReturnsInitialParams) {
  const auto s = small_cohort(30);
  auto cfg = small_config();
  cfg.total_iters = 0;
  auto r = pretrain(s.train, s.val, cfg, s.tk.vocab);
  auto init = init_params(cfg, s.tk.vocab.size());
  auto a = r.params.tensors();
  auto b = init.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
}

TEST(Pretrain, ValidationLossDecreasesAndRunIsDeterministic) {
  const auto s = small_cohort(150);
  auto cfg = small_config();
  cfg.total_iters = 100;
  cfg.lr_base = 3e-3;
  cfg.lr_heads = 9e-3;
  const auto r1 = pretrain(s.train, s.val, cfg, s.tk.vocab, 1);
  ASSERT_GE(r1.val.size(), 10u);
  EXPECT_LT(r1.val.back().total(), r1.val.front().total());
  auto r2 = pretrain(s.train, s.val, cfg, s.tk.vocab, 3);
  auto a = const_cast<Params&>(r1.params).tensors();
  auto b = r2.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
}

TEST(Pretrain, DivergenceReportsIteration) {
  auto s = small_cohort(30);
  for (auto& p : s.train) {
    for (auto& e : p.events) {
      if (is_unstructured(e.modality)) std::get<DenseVec>(e.payload)[0] = std::nan("");
    }
  }
  auto cfg = small_config();
  cfg.total_iters = 5;
  cfg.mask_ratio = 0.9;
  try {
    pretrain(s.train, {}, cfg, s.tk.vocab);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripAndTamperDetection) {
  const auto cfg = tiny_config();
  Checkpoint ck{cfg, init_params(cfg, 10), tiny_vocab(), {{"note", "x"}}};
  jitter(ck.params, 2);
  const auto bytes = serialize_checkpoint(ck);
  auto back = deserialize_checkpoint(bytes);
  auto a = ck.params.tensors();
  auto b = back.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].value, *b[i].value);
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(to_json(back.cfg), to_json(cfg));
  auto bad = bytes;
  bad[bad.size() / 2] ^= 1;
  EXPECT_THROW(deserialize_checkpoint(bad), Error);
}

TEST(TimeBins, Edges) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(make_time_bins(90), (std::vector<double>{0, 7, 15, 30, 90, 180, 365, inf}));
  EXPECT_EQ(make_time_bins(365), (std::vector<double>{0, 7, 15, 30, 90, 180, 365, inf}));
  const auto y = make_time_bins(1095);
  ASSERT_EQ(y.size(), 12u);
  for (int i = 0; i <= 10; ++i) EXPECT_EQ(y[i], 365.0 * i);
  EXPECT_EQ(y.back(), inf);
  EXPECT_EQ(make_time_bins(366), y);
  EXPECT_THROW(make_time_bins(0), Error);
}

TEST(DiscreteHazard, LossExamplesAndGradient) {
  EXPECT_NEAR(discrete_hazard_loss({0.5, 0.3}, 1, true), std::log(2.0), 1e-15);
  EXPECT_NEAR(discrete_hazard_loss({0.1, 0.2}, 2, false), -std::log(0.9 * 0.8), 1e-15);
  EXPECT_NEAR(discrete_hazard_loss({0.1, 1.0 - 1e-15}, 2, true) + std::log(0.9), 0.0, 1e-12);
  EXPECT_THROW(discrete_hazard_loss({0.0, 0.5}, 1, true), Error);
  // Logit gradient against central differences.
  const std::vector<double> a = {-1.0, 0.3, 2.0};
  for (bool event : {true, false}) {
    for (int y = 1; y <= 3; ++y) {
      std::vector<double> h;
      for (double v : a) h.push_back(sigmoid(v));
      const auto g = discrete_hazard_logit_grad(h, y, event);
      for (std::size_t j = 0; j < a.size(); ++j) {
        auto f = [&](double d) {
          auto hh = h;
          hh[j] = sigmoid(a[j] + d);
          return discrete_hazard_loss(hh, y, event);
        };
        EXPECT_NEAR(g[j], (f(1e-6) - f(-1e-6)) / 2e-6, 1e-8);
      }
    }
  }
}

TEST(Supervised, TrainsAndPredictsFiniteRisks) {
  const auto s = small_cohort(80);
  auto cfg = small_config();
  std::vector<SupervisedExample> xs;
  for (const auto& p : s.train) {
    if (p.events.size() < 3) continue;
    xs.push_back({&p, p.events[p.events.size() / 2].time_min, 200.0 + static_cast<double>(xs.size() % 7) * 60.0, xs.size() % 3 == 0});
  }
  SupervisedConfig sc;
  sc.max_epochs = 2;
  const auto m = train_supervised(xs, {}, cfg, s.tk.vocab.size(), 365, sc);
  const auto h = predict_hazards(m, cfg, xs[0]);
  ASSERT_EQ(h.size(), 7u);
  const double r = predicted_risk(h, m.edges, 365);
  EXPECT_GT(r, 0.0);
  EXPECT_LT(r, 1.0);
}
