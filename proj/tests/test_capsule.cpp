#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "dysslu/capsule.hpp"
#include "dysslu/harness.hpp"

using namespace dysslu;

namespace {

CapsuleConfig small_config() {
  CapsuleConfig c;
  c.bnf_dim = 3;
  c.n_primary = 2;
  c.d_primary = 3;
  c.n_output = 2;
  c.d_output = 2;
  return c;
}

// Randomizes every tensor so that no gradient path is trivially zero. The
// attention bias stays positive: with most frames suppressed the two squash
// stages crush the outputs to ~1e-5 and the true gradients fall below the
// finite-difference noise floor.
CapsuleParams random_params(const CapsuleConfig& cfg, Rng& rng) {
  CapsuleParams p = zero_capsule_params(cfg);
  for (auto t : p.tensors())
    for (double& x : t) x = 0.8 * rng.normal();
  p.b_a = std::abs(p.b_a) + 1.0;
  return p;
}

double capsule_check(const CapsuleParams& p, const Matrix& f, const LabelSet& targets) {
  CapsuleGrads g(const_cast<CapsuleParams&>(p));
  capsule_loss_and_grad(p, f, targets, &g);
  CapsuleParams work = p;
  return grad_check(
             [&](std::span<const double> x) {
               work.assign(x);
               return capsule_loss_and_grad(work, f, targets, nullptr);
             },
             p.flatten(), g.flatten(), 1e-5)
      .max_rel_error;
}

// Reference routing for two primary capsules, two outputs and 2-d vectors,
// written out one scalar at a time.
struct Routing2x2 {
  double c[2][2];
  double v[2][2];
};

Routing2x2 reference_routing(const double s[2][2], const double w[2][2][2][2], int iters) {
  double u[2][2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int o = 0; o < 2; ++o) u[i][j][o] = w[i][j][o][0] * s[i][0] + w[i][j][o][1] * s[i][1];
  double b[2][2] = {{0, 0}, {0, 0}};
  Routing2x2 r{};
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < 2; ++i) {
      const double m = std::max(b[i][0], b[i][1]);
      const double e0 = std::exp(b[i][0] - m), e1 = std::exp(b[i][1] - m);
      const double inv = 1.0 / (e0 + e1);
      r.c[i][0] = e0 * inv;
      r.c[i][1] = e1 * inv;
    }
    for (int j = 0; j < 2; ++j) {
      const double x = r.c[0][j] * u[0][j][0] + r.c[1][j] * u[1][j][0];
      const double y = r.c[0][j] * u[0][j][1] + r.c[1][j] * u[1][j][1];
      const double n2 = x * x + y * y;
      const double k = n2 == 0.0 ? 0.0 : std::sqrt(n2) / (1.0 + n2);
      r.v[j][0] = k * x;
      r.v[j][1] = k * y;
    }
    if (it + 1 < iters)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) b[i][j] += u[i][j][0] * r.v[j][0] + u[i][j][1] * r.v[j][1];
  }
  return r;
}

// Capsule 0 predicts a strong vector only for output 0; capsule 1 predicts
// opposite vectors for the two outputs.
void agreement_instance(double s[2][2], double w[2][2][2][2]) {
  s[0][0] = 0.6, s[0][1] = 0.0;
  s[1][0] = 0.0, s[1][1] = 0.6;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int o = 0; o < 2; ++o)
        for (int q = 0; q < 2; ++q) w[i][j][o][q] = 0.0;
  w[0][0][0][0] = 2.0;
  w[0][1][0][0] = 0.1;
  w[1][0][1][1] = -1.0;
  w[1][1][1][1] = 1.0;
}

std::vector<SluSample> separable_toy(Rng& rng, std::size_t per_label) {
  std::vector<SluSample> out;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t n = 0; n < per_label; ++n) {
      SluSample s;
      s.features = random_normal(3 + rng.below(5), 4, 0.3, rng);
      for (std::size_t t = 0; t < s.features.rows(); ++t) s.features(t, static_cast<std::size_t>(label)) += 2.0;
      s.labels = {label};
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace

TEST(Attention, ZeroWeightsGiveOneHalf) {
  CapsuleConfig cfg = small_config();
  const CapsuleParams p = zero_capsule_params(cfg);
  Rng rng(1);
  for (double a : attend(p, random_normal(5, 3, 1.0, rng))) EXPECT_EQ(a, 0.5);
}

TEST(Attention, NegativeBiasSuppressesFrames) {
  CapsuleParams p = zero_capsule_params(small_config());
  p.b_a = -20.0;
  Rng rng(2);
  for (double a : attend(p, random_normal(5, 3, 1.0, rng))) EXPECT_LT(a, 1e-8);
}

TEST(Attention, HandEvaluatedLogit) {
  CapsuleParams p = zero_capsule_params(small_config());
  p.w_a = {1.0, 0.0, 0.0};
  p.b_a = 0.0;
  const Matrix f(1, 3, {std::log(3.0), 5.0, -2.0});
  EXPECT_NEAR(attend(p, f)[0], 0.75, 1e-15);
}

TEST(Distributor, ZeroWeightsGiveUniformRows) {
  CapsuleConfig cfg = small_config();
  cfg.n_primary = 4;
  const CapsuleParams p = zero_capsule_params(cfg);
  Rng rng(3);
  const Matrix d = distribute(p, random_normal(6, 3, 1.0, rng));
  for (double x : d.data()) EXPECT_EQ(x, 0.25);
}

TEST(Distributor, SaturatedBiasIsOneHot) {
  CapsuleConfig cfg = small_config();
  cfg.n_primary = 5;
  CapsuleParams p = zero_capsule_params(cfg);
  p.b_d[3] = 50.0;
  Rng rng(4);
  const Matrix d = distribute(p, random_normal(6, 3, 1.0, rng));
  for (std::size_t t = 0; t < d.rows(); ++t) {
    EXPECT_NEAR(d(t, 3), 1.0, 1e-20);
    for (std::size_t i = 0; i < 5; ++i)
      if (i != 3) EXPECT_LT(d(t, i), 1e-20);
  }
}

TEST(Distributor, RowsSumToOne) {
  CapsuleConfig cfg = small_config();
  cfg.n_primary = 7;
  cfg.bnf_dim = 5;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const CapsuleParams p = random_params(cfg, rng);
    const Matrix d = distribute(p, random_normal(8, 5, 2.0, rng));
    for (std::size_t t = 0; t < d.rows(); ++t) {
      const auto r = d.row(t);
      EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(PrimaryCapsules, ZeroAttentionGivesZeroCapsules) {
  Rng rng(5);
  const CapsuleParams p = random_params(small_config(), rng);
  const Matrix f = random_normal(4, 3, 1.0, rng);
  const std::vector<double> alpha(4, 0.0);
  const Matrix s = primary_capsules(p, f, alpha, distribute(p, f));
  for (double x : s.data()) EXPECT_EQ(x, 0.0);
}

TEST(PrimaryCapsules, SingleFrameOneHotAssignment) {
  CapsuleConfig cfg = small_config();
  cfg.n_primary = 3;
  Rng rng(6);
  const CapsuleParams p = random_params(cfg, rng);
  const Matrix f = random_normal(1, 3, 1.0, rng);
  const std::vector<double> alpha = {0.7};
  const Matrix delta(1, 3, {0.0, 0.0, 1.0});
  const Matrix s = primary_capsules(p, f, alpha, delta);
  for (std::size_t i = 0; i < 2; ++i)
    for (double x : s.row(i)) EXPECT_EQ(x, 0.0);
  // squash(w_s . alpha F), evaluated directly.
  std::vector<double> pre(cfg.d_primary, 0.0);
  for (std::size_t q = 0; q < cfg.d_primary; ++q)
    for (std::size_t k = 0; k < cfg.bnf_dim; ++k) pre[q] += p.w_s[q * cfg.bnf_dim + k] * 0.7 * f(0, k);
  const auto want = squash(pre);
  for (std::size_t q = 0; q < cfg.d_primary; ++q) EXPECT_NEAR(s(2, q), want[q], 1e-15);
}

TEST(PrimaryCapsules, AggregateIsLinearInFrames) {
  Rng rng(7);
  const CapsuleParams p = random_params(small_config(), rng);
  const Matrix f = random_normal(5, 3, 1.0, rng);
  Matrix f2 = f;
  for (double& x : f2.data()) x *= 2.0;
  const auto alpha = attend(p, f);
  const Matrix delta = distribute(p, f);
  const Matrix a1 = primary_aggregates(f, alpha, delta);
  const Matrix a2 = primary_aggregates(f2, alpha, delta);
  for (std::size_t k = 0; k < a1.size(); ++k) EXPECT_EQ(a2.data()[k], 2.0 * a1.data()[k]);
}

TEST(Routing, ZeroInputGivesZeroOutputsAndUniformCouplings) {
  Rng rng(8);
  const Matrix s(3, 4);
  std::vector<double> w(3 * 5 * 2 * 4);
  for (double& x : w) x = rng.normal();
  const auto r = dynamic_routing(s, w, 5, 2, 3);
  for (double x : r.v.data()) EXPECT_EQ(x, 0.0);
  for (double c : r.couplings.data()) EXPECT_EQ(c, 0.2);
}

TEST(Routing, SingleIterationHasUniformCouplings) {
  Rng rng(9);
  const Matrix s = random_normal(4, 3, 1.0, rng);
  std::vector<double> w(4 * 3 * 2 * 3);
  for (double& x : w) x = rng.normal();
  const auto r = dynamic_routing(s, w, 3, 2, 1);
  for (double c : r.couplings.data()) EXPECT_EQ(c, 1.0 / 3.0);
}

TEST(Routing, MatchesScalarReferenceExactly) {
  double s[2][2], w[2][2][2][2];
  agreement_instance(s, w);
  Matrix sm(2, 2, {s[0][0], s[0][1], s[1][0], s[1][1]});
  std::vector<double> wf(&w[0][0][0][0], &w[0][0][0][0] + 16);
  double prev = -1.0;
  for (int iters = 1; iters <= 3; ++iters) {
    const auto got = dynamic_routing(sm, wf, 2, 2, static_cast<std::size_t>(iters));
    const auto want = reference_routing(s, w, iters);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        EXPECT_EQ(got.couplings(i, j), want.c[i][j]) << "iters " << iters;
        EXPECT_EQ(got.v(j, i), want.v[j][i]) << "iters " << iters;
      }
    EXPECT_GT(got.couplings(0, 0), prev);
    prev = got.couplings(0, 0);
  }
}

TEST(Routing, MatchesScalarReferenceOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    double s[2][2], w[2][2][2][2];
    for (auto& row : s)
      for (double& x : row) x = rng.normal(0.0, 0.5);
    for (double* x = &w[0][0][0][0]; x != &w[0][0][0][0] + 16; ++x) *x = rng.normal();
    Matrix sm(2, 2, {s[0][0], s[0][1], s[1][0], s[1][1]});
    std::vector<double> wf(&w[0][0][0][0], &w[0][0][0][0] + 16);
    const int iters = 1 + static_cast<int>(rng.below(3));
    const auto got = dynamic_routing(sm, wf, 2, 2, static_cast<std::size_t>(iters));
    const auto want = reference_routing(s, w, iters);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        ASSERT_EQ(got.couplings(i, j), want.c[i][j]);
        ASSERT_EQ(got.v(j, i), want.v[j][i]);
      }
  }
}

TEST(Routing, RejectsBadShapes) {
  const Matrix s(2, 2);
  std::vector<double> w(15);
  EXPECT_THROW(dynamic_routing(s, w, 2, 2, 1), ShapeError);
  w.resize(16);
  EXPECT_THROW(dynamic_routing(s, w, 2, 2, 0), InvalidArgument);
}

TEST(Forward, DefaultShapes) {
  CapsuleConfig cfg;
  Rng rng(10);
  const CapsuleParams p = init_capsule(cfg, rng);
  const auto a = forward(p, random_normal(40, 32, 1.0, rng));
  EXPECT_EQ(a.alpha.size(), 40u);
  EXPECT_EQ(a.delta.rows(), 40u);
  EXPECT_EQ(a.delta.cols(), 32u);
  EXPECT_EQ(a.S.rows(), 32u);
  EXPECT_EQ(a.S.cols(), 64u);
  EXPECT_EQ(a.V.rows(), 27u);
  EXPECT_EQ(a.V.cols(), 8u);
}

TEST(Forward, Deterministic) {
  Rng rng(11);
  const CapsuleParams p = random_params(small_config(), rng);
  const Matrix f = random_normal(6, 3, 1.0, rng);
  const auto a = forward(p, f), b = forward(p, f);
  EXPECT_EQ(a.alpha, b.alpha);
  EXPECT_EQ(a.S, b.S);
  EXPECT_EQ(a.V, b.V);
}

TEST(Forward, FramePermutationInvariant) {
  CapsuleConfig cfg = small_config();
  cfg.n_primary = 4;
  cfg.d_primary = 5;
  Rng rng(12);
  const CapsuleParams p = random_params(cfg, rng);
  const Matrix f = random_normal(9, 3, 1.0, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span(perm));
  Matrix g(9, 3);
  for (std::size_t t = 0; t < 9; ++t) std::copy(f.row(perm[t]).begin(), f.row(perm[t]).end(), g.row(t).begin());
  const auto a = forward(p, f), b = forward(p, g);
  for (std::size_t k = 0; k < a.S.size(); ++k) EXPECT_NEAR(a.S.data()[k], b.S.data()[k], 1e-13);
  for (std::size_t k = 0; k < a.V.size(); ++k) EXPECT_NEAR(a.V.data()[k], b.V.data()[k], 1e-13);
}

TEST(Forward, RejectsWrongWidth) {
  Rng rng(13);
  const CapsuleParams p = random_params(small_config(), rng);
  EXPECT_THROW(forward(p, Matrix(3, 4)), ShapeError);
  EXPECT_THROW(forward(p, Matrix(0, 3)), ShapeError);
}

TEST(MarginLoss, MarginsExactlyMet) {
  CapsuleConfig cfg = small_config();
  cfg.n_output = 3;
  const Matrix v(3, 2, {0.9, 0.0, 0.0, 0.1, 0.0, -0.1});
  EXPECT_EQ(margin_loss(v, {0}, cfg), 0.0);
}

TEST(MarginLoss, SingleAbsentLabel) {
  CapsuleConfig cfg = small_config();
  cfg.n_output = 1;
  const Matrix v(1, 2, {0.6, 0.0});
  EXPECT_NEAR(margin_loss(v, {}, cfg), 0.125, 1e-15);
}

TEST(MarginLoss, NonNegativeAndGradientMatches) {
  CapsuleConfig cfg = small_config();
  cfg.n_output = 5;
  cfg.d_output = 3;
  Rng rng(14);
  for (int n = 0; n < 1000; ++n) {
    const Matrix v = random_normal(5, 3, 0.5, rng);
    LabelSet t;
    for (int k = 0; k < 5; ++k)
      if (rng.bernoulli(0.3)) t.push_back(k);
    EXPECT_GE(margin_loss(v, t, cfg), 0.0);
  }
  const Matrix v = random_normal(5, 3, 0.4, rng);
  Matrix gv;
  margin_loss(v, {1, 3}, cfg, &gv);
  const auto r = grad_check(
      [&](std::span<const double> x) {
        return margin_loss(Matrix(5, 3, std::vector<double>(x.begin(), x.end())), {1, 3}, cfg);
      },
      v.data(), gv.data(), 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_THROW(margin_loss(v, {5}, cfg), InvalidArgument);
}

TEST(CapsuleGradient, AllTensorsSmallConfig) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const CapsuleParams p = random_params(small_config(), rng);
    const Matrix f = random_normal(4, 3, 1.0, rng);
    EXPECT_LT(capsule_check(p, f, {static_cast<int>(seed % 2)}), 1e-4) << "seed " << seed;
  }
}

TEST(CapsuleGradient, EachRoutingDepth) {
  for (std::size_t iters = 1; iters <= 4; ++iters) {
    CapsuleConfig cfg = small_config();
    cfg.routing_iters = iters;
    cfg.n_output = 3;
    Rng rng(20 + iters);
    const CapsuleParams p = random_params(cfg, rng);
    EXPECT_LT(capsule_check(p, random_normal(5, 3, 1.0, rng), {0, 2}), 1e-4) << iters;
  }
}

TEST(CapsuleGradient, PerCapsuleProjection) {
  CapsuleConfig cfg = small_config();
  cfg.per_capsule_projection = true;
  Rng rng(31);
  const CapsuleParams p = random_params(cfg, rng);
  EXPECT_EQ(p.w_s.size(), 2u * 3 * 3);
  EXPECT_LT(capsule_check(p, random_normal(4, 3, 1.0, rng), {1}), 1e-4);
}

TEST(CapsuleGradient, GradientScaleIsLinear) {
  Rng rng(32);
  CapsuleParams p = random_params(small_config(), rng);
  const Matrix f = random_normal(4, 3, 1.0, rng);
  CapsuleGrads g1(p), g2(p);
  capsule_loss_and_grad(p, f, {0}, &g1, 1.0);
  capsule_loss_and_grad(p, f, {0}, &g2, 0.25);
  const auto a = g1.flatten(), b = g2.flatten();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b[k], 0.25 * a[k], 1e-15 + 1e-12 * std::abs(a[k]));
}

TEST(Fit, SeparableToyReachesPerfectTrainF1) {
  Rng data_rng(40);
  const auto data = separable_toy(data_rng, 20);
  CapsuleConfig cfg;
  cfg.n_output = 2;
  cfg.n_epochs = 50;
  Rng rng(41);
  FitLog log;
  const CapsuleParams p = fit(cfg, data, rng, &log);
  ASSERT_EQ(log.epoch_loss.size(), 50u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
  std::vector<LabelSet> pred, gold;
  for (const auto& s : data) {
    pred.push_back(predict(p, s.features));
    gold.push_back(s.labels);
  }
  EXPECT_EQ(micro_f1(pred, gold), 1.0);
}

TEST(Fit, AdamBatchedAlsoLearnsToy) {
  Rng data_rng(42);
  const auto data = separable_toy(data_rng, 20);
  CapsuleConfig cfg;
  cfg.n_output = 2;
  cfg.n_primary = 8;
  cfg.d_primary = 8;
  cfg.n_epochs = 30;
  cfg.batch_size = 8;
  cfg.optimizer = Optimizer::kAdam;
  Rng rng(43);
  const CapsuleParams p = fit(cfg, data, rng);
  std::vector<LabelSet> pred, gold;
  for (const auto& s : data) pred.push_back(predict(p, s.features)), gold.push_back(s.labels);
  EXPECT_EQ(micro_f1(pred, gold), 1.0);
}

TEST(Fit, SameSeedSameParameters) {
  Rng data_rng(44);
  const auto data = separable_toy(data_rng, 5);
  CapsuleConfig cfg = small_config();
  cfg.bnf_dim = 4;
  cfg.n_epochs = 3;
  Rng a(1), b(1);
  EXPECT_EQ(fit(cfg, data, a), fit(cfg, data, b));
}

TEST(Fit, RejectsEmptyOrMixedData) {
  CapsuleConfig cfg = small_config();
  Rng rng(0);
  EXPECT_THROW(fit(cfg, std::vector<SluSample>{}, rng), InvalidArgument);
  std::vector<SluSample> mixed = {{Matrix(2, 3), {0}}, {Matrix(2, 4), {1}}};
  EXPECT_THROW(fit(cfg, mixed, rng), ShapeError);
}

TEST(Predict, FallsBackToArgmax) {
  const std::vector<double> norms = {0.1, 0.45, 0.3};
  EXPECT_EQ(labels_from_norms(norms, 0.5), (LabelSet{1}));
  const std::vector<double> some = {0.6, 0.45, 0.9};
  EXPECT_EQ(labels_from_norms(some, 0.5), (LabelSet{0, 2}));
}

TEST(Predict, UsesOutputNormsOfForward) {
  Rng rng(50);
  CapsuleConfig cfg = small_config();
  cfg.n_output = 4;
  const CapsuleParams p = random_params(cfg, rng);
  const Matrix f = random_normal(5, 3, 1.0, rng);
  const auto norms = forward(p, f).output_norms();
  EXPECT_EQ(predict(p, f, 0.3), labels_from_norms(norms, 0.3));
}

TEST(CapsuleConfig, Validation) {
  CapsuleConfig c;
  c.routing_iters = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = CapsuleConfig{};
  c.margin_minus = 0.95;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = CapsuleConfig{};
  c.detect_threshold = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_THROW(parse_optimizer("rmsprop"), InvalidArgument);
  EXPECT_EQ(parse_optimizer(optimizer_name(Optimizer::kAdam)), Optimizer::kAdam);
}
