#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dysslu/capsule.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/encoder.hpp"
#include "dysslu/formats.hpp"
#include "dysslu/harness.hpp"
#include "dysslu/nn.hpp"

namespace dysslu {

// Fast invariant and gradient checks run by `dysslu validate`.

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Small encoder for gradient checks: two layers, receptive field 10.
inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.input_dim = 3;
  c.n_layers = 2;
  c.context = {{3, 2}, {3, 3}};
  c.hidden_dim = 4;
  c.bnf_dim = 3;
  c.n_phone_targets = 4;
  c.speaker_embed_dim = 2;
  return c;
}

inline CapsuleConfig tiny_capsule_config() {
  CapsuleConfig c;
  c.bnf_dim = 3;
  c.n_primary = 2;
  c.d_primary = 3;
  c.n_output = 2;
  c.d_output = 2;
  c.route_init_std = 0.8;
  return c;
}

inline GradCheckResult encoder_grad_check(std::uint64_t seed, double eps = 1e-5) {
  Rng rng(seed);
  EncoderParams p = init_encoder(tiny_encoder_config(), rng);
  SpeakerProfile sp;
  sp.speaker_id = "s0";
  add_speakers(p, std::span(&sp, 1), rng);
  for (auto& l : p.layers)
    for (double& b : l.bias) b = 0.1 * rng.normal();
  Utterance u;
  u.utt_id = "u0";
  u.speaker_id = "s0";
  u.features = random_normal(7, 3, 1.0, rng);
  for (std::size_t t = 0; t < 7; ++t) u.phone_alignment.push_back(static_cast<int>(rng.below(4)));
  EncoderGrads g(p);
  encoder_loss_and_grad(p, u, &g);
  std::vector<double> analytic;
  for (const auto& t : g.tensors) analytic.insert(analytic.end(), t.begin(), t.end());
  const auto theta = p.flatten();
  EncoderParams work = p;
  return grad_check(
      [&](std::span<const double> x) {
        work.assign(x);
        return encoder_loss_and_grad(work, u, nullptr);
      },
      theta, analytic, eps);
}

inline GradCheckResult capsule_grad_check(std::uint64_t seed, double eps = 1e-5) {
  Rng rng(seed);
  const CapsuleConfig cfg = tiny_capsule_config();
  CapsuleParams p = init_capsule(cfg, rng);
  for (double& w : p.w_a) w = rng.normal();
  p.b_a = 0.3 * rng.normal();
  for (double& b : p.b_d) b = 0.3 * rng.normal();
  for (double& w : p.w_s) w = 0.7 * rng.normal();
  const Matrix f = random_normal(4, 3, 1.0, rng);
  const LabelSet target = {static_cast<int>(rng.below(2))};
  CapsuleGrads g(p);
  capsule_loss_and_grad(p, f, target, &g);
  const auto theta = p.flatten();
  CapsuleParams work = p;
  return grad_check(
      [&](std::span<const double> x) {
        work.assign(x);
        return capsule_loss_and_grad(work, f, target, nullptr);
      },
      theta, g.flatten(), eps);
}

inline CheckResult timed_check(const std::string& name, const std::function<std::string()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  try {
    r.detail = body();
    r.passed = r.detail.rfind("FAIL", 0) != 0;
  } catch (const std::exception& e) {
    r.detail = std::string("FAIL: exception: ") + e.what();
    r.passed = false;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<CheckResult> run_self_checks() {
  std::vector<CheckResult> out;

  out.push_back(timed_check("gradients", [] {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) {
      worst = std::max(worst, encoder_grad_check(s).max_rel_error);
      worst = std::max(worst, capsule_grad_check(s).max_rel_error);
    }
    return std::string(worst < 1e-4 ? "" : "FAIL: ") + "max relative error " + std::to_string(worst);
  }));

  out.push_back(timed_check("normalization", [] {
    CapsuleConfig cfg;
    cfg.bnf_dim = 8;
    cfg.n_primary = 6;
    cfg.d_primary = 5;
    cfg.n_output = 4;
    cfg.d_output = 3;
    Rng rng(11);
    double worst = 0.0;
    bool bounded = true;
    for (int n = 0; n < 200; ++n) {
      CapsuleParams p = init_capsule(cfg, rng);
      for (double& b : p.b_d) b = rng.normal();
      const Matrix f = random_normal(1 + rng.below(9), cfg.bnf_dim, 2.0, rng);
      const auto a = forward(p, f);
      for (std::size_t t = 0; t < a.delta.rows(); ++t) {
        double s = 0.0;
        for (double x : a.delta.row(t)) s += x;
        worst = std::max(worst, std::abs(s - 1.0));
      }
      for (std::size_t i = 0; i < a.couplings.rows(); ++i) {
        double s = 0.0;
        for (double x : a.couplings.row(i)) s += x;
        worst = std::max(worst, std::abs(s - 1.0));
        bounded &= norm(a.S.row(i)) < 1.0;
      }
      for (double x : a.alpha) bounded &= x > 0.0 && x < 1.0;
      for (double n2 : a.output_norms()) bounded &= n2 < 1.0;
    }
    return std::string(worst <= 1e-12 && bounded ? "" : "FAIL: ") + "max row-sum deviation " + std::to_string(worst);
  }));

  out.push_back(timed_check("routing agreement", [] {
    Matrix s(2, 2);
    s(0, 0) = 0.6;
    s(1, 1) = 0.6;
    std::vector<double> w(2 * 2 * 2 * 2, 0.0);
    auto at = [&](std::size_t i, std::size_t j, std::size_t o, std::size_t q) -> double& {
      return w[((i * 2 + j) * 2 + o) * 2 + q];
    };
    at(0, 0, 0, 0) = 2.0;
    at(0, 1, 0, 0) = 0.1;
    at(1, 0, 1, 1) = -1.0;
    at(1, 1, 1, 1) = 1.0;
    double prev = -1.0;
    for (std::size_t r = 1; r <= 3; ++r) {
      const double c = dynamic_routing(s, w, 2, 2, r).couplings(0, 0);
      if (!(c > prev)) return std::string("FAIL: coupling did not increase at iteration ") + std::to_string(r);
      prev = c;
    }
    return std::string("final coupling ") + std::to_string(prev);
  }));

  out.push_back(timed_check("formats", [] {
    Rng rng(5);
    std::vector<FeatureRecord> recs = {{"a", random_normal(3, 2, 1.0, rng)}, {"b", Matrix(0, 2)}};
    for (auto& r : recs)
      for (double& x : r.features.data()) x = static_cast<float>(x);
    auto bytes = encode_bnf_archive(recs);
    if (decode_bnf_archive(bytes) != recs) return std::string("FAIL: BNF archive round trip");
    bytes[0] = 'X';
    try {
      decode_bnf_archive(bytes);
      return std::string("FAIL: corrupted magic accepted");
    } catch (const FormatError&) {
    }
    EncoderParams e = init_encoder(tiny_encoder_config(), rng);
    if (decode_encoder(encode_encoder(e)) != e) return std::string("FAIL: encoder round trip");
    CapsuleParams c = init_capsule(tiny_capsule_config(), rng);
    if (decode_capsule(encode_capsule(c)) != c) return std::string("FAIL: capsule round trip");
    return std::string("round trips exact");
  }));

  out.push_back(timed_check("micro_f1", [] {
    Rng rng(3);
    for (int n = 0; n < 500; ++n) {
      std::vector<LabelSet> p(1 + rng.below(5)), g(p.size());
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t u = 0; u < p.size(); ++u) {
        for (int l = 0; l < 6; ++l) {
          const bool in_p = rng.bernoulli(0.4), in_g = rng.bernoulli(0.4);
          if (in_p) p[u].push_back(l);
          if (in_g) g[u].push_back(l);
          tp += in_p && in_g;
          fp += in_p && !in_g;
          fn += !in_p && in_g;
        }
      }
      const double want = tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
      if (micro_f1(p, g) != want) return std::string("FAIL: pooled count mismatch");
    }
    return std::string("500 random cases exact");
  }));

  out.push_back(timed_check("block_split", [] {
    Rng rng(9);
    for (std::size_t n = 15; n < 40; ++n) {
      std::vector<std::size_t> items(n);
      for (std::size_t i = 0; i < n; ++i) items[i] = i;
      const auto blocks = block_split(items, 15, rng);
      std::vector<std::size_t> seen;
      std::size_t lo = n, hi = 0;
      for (const auto& b : blocks) {
        seen.insert(seen.end(), b.begin(), b.end());
        lo = std::min(lo, b.size());
        hi = std::max(hi, b.size());
      }
      std::sort(seen.begin(), seen.end());
      if (seen != items || hi - lo > 1) return std::string("FAIL: not a balanced partition for n=") + std::to_string(n);
    }
    return std::string("partitions exact");
  }));

  return out;
}

}  // namespace dysslu
