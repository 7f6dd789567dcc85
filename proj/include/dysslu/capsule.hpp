#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dysslu/binary_io.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/error.hpp"
#include "dysslu/matrix.hpp"
#include "dysslu/nn.hpp"
#include "dysslu/rng.hpp"

namespace dysslu {

enum class Optimizer { kSgd, kAdam };

inline std::string optimizer_name(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(std::string_view name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "adam") return Optimizer::kAdam;
  throw InvalidArgument("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

struct CapsuleConfig {
  std::size_t bnf_dim = 32;
  std::size_t n_primary = 32;
  std::size_t d_primary = 64;
  std::size_t n_output = 27;  ///< slot vocabulary size
  std::size_t d_output = 8;
  std::size_t routing_iters = 3;
  double detect_threshold = 0.5;
  double margin_plus = 0.9;
  double margin_minus = 0.1;
  double lambda_neg = 0.5;
  double learning_rate = 0.01;
  std::size_t n_epochs = 200;
  std::size_t batch_size = 1;
  /// One squash-layer projection per primary capsule instead of a shared one.
  bool per_capsule_projection = false;
  double route_init_std = 0.5;
  Optimizer optimizer = Optimizer::kSgd;

  void validate() const {
    if (routing_iters < 1) throw InvalidArgument("capsule: routing_iters must be >= 1");
    if (!(margin_minus < margin_plus)) throw InvalidArgument("capsule: margin_minus must be < margin_plus");
    if (!(detect_threshold > 0.0 && detect_threshold < 1.0))
      throw InvalidArgument("capsule: detect_threshold must lie in (0, 1)");
    if (bnf_dim < 1 || n_primary < 1 || d_primary < 1 || n_output < 1 || d_output < 1)
      throw InvalidArgument("capsule: dimensions must be positive");
    if (batch_size < 1) throw InvalidArgument("capsule: batch_size must be >= 1");
  }

  friend bool operator==(const CapsuleConfig&, const CapsuleConfig&) = default;
};

/// Trainable decoder weights.
///   attention    alpha_t = sigmoid(w_a . F_t + b_a)
///   distributor  delta_t = softmax(w_d F_t + b_d)
///   squash layer S_i = squash(w_s a_i),  a_i = sum_t alpha_t delta_ti F_t
///   routing      u_ij = W_route[i][j] S_i   (W_route stored [i][j][o][p])
struct CapsuleParams {
  CapsuleConfig config;
  std::vector<double> w_a;      ///< bnf_dim
  double b_a = 0.0;
  std::vector<double> w_d;      ///< n_primary x bnf_dim
  std::vector<double> b_d;      ///< n_primary
  std::vector<double> w_s;      ///< d_primary x bnf_dim (or n_primary x d_primary x bnf_dim)
  std::vector<double> w_route;  ///< n_primary x n_output x d_output x d_primary

  std::vector<std::span<double>> tensors() {
    return {std::span<double>(w_a), std::span<double>(&b_a, 1), std::span<double>(w_d),
            std::span<double>(b_d), std::span<double>(w_s), std::span<double>(w_route)};
  }

  std::size_t parameter_count() const {
    return w_a.size() + 1 + w_d.size() + b_d.size() + w_s.size() + w_route.size();
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (auto t : const_cast<CapsuleParams*>(this)->tensors()) flat.insert(flat.end(), t.begin(), t.end());
    return flat;
  }

  void assign(std::span<const double> flat) {
    std::size_t pos = 0;
    for (auto t : tensors()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.begin());
      pos += t.size();
    }
  }

  std::span<const double> squash_weights(std::size_t capsule) const noexcept {
    const std::size_t n = config.d_primary * config.bnf_dim;
    return config.per_capsule_projection ? std::span<const double>(w_s.data() + capsule * n, n)
                                         : std::span<const double>(w_s);
  }

  bool all_finite() const {
    auto finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return finite(w_a) && std::isfinite(b_a) && finite(w_d) && finite(b_d) && finite(w_s) && finite(w_route);
  }

  friend bool operator==(const CapsuleParams&, const CapsuleParams&) = default;
};

/// Allocates parameters of the configured shape, all zero.
inline CapsuleParams zero_capsule_params(const CapsuleConfig& cfg) {
  cfg.validate();
  CapsuleParams p;
  p.config = cfg;
  p.w_a.assign(cfg.bnf_dim, 0.0);
  p.w_d.assign(cfg.n_primary * cfg.bnf_dim, 0.0);
  p.b_d.assign(cfg.n_primary, 0.0);
  p.w_s.assign((cfg.per_capsule_projection ? cfg.n_primary : 1) * cfg.d_primary * cfg.bnf_dim, 0.0);
  p.w_route.assign(cfg.n_primary * cfg.n_output * cfg.d_output * cfg.d_primary, 0.0);
  return p;
}

/// Typical input magnitudes, used to scale the initial weights so that the
/// first forward passes sit in the responsive range of each nonlinearity.
struct InputScale {
  double frame_norm = 1.0;      ///< mean |F_t|
  double aggregate_norm = 1.0;  ///< typical |a_i| under alpha = 0.5 and uniform delta
};

inline CapsuleParams init_capsule(const CapsuleConfig& cfg, Rng& rng, const InputScale& scale = {}) {
  CapsuleParams p = zero_capsule_params(cfg);
  const double in_std = 1.0 / (std::max(scale.frame_norm, 1e-6));
  for (double& w : p.w_a) w = 0.1 * in_std * rng.normal();
  for (double& w : p.w_d) w = in_std * rng.normal();
  const double ws_std =
      1.0 / (std::max(scale.aggregate_norm, 1e-6) * std::sqrt(static_cast<double>(cfg.d_primary)));
  for (double& w : p.w_s) w = ws_std * rng.normal();
  for (double& w : p.w_route) w = cfg.route_init_std * rng.normal();
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

inline void check_input(const CapsuleParams& p, const Matrix& f) {
  if (f.cols() != p.config.bnf_dim)
    throw ShapeError("capsule: expected feature dimension " + std::to_string(p.config.bnf_dim) + ", got " +
                     std::to_string(f.cols()));
  if (f.rows() == 0) throw ShapeError("capsule: empty feature sequence");
}

/// Per-frame attention weights.
inline std::vector<double> attend(const CapsuleParams& p, const Matrix& f) {
  check_input(p, f);
  std::vector<double> alpha(f.rows());
  for (std::size_t t = 0; t < f.rows(); ++t) alpha[t] = sigmoid(dot(p.w_a, f.row(t)) + p.b_a);
  return alpha;
}

/// Per-frame distribution over primary capsules (rows sum to one).
inline Matrix distribute(const CapsuleParams& p, const Matrix& f) {
  check_input(p, f);
  const std::size_t np = p.config.n_primary;
  const std::size_t bd = p.config.bnf_dim;
  Matrix delta(f.rows(), np);
  std::vector<double> logits(np);
  for (std::size_t t = 0; t < f.rows(); ++t) {
    auto ft = f.row(t);
    for (std::size_t i = 0; i < np; ++i)
      logits[i] = p.b_d[i] + dot(std::span<const double>(p.w_d.data() + i * bd, bd), ft);
    softmax(logits, delta.row(t));
  }
  return delta;
}

/// a_i = sum_t alpha_t delta_ti F_t  (n_primary x bnf_dim).
inline Matrix primary_aggregates(const Matrix& f, std::span<const double> alpha, const Matrix& delta) {
  if (alpha.size() != f.rows() || delta.rows() != f.rows())
    throw ShapeError("capsule: attention/distribution length does not match frame count");
  Matrix agg(delta.cols(), f.cols());
  for (std::size_t t = 0; t < f.rows(); ++t) {
    auto ft = f.row(t);
    for (std::size_t i = 0; i < delta.cols(); ++i) {
      const double w = alpha[t] * delta(t, i);
      if (w != 0.0) axpy(w, ft, agg.row(i));
    }
  }
  return agg;
}

/// Pre-squash primary vectors w_s a_i.
inline Matrix project_aggregates(const CapsuleParams& p, const Matrix& agg) {
  const std::size_t dp = p.config.d_primary;
  const std::size_t bd = p.config.bnf_dim;
  Matrix s(agg.rows(), dp);
  for (std::size_t i = 0; i < agg.rows(); ++i) {
    auto ws = p.squash_weights(i);
    auto ai = agg.row(i);
    for (std::size_t q = 0; q < dp; ++q) s(i, q) = dot(std::span<const double>(ws.data() + q * bd, bd), ai);
  }
  return s;
}

inline Matrix squash_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) squash(m.row(r), out.row(r));
  return out;
}

/// S_i = squash(w_s . sum_t alpha_t delta_ti F_t).
inline Matrix primary_capsules(const CapsuleParams& p, const Matrix& f, std::span<const double> alpha,
                               const Matrix& delta) {
  check_input(p, f);
  if (delta.cols() != p.config.n_primary) throw ShapeError("capsule: distribution width != n_primary");
  return squash_rows(project_aggregates(p, primary_aggregates(f, alpha, delta)));
}

/// Intermediate values of one routing run, kept for backpropagation.
struct RoutingTrace {
  std::vector<double> u_hat;          ///< [i][j][o] predictions
  std::vector<Matrix> couplings;      ///< per iteration, n_primary x n_output
  std::vector<Matrix> pre_squash;     ///< per iteration, n_output x d_output
  std::vector<Matrix> outputs;        ///< per iteration, n_output x d_output
};

struct RoutingResult {
  Matrix v;          ///< n_output x d_output
  Matrix couplings;  ///< n_primary x n_output (those used for the returned v)
  RoutingTrace trace;
};

/// Routing by agreement. Logits b_ij start at 0; each iteration computes
/// c_i = softmax_j(b_i), s_j = sum_i c_ij u_ij, v_j = squash(s_j) and then
/// b_ij += u_ij . v_j. The update after the final iteration cannot affect
/// the result and is skipped.
inline RoutingResult dynamic_routing(const Matrix& s_caps, std::span<const double> w_route, std::size_t n_output,
                                     std::size_t d_output, std::size_t routing_iters) {
  if (routing_iters < 1) throw InvalidArgument("dynamic_routing: routing_iters must be >= 1");
  const std::size_t np = s_caps.rows();
  const std::size_t dp = s_caps.cols();
  if (w_route.size() != np * n_output * d_output * dp) throw ShapeError("dynamic_routing: W_route shape mismatch");
  RoutingResult res;
  auto& tr = res.trace;
  tr.u_hat.assign(np * n_output * d_output, 0.0);
  for (std::size_t i = 0; i < np; ++i) {
    auto si = s_caps.row(i);
    for (std::size_t j = 0; j < n_output; ++j) {
      const std::size_t base = (i * n_output + j) * d_output;
      for (std::size_t o = 0; o < d_output; ++o)
        tr.u_hat[base + o] = dot(std::span<const double>(w_route.data() + (base + o) * dp, dp), si);
    }
  }
  Matrix logits(np, n_output);
  for (std::size_t r = 0; r < routing_iters; ++r) {
    Matrix c(np, n_output);
    for (std::size_t i = 0; i < np; ++i) softmax(logits.row(i), c.row(i));
    Matrix s(n_output, d_output);
    for (std::size_t i = 0; i < np; ++i)
      for (std::size_t j = 0; j < n_output; ++j)
        axpy(c(i, j), std::span<const double>(tr.u_hat.data() + (i * n_output + j) * d_output, d_output), s.row(j));
    Matrix v = squash_rows(s);
    if (r + 1 < routing_iters) {
      for (std::size_t i = 0; i < np; ++i)
        for (std::size_t j = 0; j < n_output; ++j)
          logits(i, j) += dot(std::span<const double>(tr.u_hat.data() + (i * n_output + j) * d_output, d_output),
                              v.row(j));
    }
    tr.couplings.push_back(std::move(c));
    tr.pre_squash.push_back(std::move(s));
    tr.outputs.push_back(std::move(v));
  }
  res.v = tr.outputs.back();
  res.couplings = tr.couplings.back();
  return res;
}

struct CapsuleActivations {
  std::vector<double> alpha;  ///< T
  Matrix delta;               ///< T x n_primary
  Matrix S;                   ///< n_primary x d_primary
  Matrix V;                   ///< n_output x d_output
  Matrix couplings;           ///< n_primary x n_output

  std::vector<double> output_norms() const {
    std::vector<double> n(V.rows());
    for (std::size_t j = 0; j < V.rows(); ++j) n[j] = norm(V.row(j));
    return n;
  }
};

/// Everything forward() computes plus what backward() needs.
struct CapsuleTrace {
  CapsuleActivations act;
  Matrix aggregates;  ///< n_primary x bnf_dim
  Matrix s_pre;       ///< n_primary x d_primary
  RoutingTrace routing;
};

inline CapsuleTrace capsule_trace(const CapsuleParams& p, const Matrix& f) {
  CapsuleTrace tr;
  tr.act.alpha = attend(p, f);
  tr.act.delta = distribute(p, f);
  tr.aggregates = primary_aggregates(f, tr.act.alpha, tr.act.delta);
  tr.s_pre = project_aggregates(p, tr.aggregates);
  tr.act.S = squash_rows(tr.s_pre);
  RoutingResult rr = dynamic_routing(tr.act.S, p.w_route, p.config.n_output, p.config.d_output,
                                     p.config.routing_iters);
  tr.act.V = std::move(rr.v);
  tr.act.couplings = std::move(rr.couplings);
  tr.routing = std::move(rr.trace);
  return tr;
}

inline CapsuleActivations forward(const CapsuleParams& p, const Matrix& f) { return capsule_trace(p, f).act; }

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// L = sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2.
inline double margin_loss(const Matrix& v, const LabelSet& targets, const CapsuleConfig& cfg,
                          Matrix* grad_v = nullptr) {
  std::vector<char> present(v.rows(), 0);
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v.rows())
      throw InvalidArgument("margin_loss: target label " + std::to_string(t) + " out of range");
    present[static_cast<std::size_t>(t)] = 1;
  }
  if (grad_v) *grad_v = Matrix(v.rows(), v.cols());
  double loss = 0.0;
  for (std::size_t k = 0; k < v.rows(); ++k) {
    const double n = norm(v.row(k));
    double dn = 0.0;
    if (present[k]) {
      const double gap = std::max(0.0, cfg.margin_plus - n);
      loss += gap * gap;
      dn = -2.0 * gap;
    } else {
      const double gap = std::max(0.0, n - cfg.margin_minus);
      loss += cfg.lambda_neg * gap * gap;
      dn = 2.0 * cfg.lambda_neg * gap;
    }
    if (grad_v && dn != 0.0 && n > 0.0) axpy(dn / n, v.row(k), grad_v->row(k));
  }
  return loss;
}

/// Gradient buffers shaped like CapsuleParams::tensors().
struct CapsuleGrads {
  std::vector<double> w_a, w_d, b_d, w_s, w_route;
  double b_a = 0.0;

  explicit CapsuleGrads(const CapsuleParams& p)
      : w_a(p.w_a.size()), w_d(p.w_d.size()), b_d(p.b_d.size()), w_s(p.w_s.size()), w_route(p.w_route.size()) {}

  void zero() {
    for (auto* v : {&w_a, &w_d, &b_d, &w_s, &w_route}) std::fill(v->begin(), v->end(), 0.0);
    b_a = 0.0;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat(w_a);
    flat.push_back(b_a);
    for (const auto* v : {&w_d, &b_d, &w_s, &w_route}) flat.insert(flat.end(), v->begin(), v->end());
    return flat;
  }
};

/// Backpropagates dL/dV through unrolled routing, the squash layer, the
/// distributor and the attention; gradients are scaled by `scale` and
/// accumulated into `g`.
inline void capsule_backward(const CapsuleParams& p, const Matrix& f, const CapsuleTrace& tr, const Matrix& grad_v,
                             double scale, CapsuleGrads& g) {
  const auto& cfg = p.config;
  const std::size_t np = cfg.n_primary, no = cfg.n_output, dout = cfg.d_output, dp = cfg.d_primary,
                    bd = cfg.bnf_dim;
  const auto& rt = tr.routing;
  const std::size_t iters = rt.outputs.size();

  // --- routing, last iteration first ---
  std::vector<double> g_uhat(np * no * dout, 0.0);
  Matrix gv = grad_v;
  for (double& x : gv.data()) x *= scale;
  Matrix g_logits(np, no);  // dL/db for the logits feeding the current iteration
  std::vector<double> gc(no);
  for (std::size_t r = iters; r-- > 0;) {
    const Matrix& c = rt.couplings[r];
    Matrix gs(no, dout);
    for (std::size_t j = 0; j < no; ++j) squash_backward(rt.pre_squash[r].row(j), gv.row(j), gs.row(j));
    for (std::size_t i = 0; i < np; ++i) {
      for (std::size_t j = 0; j < no; ++j) {
        std::span<const double> u(rt.u_hat.data() + (i * no + j) * dout, dout);
        axpy(c(i, j), gs.row(j), std::span<double>(g_uhat.data() + (i * no + j) * dout, dout));
        gc[j] = dot(gs.row(j), u);
      }
      softmax_backward(c.row(i), gc, g_logits.row(i));
    }
    if (r == 0) break;
    // logits_r = logits_{r-1} + u . v_{r-1}: g_logits flows on unchanged.
    const Matrix& v_prev = rt.outputs[r - 1];
    Matrix gv_prev(no, dout);
    for (std::size_t i = 0; i < np; ++i) {
      for (std::size_t j = 0; j < no; ++j) {
        const double gb = g_logits(i, j);
        if (gb == 0.0) continue;
        std::span<const double> u(rt.u_hat.data() + (i * no + j) * dout, dout);
        axpy(gb, v_prev.row(j), std::span<double>(g_uhat.data() + (i * no + j) * dout, dout));
        axpy(gb, u, gv_prev.row(j));
      }
    }
    gv = std::move(gv_prev);
  }

  // --- predictions u_ij = W_ij S_i ---
  Matrix g_S(np, dp);
  for (std::size_t i = 0; i < np; ++i) {
    auto si = tr.act.S.row(i);
    auto gsi = g_S.row(i);
    for (std::size_t j = 0; j < no; ++j) {
      for (std::size_t o = 0; o < dout; ++o) {
        const std::size_t idx = (i * no + j) * dout + o;
        const double gu = g_uhat[idx];
        if (gu == 0.0) continue;
        axpy(gu, si, std::span<double>(g.w_route.data() + idx * dp, dp));
        axpy(gu, std::span<const double>(p.w_route.data() + idx * dp, dp), gsi);
      }
    }
  }

  // --- squash layer ---
  Matrix g_agg(np, bd);
  std::vector<double> gsp(dp);
  for (std::size_t i = 0; i < np; ++i) {
    std::fill(gsp.begin(), gsp.end(), 0.0);
    squash_backward(tr.s_pre.row(i), g_S.row(i), gsp);
    auto ws = p.squash_weights(i);
    double* gws = g.w_s.data() + (cfg.per_capsule_projection ? i * dp * bd : 0);
    auto ai = tr.aggregates.row(i);
    auto gai = g_agg.row(i);
    for (std::size_t q = 0; q < dp; ++q) {
      if (gsp[q] == 0.0) continue;
      axpy(gsp[q], ai, std::span<double>(gws + q * bd, bd));
      axpy(gsp[q], std::span<const double>(ws.data() + q * bd, bd), gai);
    }
  }

  // --- aggregation, distributor, attention ---
  std::vector<double> g_delta(np), g_y(np);
  for (std::size_t t = 0; t < f.rows(); ++t) {
    auto ft = f.row(t);
    const double a = tr.act.alpha[t];
    double g_alpha = 0.0;
    for (std::size_t i = 0; i < np; ++i) {
      const double proj = dot(g_agg.row(i), ft);
      g_alpha += tr.act.delta(t, i) * proj;
      g_delta[i] = a * proj;
    }
    std::fill(g_y.begin(), g_y.end(), 0.0);
    softmax_backward(tr.act.delta.row(t), g_delta, g_y);
    for (std::size_t i = 0; i < np; ++i) {
      g.b_d[i] += g_y[i];
      axpy(g_y[i], ft, std::span<double>(g.w_d.data() + i * bd, bd));
    }
    const double gz = g_alpha * a * (1.0 - a);
    g.b_a += gz;
    axpy(gz, ft, g.w_a);
  }
}

/// Margin loss of one sample and (optionally) its scaled gradient.
inline double capsule_loss_and_grad(const CapsuleParams& p, const Matrix& f, const LabelSet& targets,
                                    CapsuleGrads* g, double scale = 1.0) {
  CapsuleTrace tr = capsule_trace(p, f);
  Matrix gv;
  const double loss = margin_loss(tr.act.V, targets, p.config, g ? &gv : nullptr);
  if (g) capsule_backward(p, f, tr, gv, scale, *g);
  return loss;
}

// ---------------------------------------------------------------------------
// Training and prediction
// ---------------------------------------------------------------------------

struct SluSample {
  Matrix features;  ///< T x bnf_dim
  LabelSet labels;
};

struct FitLog {
  std::vector<double> epoch_loss;  ///< mean margin loss seen during each epoch
};

inline InputScale measure_input_scale(std::span<const SluSample* const> data, std::size_t n_primary) {
  double frames = 0.0, frame_norms = 0.0, aggregates = 0.0;
  for (const SluSample* s : data) {
    std::vector<double> total(s->features.cols(), 0.0);
    for (std::size_t t = 0; t < s->features.rows(); ++t) {
      frame_norms += norm(s->features.row(t));
      axpy(1.0, s->features.row(t), total);
    }
    frames += static_cast<double>(s->features.rows());
    aggregates += norm(total);
  }
  InputScale sc;
  sc.frame_norm = frame_norms / std::max(frames, 1.0);
  sc.aggregate_norm = 0.5 * aggregates / (static_cast<double>(data.size()) * static_cast<double>(n_primary));
  return sc;
}

/// Applies one parameter update from a minibatch gradient.
class UpdateRule {
 public:
  UpdateRule(const CapsuleConfig& cfg, const CapsuleParams& p) : cfg_(cfg) {
    if (cfg.optimizer == Optimizer::kAdam) {
      m_.assign(p.parameter_count(), 0.0);
      v_.assign(p.parameter_count(), 0.0);
    }
  }

  void operator()(CapsuleParams& p, const CapsuleGrads& g) {
    const double lr = cfg_.learning_rate;
    auto params = p.tensors();
    const std::vector<double>* grads[] = {&g.w_a, nullptr, &g.w_d, &g.b_d, &g.w_s, &g.w_route};
    if (cfg_.optimizer == Optimizer::kSgd) {
      for (std::size_t t = 0; t < params.size(); ++t) {
        if (grads[t]) {
          axpy(-lr, *grads[t], params[t]);
        } else {
          params[t][0] -= lr * g.b_a;
        }
      }
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    std::size_t pos = 0;
    for (std::size_t t = 0; t < params.size(); ++t) {
      std::span<const double> gt = grads[t] ? std::span<const double>(*grads[t]) : std::span<const double>(&g.b_a, 1);
      for (std::size_t i = 0; i < gt.size(); ++i, ++pos) {
        m_[pos] = kBeta1 * m_[pos] + (1.0 - kBeta1) * gt[i];
        v_[pos] = kBeta2 * v_[pos] + (1.0 - kBeta2) * gt[i] * gt[i];
        params[t][i] -= lr * (m_[pos] / c1) / (std::sqrt(v_[pos] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  CapsuleConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// Minibatch gradient descent on the mean margin loss, differentiating through the
/// unrolled routing iterations.
inline CapsuleParams fit(CapsuleConfig cfg, std::span<const SluSample* const> data, Rng& rng, FitLog* log = nullptr) {
  if (data.empty()) throw InvalidArgument("capsule fit: empty dataset");
  cfg.bnf_dim = data.front()->features.cols();
  for (const SluSample* s : data)
    if (s->features.cols() != cfg.bnf_dim) throw ShapeError("capsule fit: samples differ in feature dimension");
  cfg.validate();
  CapsuleParams p = init_capsule(cfg, rng, measure_input_scale(data, cfg.n_primary));
  CapsuleGrads g(p);
  UpdateRule step(cfg, p);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = cfg.batch_size;
  for (std::size_t e = 0; e < cfg.n_epochs; ++e) {
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      const double scale = 1.0 / static_cast<double>(end - b);
      g.zero();
      for (std::size_t k = b; k < end; ++k) {
        const SluSample& s = *data[order[k]];
        loss_sum += capsule_loss_and_grad(p, s.features, s.labels, &g, scale);
      }
      step(p, g);
    }
    const double mean = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(mean) || !p.all_finite())
      throw NumericError("capsule fit: non-finite loss in epoch " + std::to_string(e));
    if (log) log->epoch_loss.push_back(mean);
  }
  return p;
}

inline CapsuleParams fit(const CapsuleConfig& cfg, const std::vector<SluSample>& data, Rng& rng,
                         FitLog* log = nullptr) {
  std::vector<const SluSample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  return fit(cfg, std::span<const SluSample* const>(ptrs), rng, log);
}

/// Labels whose output capsule norm exceeds `threshold`; falls back to the
/// single largest-norm label so that a prediction is always made.
inline LabelSet labels_from_norms(std::span<const double> norms, double threshold) {
  LabelSet out;
  for (std::size_t j = 0; j < norms.size(); ++j)
    if (norms[j] > threshold) out.push_back(static_cast<int>(j));
  if (out.empty() && !norms.empty())
    out.push_back(static_cast<int>(std::max_element(norms.begin(), norms.end()) - norms.begin()));
  return out;
}

inline LabelSet predict(const CapsuleParams& p, const Matrix& f, double threshold) {
  return labels_from_norms(forward(p, f).output_norms(), threshold);
}

inline LabelSet predict(const CapsuleParams& p, const Matrix& f) { return predict(p, f, p.config.detect_threshold); }

// ---------------------------------------------------------------------------
// Serialization ("CAP1")
//
//   "CAP1" | u32 version(=1)
//   u32 bnf_dim, n_primary, d_primary, n_output, d_output, routing_iters, n_epochs, batch_size
//   u8 per_capsule_projection, u8 optimizer (0 sgd, 1 adam)
//   f64 detect_threshold, margin_plus, margin_minus, lambda_neg, learning_rate, route_init_std
//   f64 w_a[bnf_dim], b_a, w_d[n_primary*bnf_dim], b_d[n_primary], w_s[...], w_route[...]
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_capsule(const CapsuleParams& p) {
  const auto& c = p.config;
  ByteWriter w;
  w.magic("CAP1");
  w.u32(1);
  for (std::size_t v : {c.bnf_dim, c.n_primary, c.d_primary, c.n_output, c.d_output, c.routing_iters, c.n_epochs,
                        c.batch_size})
    w.u32(static_cast<std::uint32_t>(v));
  w.u8(c.per_capsule_projection ? 1 : 0);
  w.u8(c.optimizer == Optimizer::kAdam ? 1 : 0);
  for (double v : {c.detect_threshold, c.margin_plus, c.margin_minus, c.lambda_neg, c.learning_rate, c.route_init_std})
    w.f64(v);
  for (auto t : const_cast<CapsuleParams&>(p).tensors()) w.f64s(t);
  return w.buffer();
}

inline CapsuleParams decode_capsule(std::span<const std::uint8_t> bytes, const std::string& context = "capsule") {
  ByteReader r(bytes, context);
  r.expect_magic("CAP1");
  if (const auto version = r.u32(); version != 1)
    throw FormatError(context + ": unsupported version " + std::to_string(version));
  CapsuleConfig c;
  for (std::size_t* f : {&c.bnf_dim, &c.n_primary, &c.d_primary, &c.n_output, &c.d_output, &c.routing_iters,
                         &c.n_epochs, &c.batch_size})
    *f = r.u32();
  c.per_capsule_projection = r.u8() != 0;
  switch (r.u8()) {
    case 0: c.optimizer = Optimizer::kSgd; break;
    case 1: c.optimizer = Optimizer::kAdam; break;
    default: throw FormatError(context + ": unknown optimizer code");
  }
  for (double* f : {&c.detect_threshold, &c.margin_plus, &c.margin_minus, &c.lambda_neg, &c.learning_rate,
                    &c.route_init_std})
    *f = r.f64();
  CapsuleParams p;
  try {
    p = zero_capsule_params(c);
  } catch (const InvalidArgument& e) {
    throw FormatError(context + ": invalid config block: " + e.what());
  }
  for (auto t : p.tensors()) r.f64s(t);
  if (r.remaining() != 0) throw FormatError(context + ": trailing bytes");
  return p;
}

inline void save_capsule(const CapsuleParams& p, const std::filesystem::path& path) {
  write_file_bytes(path, encode_capsule(p));
}

inline CapsuleParams load_capsule(const std::filesystem::path& path) {
  return decode_capsule(read_file_bytes(path), path.string());
}

}  // namespace dysslu
