#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dysslu/binary_io.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/error.hpp"
#include "dysslu/formats.hpp"
#include "dysslu/matrix.hpp"
#include "dysslu/nn.hpp"
#include "dysslu/rng.hpp"

namespace dysslu {

/// Temporal context of one TDNN layer: a centred kernel of `kernel`
/// taps spaced `dilation` frames apart.
struct LayerContext {
  std::size_t kernel = 3;
  std::size_t dilation = 1;

  friend bool operator==(const LayerContext&, const LayerContext&) = default;
};

inline std::vector<LayerContext> default_context(std::size_t n_layers) {
  switch (n_layers) {
    case 0: return {};
    case 1: return {{5, 3}};
    case 2: return {{3, 2}, {3, 3}};
    case 3: return {{3, 1}, {3, 2}, {3, 3}};
    default: {
      std::vector<LayerContext> ctx = {{3, 1}, {3, 1}, {3, 2}, {3, 3}};
      ctx.resize(n_layers, LayerContext{1, 1});
      return ctx;
    }
  }
}

struct EncoderConfig {
  std::size_t input_dim = 24;
  std::size_t n_layers = 6;
  std::size_t hidden_dim = 64;
  std::size_t bnf_dim = 32;
  std::vector<LayerContext> context = default_context(6);
  std::size_t n_phone_targets = 20;
  double lr_initial = 2.5e-4;
  double lr_final = 2.5e-5;
  std::size_t n_epochs = 20;
  /// 0 selects n_epochs / 10 (at least one epoch).
  std::size_t finetune_epochs = 0;
  std::size_t batch_size = 8;
  /// Width of the optional learned per-speaker embedding appended to each
  /// input frame; 0 disables it.
  std::size_t speaker_embed_dim = 0;
  /// Fraction of normal-speech utterances in the finetuning mix.
  double normal_mix_fraction = 0.5;
  std::vector<double> speed_ratios = {0.9, 1.0, 1.1};

  std::size_t layer_input(std::size_t l) const noexcept {
    return l == 0 ? input_dim + speaker_embed_dim : hidden_dim;
  }
  std::size_t layer_output(std::size_t l) const noexcept { return l + 1 == n_layers ? bnf_dim : hidden_dim; }

  std::size_t receptive_field() const noexcept {
    std::size_t rf = 0;
    for (const auto& c : context) rf += (c.kernel - 1) * c.dilation;
    return rf;
  }

  std::size_t effective_finetune_epochs() const noexcept {
    return finetune_epochs ? finetune_epochs : std::max<std::size_t>(1, n_epochs / 10);
  }

  void validate() const {
    if (n_layers < 1) throw InvalidArgument("encoder: n_layers must be >= 1");
    if (context.size() != n_layers)
      throw InvalidArgument("encoder: context has " + std::to_string(context.size()) + " entries for " +
                            std::to_string(n_layers) + " layers");
    for (const auto& c : context)
      if (c.kernel < 1 || c.kernel % 2 == 0 || c.dilation < 1)
        throw InvalidArgument("encoder: kernels must be odd and dilations >= 1");
    if (receptive_field() < 9)
      throw InvalidArgument("encoder: receptive field " + std::to_string(receptive_field()) + " < 9 frames");
    if (input_dim < 1 || hidden_dim < 1 || bnf_dim < 1 || n_phone_targets < 2)
      throw InvalidArgument("encoder: dimensions must be positive (>= 2 phone targets)");
    if (batch_size < 1) throw InvalidArgument("encoder: batch_size must be >= 1");
    if (!(normal_mix_fraction >= 0.0 && normal_mix_fraction < 1.0))
      throw InvalidArgument("encoder: normal_mix_fraction must lie in [0, 1)");
    if (speed_ratios.empty()) throw InvalidArgument("encoder: speed_ratios must not be empty");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// One dilated temporal convolution. Weights are stored [tap][in][out].
struct ConvLayer {
  std::size_t kernel = 1;
  std::size_t dilation = 1;
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  std::span<const double> tap_row(std::size_t k, std::size_t i) const noexcept {
    return {weight.data() + (k * in + i) * out, out};
  }
  long offset(std::size_t k) const noexcept {
    return (static_cast<long>(k) - static_cast<long>(kernel - 1) / 2) * static_cast<long>(dilation);
  }

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<ConvLayer> layers;
  std::vector<double> out_weight;  ///< [bnf_dim][n_phone_targets]
  std::vector<double> out_bias;
  std::vector<std::string> speaker_ids;
  std::vector<double> speaker_embeddings;  ///< [speaker][speaker_embed_dim]
  bool frozen = false;

  /// Mutable views of every trainable tensor in a fixed order.
  std::vector<std::span<double>> tensors() {
    std::vector<std::span<double>> t;
    for (auto& l : layers) {
      t.emplace_back(l.weight);
      t.emplace_back(l.bias);
    }
    t.emplace_back(out_weight);
    t.emplace_back(out_bias);
    t.emplace_back(speaker_embeddings);
    return t;
  }

  std::size_t parameter_count() const {
    std::size_t n = out_weight.size() + out_bias.size() + speaker_embeddings.size();
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    auto self = const_cast<EncoderParams*>(this)->tensors();
    for (auto s : self) flat.insert(flat.end(), s.begin(), s.end());
    return flat;
  }

  void assign(std::span<const double> flat) {
    std::size_t pos = 0;
    for (auto s : tensors()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), s.size(), s.begin());
      pos += s.size();
    }
  }

  std::optional<std::size_t> speaker_index(std::string_view id) const {
    for (std::size_t i = 0; i < speaker_ids.size(); ++i)
      if (speaker_ids[i] == id) return i;
    return std::nullopt;
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// He-initialized weights, zero biases.
inline EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams p;
  p.config = cfg;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    ConvLayer layer;
    layer.kernel = cfg.context[l].kernel;
    layer.dilation = cfg.context[l].dilation;
    layer.in = cfg.layer_input(l);
    layer.out = cfg.layer_output(l);
    const double stddev = std::sqrt(2.0 / static_cast<double>(layer.kernel * layer.in));
    layer.weight.resize(layer.kernel * layer.in * layer.out);
    for (double& w : layer.weight) w = rng.normal() * stddev;
    layer.bias.assign(layer.out, 0.0);
    p.layers.push_back(std::move(layer));
  }
  const double out_std = std::sqrt(1.0 / static_cast<double>(cfg.bnf_dim));
  p.out_weight.resize(cfg.bnf_dim * cfg.n_phone_targets);
  for (double& w : p.out_weight) w = rng.normal() * out_std;
  p.out_bias.assign(cfg.n_phone_targets, 0.0);
  return p;
}

/// Registers speakers in the embedding table (no-op when embeddings are off).
inline void add_speakers(EncoderParams& p, std::span<const SpeakerProfile> speakers, Rng& rng) {
  const std::size_t e = p.config.speaker_embed_dim;
  if (e == 0) return;
  for (const auto& s : speakers) {
    if (p.speaker_index(s.speaker_id)) continue;
    p.speaker_ids.push_back(s.speaker_id);
    for (std::size_t k = 0; k < e; ++k) p.speaker_embeddings.push_back(0.01 * rng.normal());
  }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Per-utterance activations kept for backpropagation.
struct EncoderTrace {
  std::vector<Matrix> acts;  ///< acts[0] = input, acts[l+1] = ReLU output of layer l
  Matrix logits;
  std::optional<std::size_t> speaker;

  const Matrix& bnf() const { return acts.back(); }
};

namespace detail {

inline void conv_forward(const ConvLayer& layer, const Matrix& x, Matrix& y) {
  const std::size_t t_len = x.rows();
  y = Matrix(t_len, layer.out);
  const long last = static_cast<long>(t_len) - 1;
  for (std::size_t t = 0; t < t_len; ++t) {
    auto yt = y.row(t);
    std::copy(layer.bias.begin(), layer.bias.end(), yt.begin());
    for (std::size_t k = 0; k < layer.kernel; ++k) {
      const long src = std::clamp(static_cast<long>(t) + layer.offset(k), 0L, last);
      auto xs = x.row(static_cast<std::size_t>(src));
      for (std::size_t i = 0; i < layer.in; ++i) {
        const double a = xs[i];
        if (a != 0.0) axpy(a, layer.tap_row(k, i), yt);
      }
    }
    for (double& v : yt) v = v > 0.0 ? v : 0.0;
  }
}

/// grad_y is dL/d(ReLU output) and is turned into dL/d(pre-activation) in place.
inline void conv_backward(const ConvLayer& layer, const Matrix& x, const Matrix& y, Matrix& grad_y,
                          std::span<double> grad_w, std::span<double> grad_b, Matrix* grad_x) {
  const std::size_t t_len = x.rows();
  const long last = static_cast<long>(t_len) - 1;
  for (std::size_t t = 0; t < t_len; ++t) {
    auto g = grad_y.row(t);
    auto yt = y.row(t);
    bool any = false;
    for (std::size_t o = 0; o < layer.out; ++o) {
      if (yt[o] <= 0.0) g[o] = 0.0;
      any = any || g[o] != 0.0;
    }
    if (!any) continue;
    axpy(1.0, g, grad_b);
    for (std::size_t k = 0; k < layer.kernel; ++k) {
      const auto src = static_cast<std::size_t>(std::clamp(static_cast<long>(t) + layer.offset(k), 0L, last));
      auto xs = x.row(src);
      for (std::size_t i = 0; i < layer.in; ++i) {
        const double a = xs[i];
        std::span<double> gw(grad_w.data() + (k * layer.in + i) * layer.out, layer.out);
        if (a != 0.0) axpy(a, g, gw);
        if (grad_x) (*grad_x)(src, i) += dot(layer.tap_row(k, i), g);
      }
    }
  }
}

}  // namespace detail

inline Matrix assemble_input(const EncoderParams& p, const Matrix& features, std::optional<std::size_t> speaker) {
  const std::size_t d = p.config.input_dim;
  if (features.cols() != d) {
    throw ShapeError("encoder: expected feature dimension " + std::to_string(d) + ", got " +
                     std::to_string(features.cols()));
  }
  const std::size_t e = p.config.speaker_embed_dim;
  if (e == 0) return features;
  Matrix x(features.rows(), d + e);
  for (std::size_t t = 0; t < features.rows(); ++t) {
    auto src = features.row(t);
    auto dst = x.row(t);
    std::copy(src.begin(), src.end(), dst.begin());
    if (speaker)
      std::copy_n(p.speaker_embeddings.begin() + static_cast<std::ptrdiff_t>(*speaker * e), e,
                  dst.begin() + static_cast<std::ptrdiff_t>(d));
  }
  return x;
}

inline EncoderTrace encoder_trace(const EncoderParams& p, const Matrix& features,
                                  std::string_view speaker_id = {}) {
  EncoderTrace tr;
  tr.speaker = speaker_id.empty() ? std::nullopt : p.speaker_index(speaker_id);
  if (features.rows() == 0) throw ShapeError("encoder: empty feature sequence");
  tr.acts.resize(p.layers.size() + 1);
  tr.acts[0] = assemble_input(p, features, tr.speaker);
  for (std::size_t l = 0; l < p.layers.size(); ++l) detail::conv_forward(p.layers[l], tr.acts[l], tr.acts[l + 1]);
  const Matrix& bnf = tr.acts.back();
  const std::size_t n_out = p.config.n_phone_targets;
  tr.logits = Matrix(bnf.rows(), n_out);
  for (std::size_t t = 0; t < bnf.rows(); ++t) {
    auto lt = tr.logits.row(t);
    std::copy(p.out_bias.begin(), p.out_bias.end(), lt.begin());
    auto bt = bnf.row(t);
    for (std::size_t j = 0; j < p.config.bnf_dim; ++j)
      if (bt[j] != 0.0) axpy(bt[j], std::span<const double>(p.out_weight.data() + j * n_out, n_out), lt);
  }
  return tr;
}

struct EncoderOutput {
  Matrix bnf;           ///< T x bnf_dim
  Matrix phone_logits;  ///< T x n_phone_targets
};

/// Bottleneck features and phone logits of one utterance (same T as the input).
inline EncoderOutput encoder_forward(const EncoderParams& p, const Matrix& features,
                                     std::string_view speaker_id = {}) {
  EncoderTrace tr = encoder_trace(p, features, speaker_id);
  return {std::move(tr.acts.back()), std::move(tr.logits)};
}

/// Gradient buffers shaped like EncoderParams::tensors().
struct EncoderGrads {
  std::vector<std::vector<double>> tensors;

  explicit EncoderGrads(EncoderParams& p) {
    for (auto t : p.tensors()) tensors.emplace_back(t.size(), 0.0);
  }
  void zero() {
    for (auto& t : tensors) std::fill(t.begin(), t.end(), 0.0);
  }
};

/// Summed frame cross entropy of one utterance; accumulates its gradient.
inline double encoder_loss_and_grad(const EncoderParams& p, const Utterance& u, EncoderGrads* grads,
                                    std::size_t* correct = nullptr) {
  EncoderTrace tr = encoder_trace(p, u.features, u.speaker_id);
  const std::size_t t_len = u.frames();
  const std::size_t n_out = p.config.n_phone_targets;
  const std::size_t bnf_dim = p.config.bnf_dim;
  Matrix g_logits(t_len, n_out);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    const auto target = static_cast<std::size_t>(u.phone_alignment[t]);
    if (correct) {
      auto lt = tr.logits.row(t);
      if (static_cast<std::size_t>(std::max_element(lt.begin(), lt.end()) - lt.begin()) == target) ++*correct;
    }
    loss += cross_entropy_with_grad(tr.logits.row(t), target, g_logits.row(t));
  }
  if (!grads) return loss;

  const std::size_t n_layers = p.layers.size();
  auto& gt = grads->tensors;
  auto& g_out_w = gt[2 * n_layers];
  auto& g_out_b = gt[2 * n_layers + 1];
  const Matrix& bnf = tr.acts.back();
  Matrix g_act(t_len, bnf_dim);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto gl = g_logits.row(t);
    axpy(1.0, gl, g_out_b);
    auto bt = bnf.row(t);
    auto ga = g_act.row(t);
    for (std::size_t j = 0; j < bnf_dim; ++j) {
      std::span<const double> wj(p.out_weight.data() + j * n_out, n_out);
      if (bt[j] != 0.0) axpy(bt[j], gl, std::span<double>(g_out_w.data() + j * n_out, n_out));
      ga[j] = dot(wj, gl);
    }
  }
  const bool need_input_grad = tr.speaker.has_value();
  for (std::size_t l = n_layers; l-- > 0;) {
    const bool want_x = l > 0 || need_input_grad;
    Matrix g_x;
    if (want_x) g_x = Matrix(t_len, p.layers[l].in);
    detail::conv_backward(p.layers[l], tr.acts[l], tr.acts[l + 1], g_act, gt[2 * l], gt[2 * l + 1],
                          want_x ? &g_x : nullptr);
    g_act = std::move(g_x);
  }
  if (need_input_grad) {
    const std::size_t d = p.config.input_dim;
    const std::size_t e = p.config.speaker_embed_dim;
    auto& g_emb = gt[2 * n_layers + 2];
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = 0; k < e; ++k) g_emb[*tr.speaker * e + k] += g_act(t, d + k);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLog {
  std::vector<double> epoch_loss;      ///< mean per-frame cross entropy seen during the epoch
  std::vector<double> epoch_accuracy;  ///< frame accuracy seen during the epoch
};

inline void check_alignments(std::span<const Utterance> utts, std::size_t n_targets, const std::string& what) {
  if (utts.empty()) throw InvalidArgument(what + ": no utterances");
  for (const auto& u : utts) {
    if (u.phone_alignment.empty() || u.phone_alignment.size() != u.frames())
      throw InvalidArgument(what + ": utterance " + u.utt_id + " has no usable phone alignment");
    for (int ph : u.phone_alignment)
      if (ph < 0 || static_cast<std::size_t>(ph) >= n_targets)
        throw InvalidArgument(what + ": utterance " + u.utt_id + " aligns to unknown phone " + std::to_string(ph));
  }
}

/// Mini-batch SGD on the frame cross-entropy summed over each batch,
/// with the learning rate decayed linearly from lr_initial to lr_final
/// over all updates. Batches always accumulate in a fixed order.
inline void train_encoder(EncoderParams& p, std::span<const Utterance> data, std::size_t epochs, Rng& rng,
                          TrainLog* log = nullptr) {
  if (p.frozen) throw FrozenError("encoder parameters are frozen; training is not allowed");
  check_alignments(data, p.config.n_phone_targets, "encoder training");
  const std::size_t batch = p.config.batch_size;
  const std::size_t steps_per_epoch = (data.size() + batch - 1) / batch;
  const std::size_t total = std::max<std::size_t>(1, epochs * steps_per_epoch);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  EncoderGrads grads(p);
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t frames = 0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      grads.zero();
      const std::size_t end = std::min(data.size(), (b + 1) * batch);
      for (std::size_t i = b * batch; i < end; ++i) {
        const Utterance& u = data[order[i]];
        loss_sum += encoder_loss_and_grad(p, u, &grads, &correct);
        frames += u.frames();
      }
      const double frac = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
      const double lr = p.config.lr_initial + (p.config.lr_final - p.config.lr_initial) * frac;
      auto params = p.tensors();
      for (std::size_t t = 0; t < params.size(); ++t) axpy(-lr, grads.tensors[t], params[t]);
    }
    const double mean_loss = loss_sum / static_cast<double>(frames);
    if (!std::isfinite(mean_loss)) throw NumericError("encoder training diverged in epoch " + std::to_string(e));
    if (log) {
      log->epoch_loss.push_back(mean_loss);
      log->epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(frames));
    }
  }
}

/// First training stage: random init, then training on the speed-perturbed corpus.
inline EncoderParams pretrain(const EncoderConfig& cfg, const Corpus& corpus, Rng& rng, TrainLog* log = nullptr) {
  cfg.validate();
  check_alignments(corpus.utterances, cfg.n_phone_targets, "pretrain corpus " + corpus.name);
  EncoderParams p = init_encoder(cfg, rng);
  add_speakers(p, corpus.speakers, rng);
  const auto augmented = speed_augment(corpus.utterances, cfg.speed_ratios);
  train_encoder(p, augmented, cfg.n_epochs, rng, log);
  return p;
}

/// Second stage: joint training on the IS-filtered impaired corpus mixed
/// with a slice of the normal corpus. `is_min` keeps speakers with IS > is_min.
inline EncoderParams finetune(const EncoderParams& init, const Corpus& normal, const Corpus& dysarthric,
                              std::optional<double> is_min, const EncoderConfig& cfg, Rng& rng,
                              TrainLog* log = nullptr) {
  if (init.frozen) throw FrozenError("finetune: initial encoder is frozen");
  const Corpus filtered = is_min ? filter_by_intelligibility(dysarthric, *is_min) : dysarthric;
  if (filtered.utterances.empty()) {
    double lo = kMaxIntelligibility, hi = kMinIntelligibility;
    for (const auto& s : dysarthric.speakers) {
      lo = std::min(lo, s.intelligibility_score);
      hi = std::max(hi, s.intelligibility_score);
    }
    throw InvalidArgument("finetune: no impaired utterances with IS > " + std::to_string(is_min.value_or(0.0)) +
                          " (corpus IS range present: [" + std::to_string(lo) + ", " + std::to_string(hi) + "])");
  }
  EncoderParams p = init;
  p.config.lr_initial = cfg.lr_initial;
  p.config.lr_final = cfg.lr_final;
  p.config.batch_size = cfg.batch_size;
  add_speakers(p, filtered.speakers, rng);

  const double f = cfg.normal_mix_fraction;
  const auto n_dys = filtered.utterances.size();
  const auto want_normal = static_cast<std::size_t>(std::llround(static_cast<double>(n_dys) * f / (1.0 - f)));
  std::vector<std::size_t> idx(normal.utterances.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(std::span(idx));
  idx.resize(std::min(want_normal, idx.size()));
  std::sort(idx.begin(), idx.end());

  std::vector<Utterance> mix = filtered.utterances;
  for (std::size_t i : idx) mix.push_back(normal.utterances[i]);
  const auto augmented = speed_augment(mix, cfg.speed_ratios);
  train_encoder(p, augmented, cfg.effective_finetune_epochs(), rng, log);
  return p;
}

inline EncoderParams freeze(EncoderParams p) {
  p.frozen = true;
  return p;
}

/// Bottleneck features of every utterance, rounded to archive (32-bit) precision.
inline std::vector<FeatureRecord> extract_bnf(const EncoderParams& p, const Corpus& corpus) {
  if (!p.frozen) throw FrozenError("extract_bnf: encoder must be frozen before feature extraction");
  std::vector<FeatureRecord> out;
  out.reserve(corpus.utterances.size());
  for (const auto& u : corpus.utterances) {
    Matrix bnf = encoder_forward(p, u.features, u.speaker_id).bnf;
    for (double& x : bnf.data()) x = static_cast<double>(static_cast<float>(x));
    out.push_back({u.utt_id, std::move(bnf)});
  }
  return out;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto r = m.row(t);
    out[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

struct FrameErrors {
  std::size_t errors = 0;
  std::size_t frames = 0;
  double rate() const noexcept { return frames ? static_cast<double>(errors) / static_cast<double>(frames) : 0.0; }
};

inline FrameErrors count_frame_errors(const EncoderParams& p, std::span<const Utterance> utts) {
  FrameErrors fe;
  for (const auto& u : utts) {
    const auto pred = argmax_rows(encoder_forward(p, u.features, u.speaker_id).phone_logits);
    for (std::size_t t = 0; t < pred.size(); ++t) fe.errors += pred[t] != u.phone_alignment[t];
    fe.frames += pred.size();
  }
  return fe;
}

/// Fraction of frames whose argmax phone logit differs from the alignment.
inline double frame_error_rate(const EncoderParams& p, const Corpus& corpus) {
  return count_frame_errors(p, corpus.utterances).rate();
}

// ---------------------------------------------------------------------------
// Variants compared by the experiments
// ---------------------------------------------------------------------------

enum class EncoderVariant { kNone, kNormalOnly, kFinetuneFull, kFinetuneIs60, kFinetuneIs70 };

inline constexpr EncoderVariant kAllVariants[] = {EncoderVariant::kNone, EncoderVariant::kNormalOnly,
                                                  EncoderVariant::kFinetuneFull, EncoderVariant::kFinetuneIs60,
                                                  EncoderVariant::kFinetuneIs70};

inline std::string variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::kNone: return "none";
    case EncoderVariant::kNormalOnly: return "normal_only";
    case EncoderVariant::kFinetuneFull: return "finetune_full";
    case EncoderVariant::kFinetuneIs60: return "finetune_is60";
    case EncoderVariant::kFinetuneIs70: return "finetune_is70";
  }
  return "?";
}

inline EncoderVariant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (variant_name(v) == name) return v;
  throw InvalidArgument("unknown encoder variant \"" + std::string(name) + "\"");
}

/// IS threshold of a finetuned variant (nullopt = whole impaired corpus).
inline std::optional<double> variant_is_min(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::kFinetuneIs60: return 60.0;
    case EncoderVariant::kFinetuneIs70: return 70.0;
    default: return std::nullopt;
  }
}

inline bool is_finetuned(EncoderVariant v) {
  return v == EncoderVariant::kFinetuneFull || v == EncoderVariant::kFinetuneIs60 ||
         v == EncoderVariant::kFinetuneIs70;
}

// ---------------------------------------------------------------------------
// Serialization ("ENC1")
//
//   "ENC1" | u32 version(=1)
//   u32 input_dim, n_layers, hidden_dim, bnf_dim, n_phone_targets,
//       n_epochs, finetune_epochs, batch_size, speaker_embed_dim
//   f64 lr_initial, lr_final, normal_mix_fraction
//   n_layers x (u32 kernel, u32 dilation)
//   u32 n_speed_ratios, f64 each
//   u8 frozen
//   per layer: f64 weight[kernel*in*out], f64 bias[out]
//   f64 out_weight[bnf_dim*n_phone_targets], f64 out_bias[n_phone_targets]
//   u32 n_speakers, per speaker: u16 id_len, id, f64 embedding[speaker_embed_dim]
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_encoder(const EncoderParams& p) {
  const auto& c = p.config;
  ByteWriter w;
  w.magic("ENC1");
  w.u32(1);
  for (std::size_t v : {c.input_dim, c.n_layers, c.hidden_dim, c.bnf_dim, c.n_phone_targets, c.n_epochs,
                        c.finetune_epochs, c.batch_size, c.speaker_embed_dim})
    w.u32(static_cast<std::uint32_t>(v));
  w.f64(c.lr_initial);
  w.f64(c.lr_final);
  w.f64(c.normal_mix_fraction);
  for (const auto& ctx : c.context) {
    w.u32(static_cast<std::uint32_t>(ctx.kernel));
    w.u32(static_cast<std::uint32_t>(ctx.dilation));
  }
  w.u32(static_cast<std::uint32_t>(c.speed_ratios.size()));
  w.f64s(c.speed_ratios);
  w.u8(p.frozen ? 1 : 0);
  for (const auto& l : p.layers) {
    w.f64s(l.weight);
    w.f64s(l.bias);
  }
  w.f64s(p.out_weight);
  w.f64s(p.out_bias);
  w.u32(static_cast<std::uint32_t>(p.speaker_ids.size()));
  for (std::size_t s = 0; s < p.speaker_ids.size(); ++s) {
    w.str16(p.speaker_ids[s]);
    w.f64s(std::span(p.speaker_embeddings).subspan(s * c.speaker_embed_dim, c.speaker_embed_dim));
  }
  return w.buffer();
}

inline EncoderParams decode_encoder(std::span<const std::uint8_t> bytes, const std::string& context = "encoder") {
  ByteReader r(bytes, context);
  r.expect_magic("ENC1");
  if (const auto version = r.u32(); version != 1)
    throw FormatError(context + ": unsupported version " + std::to_string(version));
  EncoderConfig c;
  std::size_t* fields[] = {&c.input_dim, &c.n_layers, &c.hidden_dim, &c.bnf_dim, &c.n_phone_targets,
                           &c.n_epochs, &c.finetune_epochs, &c.batch_size, &c.speaker_embed_dim};
  for (auto* f : fields) *f = r.u32();
  c.lr_initial = r.f64();
  c.lr_final = r.f64();
  c.normal_mix_fraction = r.f64();
  if (c.n_layers > 4096) throw FormatError(context + ": implausible layer count");
  c.context.resize(c.n_layers);
  for (auto& ctx : c.context) {
    ctx.kernel = r.u32();
    ctx.dilation = r.u32();
  }
  c.speed_ratios.resize(r.u32());
  r.f64s(c.speed_ratios);
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(context + ": invalid config block: " + e.what());
  }
  EncoderParams p;
  p.config = c;
  p.frozen = r.u8() != 0;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    ConvLayer layer;
    layer.kernel = c.context[l].kernel;
    layer.dilation = c.context[l].dilation;
    layer.in = c.layer_input(l);
    layer.out = c.layer_output(l);
    layer.weight.resize(layer.kernel * layer.in * layer.out);
    layer.bias.resize(layer.out);
    r.f64s(layer.weight);
    r.f64s(layer.bias);
    p.layers.push_back(std::move(layer));
  }
  p.out_weight.resize(c.bnf_dim * c.n_phone_targets);
  p.out_bias.resize(c.n_phone_targets);
  r.f64s(p.out_weight);
  r.f64s(p.out_bias);
  const std::uint32_t n_spk = r.u32();
  for (std::uint32_t s = 0; s < n_spk; ++s) {
    p.speaker_ids.push_back(r.str16());
    std::vector<double> emb(c.speaker_embed_dim);
    r.f64s(emb);
    p.speaker_embeddings.insert(p.speaker_embeddings.end(), emb.begin(), emb.end());
  }
  if (r.remaining() != 0) throw FormatError(context + ": trailing bytes");
  return p;
}

inline void save_encoder(const EncoderParams& p, const std::filesystem::path& path) {
  write_file_bytes(path, encode_encoder(p));
}

inline EncoderParams load_encoder(const std::filesystem::path& path) {
  return decode_encoder(read_file_bytes(path), path.string());
}

}  // namespace dysslu
