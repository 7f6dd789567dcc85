#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dysslu/capsule.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/encoder.hpp"
#include "dysslu/error.hpp"
#include "dysslu/formats.hpp"
#include "dysslu/rng.hpp"

namespace dysslu {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct SetCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Pooled true/false positives and false negatives over all utterances.
inline SetCounts pooled_counts(std::span<const LabelSet> predictions, std::span<const LabelSet> gold) {
  if (predictions.size() != gold.size())
    throw InvalidArgument("micro_f1: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(gold.size()) + " references");
  SetCounts c;
  for (std::size_t u = 0; u < gold.size(); ++u) {
    LabelSet p = predictions[u], g = gold[u];
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    std::size_t i = 0, j = 0;
    while (i < p.size() && j < g.size()) {
      if (p[i] == g[j]) {
        ++c.tp, ++i, ++j;
      } else if (p[i] < g[j]) {
        ++c.fp, ++i;
      } else {
        ++c.fn, ++j;
      }
    }
    c.fp += p.size() - i;
    c.fn += g.size() - j;
  }
  return c;
}

/// 2TP / (2TP + FP + FN); 1 when both sides are entirely empty.
inline double micro_f1(std::span<const LabelSet> predictions, std::span<const LabelSet> gold) {
  const SetCounts c = pooled_counts(predictions, gold);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

/// Fraction of utterances whose predicted set equals the reference set.
inline double exact_match_accuracy(std::span<const LabelSet> predictions, std::span<const LabelSet> gold) {
  if (predictions.size() != gold.size()) throw InvalidArgument("exact_match_accuracy: length mismatch");
  if (gold.empty()) return 1.0;
  std::size_t hits = 0;
  for (std::size_t u = 0; u < gold.size(); ++u) {
    LabelSet p = predictions[u], g = gold[u];
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    hits += p == g;
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

// ---------------------------------------------------------------------------
// Data and models
// ---------------------------------------------------------------------------

/// One task speaker's utterances as decoder inputs.
struct SpeakerData {
  std::string speaker_id;
  double is_score = 100.0;
  std::vector<SluSample> samples;
  std::vector<int> command_ids;  ///< parallel to samples
};

/// Groups a task corpus by speaker, pairing each utterance with its features
/// (typically BNFs) looked up by utterance id.
inline std::vector<SpeakerData> speaker_datasets(const Corpus& task, std::span<const FeatureRecord> features) {
  std::map<std::string, const Matrix*> by_id;
  for (const auto& r : features) by_id[r.id] = &r.features;
  std::vector<SpeakerData> out;
  std::map<std::string, std::size_t> slot;
  for (const auto& sp : task.speakers) {
    slot[sp.speaker_id] = out.size();
    out.push_back({sp.speaker_id, sp.intelligibility_score, {}, {}});
  }
  for (const auto& u : task.utterances) {
    auto it = by_id.find(u.utt_id);
    if (it == by_id.end()) throw ProtocolError("no features for utterance " + u.utt_id);
    auto& sd = out.at(slot.at(u.speaker_id));
    sd.samples.push_back({*it->second, u.slot_labels});
    sd.command_ids.push_back(u.command_id.value_or(-1));
  }
  return out;
}

class SluModel {
 public:
  virtual ~SluModel() = default;
  virtual LabelSet predict(const Matrix& features) const = 0;
};

/// Trains a fresh model on the given samples.
using ModelFactory = std::function<std::unique_ptr<SluModel>(std::span<const SluSample* const>, Rng&)>;

class CapsuleModel final : public SluModel {
 public:
  explicit CapsuleModel(CapsuleParams p) : params_(std::move(p)) {}
  LabelSet predict(const Matrix& features) const override { return dysslu::predict(params_, features); }
  const CapsuleParams& params() const noexcept { return params_; }

 private:
  CapsuleParams params_;
};

inline ModelFactory capsule_factory(CapsuleConfig cfg) {
  return [cfg](std::span<const SluSample* const> train, Rng& rng) -> std::unique_ptr<SluModel> {
    return std::make_unique<CapsuleModel>(fit(cfg, train, rng));
  };
}

struct Evaluation {
  double f1 = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate(const SluModel& model, std::span<const SluSample* const> test) {
  std::vector<LabelSet> pred, gold;
  pred.reserve(test.size());
  gold.reserve(test.size());
  for (const SluSample* s : test) {
    pred.push_back(model.predict(s->features));
    gold.push_back(s->labels);
  }
  return {micro_f1(pred, gold), exact_match_accuracy(pred, gold)};
}

/// Mean and sample standard deviation (0 for fewer than two values).
inline std::pair<double, double> mean_and_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

struct CurvePoint {
  std::size_t k = 0;         ///< training blocks
  double n_train = 0.0;      ///< mean training-set size in utterances
  double mean_f1 = 0.0;
  double std_f1 = 0.0;
  double mean_accuracy = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

/// One train/test partition of a speaker's utterances (indices into samples).
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Splits for one fold: a fresh shuffle into `n_blocks` blocks, then for
/// k = 1..n_blocks-1 the first k blocks train and the rest test.
inline std::vector<Split> curve_splits(std::size_t n_utts, std::size_t n_blocks, Rng& rng) {
  std::vector<std::size_t> idx(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) idx[i] = i;
  const auto blocks = block_split(idx, n_blocks, rng);
  std::vector<Split> out;
  for (std::size_t k = 1; k < n_blocks; ++k) {
    Split s;
    for (std::size_t b = 0; b < n_blocks; ++b) {
      auto& dst = b < k ? s.train : s.test;
      dst.insert(dst.end(), blocks[b].begin(), blocks[b].end());
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<const SluSample*> gather(const SpeakerData& sd, std::span<const std::size_t> idx) {
  std::vector<const SluSample*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&sd.samples[i]);
  return out;
}

/// Per-speaker learning curve. Each fold reshuffles with its own derived
/// seed and every (fold, k) cell trains a fresh model with its own derived
/// seed, so two calls that start from equal rng states use identical splits
/// and model initializations. Returns nullopt (with a warning) when the
/// speaker has fewer utterances than blocks.
inline std::optional<std::vector<CurvePoint>> learning_curve(const SpeakerData& sd, const ModelFactory& factory,
                                                             std::size_t n_blocks, std::size_t n_folds, Rng& rng,
                                                             std::vector<std::string>* warnings = nullptr) {
  if (n_blocks < 2) throw InvalidArgument("learning_curve: n_blocks must be >= 2");
  if (n_folds < 1) throw InvalidArgument("learning_curve: n_folds must be >= 1");
  const std::uint64_t base = rng.next_u64();
  if (sd.samples.size() < n_blocks) {
    if (warnings)
      warnings->push_back("skipping speaker " + sd.speaker_id + " in learning curve: " +
                          std::to_string(sd.samples.size()) + " utterances for " + std::to_string(n_blocks) +
                          " blocks");
    return std::nullopt;
  }
  const std::size_t n_points = n_blocks - 1;
  std::vector<std::vector<double>> f1(n_points), acc(n_points), sizes(n_points);
  for (std::size_t fold = 0; fold < n_folds; ++fold) {
    Rng split_rng(Rng::derive(base, 2 * fold));
    const auto splits = curve_splits(sd.samples.size(), n_blocks, split_rng);
    for (std::size_t k = 0; k < n_points; ++k) {
      Rng model_rng(Rng::derive(Rng::derive(base, 2 * fold + 1), k));
      const auto train = gather(sd, splits[k].train);
      const auto test = gather(sd, splits[k].test);
      const auto model = factory(train, model_rng);
      const Evaluation ev = evaluate(*model, test);
      f1[k].push_back(ev.f1);
      acc[k].push_back(ev.accuracy);
      sizes[k].push_back(static_cast<double>(train.size()));
    }
  }
  std::vector<CurvePoint> curve;
  for (std::size_t k = 0; k < n_points; ++k) {
    const auto [m, s] = mean_and_std(f1[k]);
    curve.push_back({k + 1, mean_and_std(sizes[k]).first, m, s, mean_and_std(acc[k]).first});
  }
  return curve;
}

/// Pointwise average of equally long curves; std_f1 is the spread of the
/// per-curve means.
inline std::vector<CurvePoint> average_curves(std::span<const std::vector<CurvePoint>> curves) {
  if (curves.empty()) return {};
  const std::size_t n = curves.front().size();
  for (const auto& c : curves)
    if (c.size() != n) throw InvalidArgument("average_curves: curves differ in length");
  std::vector<CurvePoint> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> f1, acc, size;
    for (const auto& c : curves) {
      f1.push_back(c[k].mean_f1);
      acc.push_back(c[k].mean_accuracy);
      size.push_back(c[k].n_train);
    }
    const auto [m, s] = mean_and_std(f1);
    out[k] = {curves.front()[k].k, mean_and_std(size).first, m, s, mean_and_std(acc).first};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Low-resource protocol: two repetitions of every recorded command train,
// everything else tests.
// ---------------------------------------------------------------------------

inline Split low_resource_split(const SpeakerData& sd, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_command;
  for (std::size_t i = 0; i < sd.command_ids.size(); ++i) by_command[sd.command_ids[i]].push_back(i);
  for (const auto& [cmd, reps] : by_command) {
    if (cmd < 0) throw ProtocolError("speaker " + sd.speaker_id + ": utterance without a command id");
    if (reps.size() < 3)
      throw ProtocolError("speaker " + sd.speaker_id + ": command " + std::to_string(cmd) + " has only " +
                          std::to_string(reps.size()) + " repetitions (need 3)");
  }
  Split s;
  for (auto& [cmd, reps] : by_command) {
    rng.shuffle(std::span(reps));
    s.train.insert(s.train.end(), reps.begin(), reps.begin() + 2);
    s.test.insert(s.test.end(), reps.begin() + 2, reps.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct LowResourceResult {
  double f1 = 0.0;        ///< mean over folds
  double accuracy = 0.0;  ///< mean over folds
  std::vector<double> fold_f1;
  std::size_t train_size = 0;
};

/// Mean F1 over `n_folds` resampled low-resource splits; nullopt (with a
/// warning) if the speaker does not meet the repetition requirement.
inline std::optional<LowResourceResult> low_resource_eval(const SpeakerData& sd, const ModelFactory& factory, Rng& rng,
                                                          std::size_t n_folds = 5,
                                                          std::vector<std::string>* warnings = nullptr) {
  if (n_folds < 1) throw InvalidArgument("low_resource_eval: n_folds must be >= 1");
  const std::uint64_t base = rng.next_u64();
  LowResourceResult res;
  std::vector<double> acc;
  for (std::size_t fold = 0; fold < n_folds; ++fold) {
    Rng split_rng(Rng::derive(base, 2 * fold));
    Split s;
    try {
      s = low_resource_split(sd, split_rng);
    } catch (const ProtocolError& e) {
      if (warnings) warnings->push_back(std::string("skipping speaker in low-resource protocol: ") + e.what());
      return std::nullopt;
    }
    Rng model_rng(Rng::derive(base, 2 * fold + 1));
    const auto train = gather(sd, s.train);
    const auto test = gather(sd, s.test);
    const auto model = factory(train, model_rng);
    const Evaluation ev = evaluate(*model, test);
    res.fold_f1.push_back(ev.f1);
    acc.push_back(ev.accuracy);
    res.train_size = train.size();
  }
  res.f1 = mean_and_std(res.fold_f1).first;
  res.accuracy = mean_and_std(acc).first;
  return res;
}

// ---------------------------------------------------------------------------
// Experiment reports
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::vector<EncoderVariant> encoder_variants = {std::begin(kAllVariants), std::end(kAllVariants)};
  std::size_t n_blocks = 15;
  std::size_t n_folds = 5;
  std::size_t low_resource_folds = 5;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "out";

  void validate() const {
    if (encoder_variants.empty()) throw InvalidArgument("experiment: encoder_variants must be non-empty");
    if (n_folds < 2) throw InvalidArgument("experiment: n_folds must be >= 2");
    if (n_blocks < 2) throw InvalidArgument("experiment: n_blocks must be >= 2");
    if (low_resource_folds < 1) throw InvalidArgument("experiment: low_resource_folds must be >= 1");
    if (seeds.empty()) throw InvalidArgument("experiment: seeds must be non-empty");
  }
};

struct SpeakerResult {
  std::string speaker_id;
  double is_score = 0.0;
  std::string variant;
  double f1 = 0.0;
  double frame_error_rate = 0.0;
  double rel_improvement = 0.0;  ///< f1 - f1 of the normal_only encoder for this speaker

  friend bool operator==(const SpeakerResult&, const SpeakerResult&) = default;
};

struct VariantCurve {
  std::string variant;
  std::vector<CurvePoint> points;

  friend bool operator==(const VariantCurve&, const VariantCurve&) = default;
};

struct ExperimentReport {
  std::vector<VariantCurve> curves;
  std::vector<SpeakerResult> speakers;
  std::map<std::string, std::string> metadata;
};

/// Decoder inputs and frame error rates produced with one encoder variant.
struct VariantData {
  std::vector<SpeakerData> speakers;
  std::map<std::string, double> frame_error_rate;  ///< by speaker id
};

using VariantTable = std::map<EncoderVariant, VariantData>;

inline const VariantData& require_variant(const VariantTable& table, EncoderVariant v) {
  auto it = table.find(v);
  if (it == table.end())
    throw ProtocolError("missing artifacts for encoder variant '" + variant_name(v) + "'");
  return it->second;
}

/// Learning curves averaged over speakers for every requested variant.
/// Curve seeds depend only on `seed` and the speaker position, so variants
/// are compared on identical splits.
inline std::vector<VariantCurve> variant_curves(const VariantTable& table, const ExperimentConfig& cfg,
                                                const ModelFactory& factory, std::uint64_t seed,
                                                std::vector<std::string>* warnings = nullptr) {
  cfg.validate();
  std::vector<VariantCurve> out;
  for (EncoderVariant v : cfg.encoder_variants) {
    const VariantData& data = require_variant(table, v);
    std::vector<std::vector<CurvePoint>> per_speaker;
    for (std::size_t s = 0; s < data.speakers.size(); ++s) {
      Rng rng(Rng::derive(Rng::derive(seed, "curve"), s));
      if (auto c = learning_curve(data.speakers[s], factory, cfg.n_blocks, cfg.n_folds, rng, warnings))
        per_speaker.push_back(std::move(*c));
    }
    out.push_back({variant_name(v), average_curves(per_speaker)});
  }
  return out;
}

/// Low-resource F1 per speaker and variant, with improvements relative to
/// the normal_only encoder, rows sorted by intelligibility.
inline std::vector<SpeakerResult> is_transfer_rows(const VariantTable& table, const ExperimentConfig& cfg,
                                                   const ModelFactory& factory, std::uint64_t seed,
                                                   std::vector<std::string>* warnings = nullptr) {
  cfg.validate();
  const VariantData& baseline = require_variant(table, EncoderVariant::kNormalOnly);
  for (EncoderVariant v : cfg.encoder_variants) require_variant(table, v);

  struct Cell {
    std::optional<LowResourceResult> result;
  };
  std::map<EncoderVariant, std::vector<Cell>> cells;
  auto run = [&](EncoderVariant v) {
    if (cells.count(v)) return;
    const VariantData& data = table.at(v);
    auto& row = cells[v];
    for (std::size_t s = 0; s < data.speakers.size(); ++s) {
      Rng rng(Rng::derive(Rng::derive(seed, "low_resource"), s));
      row.push_back({low_resource_eval(data.speakers[s], factory, rng, cfg.low_resource_folds,
                                       v == cfg.encoder_variants.front() ? warnings : nullptr)});
    }
  };
  for (EncoderVariant v : cfg.encoder_variants) run(v);
  run(EncoderVariant::kNormalOnly);

  std::vector<SpeakerResult> rows;
  const auto& base_cells = cells.at(EncoderVariant::kNormalOnly);
  for (EncoderVariant v : cfg.encoder_variants) {
    const VariantData& data = table.at(v);
    if (data.speakers.size() != baseline.speakers.size())
      throw ProtocolError("encoder variant '" + variant_name(v) + "' covers a different speaker set");
    for (std::size_t s = 0; s < data.speakers.size(); ++s) {
      const auto& sd = data.speakers[s];
      if (sd.speaker_id != baseline.speakers[s].speaker_id)
        throw ProtocolError("encoder variant '" + variant_name(v) + "' covers a different speaker set");
      const auto& r = cells.at(v)[s].result;
      const auto& b = base_cells[s].result;
      if (!r || !b) continue;
      auto fer = data.frame_error_rate.find(sd.speaker_id);
      rows.push_back({sd.speaker_id, sd.is_score, variant_name(v), r->f1,
                      fer == data.frame_error_rate.end() ? std::nan("") : fer->second, r->f1 - b->f1});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SpeakerResult& a, const SpeakerResult& b) {
    if (a.is_score != b.is_score) return a.is_score < b.is_score;
    return a.speaker_id < b.speaker_id;
  });
  return rows;
}

inline ExperimentReport is_transfer_report(const VariantTable& table, const ExperimentConfig& cfg,
                                           const ModelFactory& factory, std::uint64_t seed,
                                           std::vector<std::string>* warnings = nullptr) {
  ExperimentReport r;
  r.speakers = is_transfer_rows(table, cfg, factory, seed, warnings);
  r.metadata["protocol"] = "low_resource";
  r.metadata["low_resource_folds"] = std::to_string(cfg.low_resource_folds);
  r.metadata["rel_improvement"] = "f1 minus f1 of normal_only for the same speaker";
  return r;
}

/// Mean of `rel_improvement` over rows of `variant` whose IS lies in [lo, hi).
inline std::optional<double> mean_improvement(std::span<const SpeakerResult> rows, const std::string& variant,
                                              double lo, double hi) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.variant == variant && r.is_score >= lo && r.is_score < hi) sum += r.rel_improvement, ++n;
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

/// Averages replicate tables (e.g. one per protocol seed) row by row;
/// rows are matched on (speaker, variant) and kept in the first table's order.
inline std::vector<SpeakerResult> average_rows(std::span<const std::vector<SpeakerResult>> tables) {
  if (tables.empty()) return {};
  std::map<std::pair<std::string, std::string>, std::vector<const SpeakerResult*>> by;
  for (const auto& t : tables)
    for (const auto& r : t) by[{r.speaker_id, r.variant}].push_back(&r);
  std::vector<SpeakerResult> out;
  for (const auto& r : tables.front()) {
    const auto& reps = by.at({r.speaker_id, r.variant});
    SpeakerResult a = r;
    a.f1 = a.frame_error_rate = a.rel_improvement = 0.0;
    for (const auto* x : reps) {
      a.f1 += x->f1;
      a.frame_error_rate += x->frame_error_rate;
      a.rel_improvement += x->rel_improvement;
    }
    const double n = static_cast<double>(reps.size());
    a.f1 /= n;
    a.frame_error_rate /= n;
    a.rel_improvement /= n;
    out.push_back(a);
  }
  return out;
}

}  // namespace dysslu
