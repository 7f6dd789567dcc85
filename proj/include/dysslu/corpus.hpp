#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dysslu/error.hpp"
#include "dysslu/matrix.hpp"
#include "dysslu/rng.hpp"

namespace dysslu {

inline constexpr double kMinIntelligibility = 28.0;
inline constexpr double kMaxIntelligibility = 100.0;

/// Sorted, duplicate-free set of slot label indices.
using LabelSet = std::vector<int>;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct PhoneInventory {
  std::vector<std::string> phones;
  Matrix prototypes;            ///< n_phones x D
  double noise_scale = 0.0;     ///< within-phone standard deviation per dimension
  /// Per-phone deviation direction shared by all impaired speakers
  /// (n_phones x D, standard normal entries).
  Matrix shared_deviation;
  /// Nearest other prototype per phone (target of substitutions).
  std::vector<int> confusable;

  std::size_t size() const noexcept { return phones.size(); }
  std::size_t dim() const noexcept { return prototypes.cols(); }

  friend bool operator==(const PhoneInventory&, const PhoneInventory&) = default;
};

struct SpeakerProfile {
  std::string speaker_id;
  double intelligibility_score = kMaxIntelligibility;
  Matrix prototype_offset;  ///< n_phones x D
  double substitution_rate = 0.0;
  double duration_jitter = 0.0;

  friend bool operator==(const SpeakerProfile&, const SpeakerProfile&) = default;
};

struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  Matrix features;                  ///< T x D
  std::vector<int> phone_alignment; ///< length T, intended phone per frame
  LabelSet slot_labels;             ///< empty for pretraining utterances
  std::optional<int> command_id;

  std::size_t frames() const noexcept { return features.rows(); }

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// A task command: its canonical phone sequence and its slot labels.
struct Command {
  int id = 0;
  std::vector<int> phones;
  LabelSet slot_labels;

  friend bool operator==(const Command&, const Command&) = default;
};

struct Corpus {
  std::string name;
  std::vector<Utterance> utterances;
  std::vector<SpeakerProfile> speakers;
  PhoneInventory phone_inventory;
  std::vector<Command> commands;  ///< task corpora only
  int n_slot_labels = 0;          ///< task corpora only

  const SpeakerProfile& speaker(const std::string& id) const {
    for (const auto& s : speakers)
      if (s.speaker_id == id) return s;
    throw InvalidArgument("corpus " + name + ": unknown speaker " + id);
  }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Magnitudes of the intelligibility-driven distortion. Every knob scales
/// linearly with severity = 100 - IS, so IS = 100 means no distortion.
struct DistortionModel {
  double offset_per_severity = 0.04;        ///< offset std per dimension
  double substitution_per_severity = 0.006;
  double jitter_per_severity = 0.01;
  /// Fraction of offset variance explained by the inventory's shared
  /// deviation directions; the rest is speaker specific.
  double shared_fraction = 0.6;
};

struct InventoryConfig {
  std::size_t n_phones = 20;
  std::size_t feature_dim = 24;
  double prototype_scale = 1.0;
  double noise_scale = 0.35;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline PhoneInventory make_phone_inventory(const InventoryConfig& cfg, std::uint64_t seed) {
  if (cfg.n_phones < 2 || cfg.feature_dim < 1) {
    throw InvalidArgument("phone inventory needs >= 2 phones and >= 1 feature dimension");
  }
  Rng rng(Rng::derive(seed, "inventory"));
  PhoneInventory inv;
  inv.noise_scale = cfg.noise_scale;
  for (std::size_t p = 0; p < cfg.n_phones; ++p) inv.phones.push_back("ph" + std::to_string(p));
  inv.prototypes = random_normal(cfg.n_phones, cfg.feature_dim, cfg.prototype_scale, rng);
  inv.shared_deviation = random_normal(cfg.n_phones, cfg.feature_dim, 1.0, rng);
  inv.confusable.assign(cfg.n_phones, 0);
  for (std::size_t p = 0; p < cfg.n_phones; ++p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < cfg.n_phones; ++q) {
      if (q == p) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < cfg.feature_dim; ++k) {
        const double diff = inv.prototypes(p, k) - inv.prototypes(q, k);
        d2 += diff * diff;
      }
      if (d2 == 0.0) throw InvalidArgument("phone inventory: duplicate prototypes");
      if (d2 < best) {
        best = d2;
        inv.confusable[p] = static_cast<int>(q);
      }
    }
  }
  return inv;
}

inline void check_intelligibility(double is, const std::string& who) {
  if (!(is >= kMinIntelligibility && is <= kMaxIntelligibility)) {
    throw InvalidArgument(who + ": intelligibility score " + std::to_string(is) +
                          " outside [28, 100]");
  }
}

inline SpeakerProfile make_speaker(std::string id, double is, const PhoneInventory& inv,
                                   const DistortionModel& model, Rng& rng) {
  check_intelligibility(is, "speaker " + id);
  if (!(model.shared_fraction >= 0.0 && model.shared_fraction <= 1.0))
    throw InvalidArgument("distortion shared_fraction must lie in [0, 1]");
  if (model.offset_per_severity < 0.0 || model.substitution_per_severity < 0.0 || model.jitter_per_severity < 0.0)
    throw InvalidArgument("distortion magnitudes must be non-negative");
  const double severity = kMaxIntelligibility - is;
  SpeakerProfile sp;
  sp.speaker_id = std::move(id);
  sp.intelligibility_score = is;
  sp.substitution_rate = std::clamp(model.substitution_per_severity * severity, 0.0, 1.0);
  sp.duration_jitter = model.jitter_per_severity * severity;
  const double scale = model.offset_per_severity * severity;
  const double ws = std::sqrt(model.shared_fraction);
  const double wi = std::sqrt(1.0 - model.shared_fraction);
  sp.prototype_offset = Matrix(inv.size(), inv.dim());
  for (std::size_t p = 0; p < inv.size(); ++p) {
    for (std::size_t k = 0; k < inv.dim(); ++k) {
      // Draw unconditionally so the stream does not depend on IS.
      const double z = rng.normal();
      sp.prototype_offset(p, k) = scale * (ws * inv.shared_deviation(p, k) + wi * z);
    }
  }
  return sp;
}

/// Renders a phone sequence through a speaker's distortion model.
/// Feature values are stored at 32-bit precision so that archives round-trip exactly.
inline Utterance render_utterance(std::string utt_id, const SpeakerProfile& sp,
                                  const PhoneInventory& inv, std::span<const int> phones,
                                  Rng& rng) {
  Utterance u;
  u.utt_id = std::move(utt_id);
  u.speaker_id = sp.speaker_id;
  std::vector<double> frames;
  const std::size_t dim = inv.dim();
  for (int p : phones) {
    const long long base = rng.between(3, 8);
    const double g = rng.normal();
    const double stretched = static_cast<double>(base) * (1.0 + sp.duration_jitter * g);
    const auto duration = static_cast<std::size_t>(std::max(1.0, std::round(stretched)));
    const bool substitute = rng.bernoulli(sp.substitution_rate);
    const auto emitted = static_cast<std::size_t>(substitute ? inv.confusable[static_cast<std::size_t>(p)] : p);
    for (std::size_t f = 0; f < duration; ++f) {
      for (std::size_t k = 0; k < dim; ++k) {
        const double x = inv.prototypes(emitted, k) + sp.prototype_offset(emitted, k) +
                         inv.noise_scale * rng.normal();
        frames.push_back(static_cast<double>(static_cast<float>(x)));
      }
      u.phone_alignment.push_back(p);
    }
  }
  u.features = Matrix(u.phone_alignment.size(), dim, std::move(frames));
  return u;
}

/// Severity stratum: IS drawn uniformly from [is_low, is_high].
struct Stratum {
  double is_low = 100.0;
  double is_high = 100.0;
  std::size_t speaker_count = 1;
};

struct PretrainCorpusConfig {
  std::string name = "dysarthric";
  std::size_t utts_per_speaker = 20;
  std::vector<Stratum> strata;
  std::uint64_t seed = 0;
  DistortionModel distortion;
};

/// Default impaired-speech strata: the four severity levels of a clinical
/// corpus with speaker counts 99/63/8/12 scaled by 1/10 and rounded up.
inline std::vector<Stratum> default_dysarthric_strata() {
  return {{85.1, 100.0, 10}, {70.0, 85.0, 7}, {60.0, 69.9, 1}, {28.0, 59.9, 2}};
}

inline std::vector<Stratum> normal_speech_strata(std::size_t speakers) {
  return {{100.0, 100.0, speakers}};
}

inline void validate_strata(const std::vector<Stratum>& strata) {
  if (strata.empty()) throw InvalidArgument("severity strata: empty list");
  for (const auto& s : strata) {
    if (s.speaker_count < 1) throw InvalidArgument("severity strata: speaker count must be >= 1");
    if (s.is_low > s.is_high) throw InvalidArgument("severity strata: low bound above high bound");
    check_intelligibility(s.is_low, "severity stratum");
    check_intelligibility(s.is_high, "severity stratum");
  }
  for (std::size_t a = 0; a < strata.size(); ++a)
    for (std::size_t b = a + 1; b < strata.size(); ++b)
      if (!(strata[a].is_high < strata[b].is_low || strata[b].is_high < strata[a].is_low))
        throw InvalidArgument("severity strata: ranges overlap");
}

/// Pretraining corpus: random phone strings (5-15 phones) per speaker.
inline Corpus synth_pretrain_corpus(const PretrainCorpusConfig& cfg, const PhoneInventory& inv) {
  validate_strata(cfg.strata);
  if (cfg.utts_per_speaker < 1) throw InvalidArgument("utts_per_speaker must be >= 1");
  Rng rng(Rng::derive(cfg.seed, cfg.name));
  Corpus c;
  c.name = cfg.name;
  c.phone_inventory = inv;
  std::size_t idx = 0;
  for (const auto& stratum : cfg.strata) {
    for (std::size_t s = 0; s < stratum.speaker_count; ++s, ++idx) {
      const double is = stratum.is_low == stratum.is_high ? stratum.is_low
                                                          : rng.uniform(stratum.is_low, stratum.is_high);
      char id[32];
      std::snprintf(id, sizeof id, "%s_s%03zu", cfg.name.c_str(), idx);
      c.speakers.push_back(make_speaker(id, is, inv, cfg.distortion, rng));
    }
  }
  for (const auto& sp : c.speakers) {
    for (std::size_t k = 0; k < cfg.utts_per_speaker; ++k) {
      const auto len = static_cast<std::size_t>(rng.between(5, 15));
      std::vector<int> phones(len);
      for (int& p : phones) p = static_cast<int>(rng.below(inv.size()));
      char id[64];
      std::snprintf(id, sizeof id, "%s_u%04zu", sp.speaker_id.c_str(), k);
      c.utterances.push_back(render_utterance(id, sp, inv, phones, rng));
    }
  }
  return c;
}

struct TaskSpeaker {
  std::string speaker_id;
  double intelligibility_score = 100.0;
};

/// Default task population: 5 mild (>85), 6 moderate (70-85) and
/// 4 high-severity (60-70) speakers.
inline std::vector<TaskSpeaker> default_task_speakers() {
  const double scores[] = {61, 63, 66, 69, 72, 74, 77, 79, 82, 84, 87, 90, 93, 96, 99};
  std::vector<TaskSpeaker> out;
  for (std::size_t i = 0; i < std::size(scores); ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "spk%02zu", i + 1);
    out.push_back({id, scores[i]});
  }
  return out;
}

struct TaskCorpusConfig {
  std::string name = "task";
  std::size_t commands = 27;
  std::size_t n_slot_labels = 27;
  std::size_t repetitions_per_command = 5;
  /// Each speaker records a random subset of this many commands or more.
  std::size_t min_commands_per_speaker = 9;
  std::vector<TaskSpeaker> speakers = default_task_speakers();
  std::uint64_t seed = 0;
  DistortionModel distortion;
};

/// Builds the command table: every slot label owns a short phone "word";
/// a command's text is the concatenation of the words of its 1-3 labels.
inline std::vector<Command> make_commands(std::size_t n_commands, std::size_t n_labels,
                                          std::size_t n_phones, Rng& rng) {
  std::vector<std::vector<int>> words(n_labels);
  for (auto& w : words) {
    w.resize(static_cast<std::size_t>(rng.between(2, 4)));
    for (int& p : w) p = static_cast<int>(rng.below(n_phones));
  }
  std::set<LabelSet> used;
  std::vector<Command> out;
  const std::size_t max_size = std::min<std::size_t>(3, n_labels);
  std::size_t attempts = 0;
  while (out.size() < n_commands) {
    if (++attempts > 100000) throw InvalidArgument("cannot build distinct label sets for commands");
    const auto size = static_cast<std::size_t>(rng.between(1, static_cast<long long>(max_size)));
    std::vector<int> pool(n_labels);
    for (std::size_t i = 0; i < n_labels; ++i) pool[i] = static_cast<int>(i);
    rng.shuffle(std::span(pool));
    LabelSet labels(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(size));
    std::sort(labels.begin(), labels.end());
    if (!used.insert(labels).second) continue;
    Command cmd;
    cmd.id = static_cast<int>(out.size());
    cmd.slot_labels = labels;
    for (int l : labels) cmd.phones.insert(cmd.phones.end(), words[static_cast<std::size_t>(l)].begin(),
                                           words[static_cast<std::size_t>(l)].end());
    out.push_back(std::move(cmd));
  }
  return out;
}

/// Task (command) corpus: speaker-dependent recordings of fixed commands.
inline Corpus synth_task_corpus(const TaskCorpusConfig& cfg, const PhoneInventory& inv) {
  if (cfg.commands < 2) throw InvalidArgument("task corpus needs >= 2 commands");
  if (cfg.n_slot_labels < 1) throw InvalidArgument("task corpus needs >= 1 slot label");
  if (cfg.repetitions_per_command < 1) throw InvalidArgument("repetitions_per_command must be >= 1");
  if (cfg.speakers.empty()) throw InvalidArgument("task corpus needs >= 1 speaker");
  std::set<std::string> ids;
  for (const auto& s : cfg.speakers) {
    if (!ids.insert(s.speaker_id).second) throw InvalidArgument("duplicate speaker id " + s.speaker_id);
    check_intelligibility(s.intelligibility_score, "speaker " + s.speaker_id);
  }
  Rng rng(Rng::derive(cfg.seed, cfg.name));
  Corpus c;
  c.name = cfg.name;
  c.phone_inventory = inv;
  c.n_slot_labels = static_cast<int>(cfg.n_slot_labels);
  c.commands = make_commands(cfg.commands, cfg.n_slot_labels, inv.size(), rng);

  const std::size_t min_cmds = std::min(cfg.min_commands_per_speaker, cfg.commands);
  for (const auto& ts : cfg.speakers) {
    // Per-speaker stream so the command texts and other speakers do not
    // depend on this speaker's draws.
    Rng srng(Rng::derive(rng.state(), ts.speaker_id));
    SpeakerProfile sp = make_speaker(ts.speaker_id, ts.intelligibility_score, inv, cfg.distortion, srng);
    const auto n_rec = static_cast<std::size_t>(
        srng.between(static_cast<long long>(min_cmds), static_cast<long long>(cfg.commands)));
    std::vector<int> order(cfg.commands);
    for (std::size_t i = 0; i < cfg.commands; ++i) order[i] = static_cast<int>(i);
    srng.shuffle(std::span(order));
    std::vector<int> recorded(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_rec));
    std::sort(recorded.begin(), recorded.end());
    for (int cmd : recorded) {
      const Command& command = c.commands[static_cast<std::size_t>(cmd)];
      for (std::size_t r = 0; r < cfg.repetitions_per_command; ++r) {
        char id[64];
        std::snprintf(id, sizeof id, "%s_c%02d_r%02zu", ts.speaker_id.c_str(), cmd, r);
        Utterance u = render_utterance(id, sp, inv, command.phones, srng);
        u.slot_labels = command.slot_labels;
        u.command_id = cmd;
        c.utterances.push_back(std::move(u));
      }
    }
    c.speakers.push_back(std::move(sp));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Augmentation and splitting
// ---------------------------------------------------------------------------

/// Time-resamples an utterance to round(T / ratio) frames: features by linear
/// interpolation, alignment by nearest neighbour. Ratio 1 returns a copy.
inline Utterance speed_perturb(const Utterance& u, double ratio) {
  if (!(ratio >= 0.5 && ratio <= 2.0)) throw InvalidArgument("speed_perturb: ratio must lie in [0.5, 2]");
  if (ratio == 1.0) return u;
  const std::size_t t_in = u.frames();
  const auto t_out = static_cast<std::size_t>(std::llround(static_cast<double>(t_in) / ratio));
  if (t_out < 2 || t_in < 2) {
    throw InvalidArgument("speed_perturb: ratio " + std::to_string(ratio) + " leaves fewer than 2 frames");
  }
  const std::size_t dim = u.features.cols();
  Utterance out;
  char suffix[32];
  std::snprintf(suffix, sizeof suffix, "_sp%.2f", ratio);
  out.utt_id = u.utt_id + suffix;
  out.speaker_id = u.speaker_id;
  out.slot_labels = u.slot_labels;
  out.command_id = u.command_id;
  out.features = Matrix(t_out, dim);
  out.phone_alignment.resize(t_out);
  const double step = static_cast<double>(t_in - 1) / static_cast<double>(t_out - 1);
  for (std::size_t j = 0; j < t_out; ++j) {
    const double x = static_cast<double>(j) * step;
    const auto lo = std::min(static_cast<std::size_t>(x), t_in - 1);
    const std::size_t hi = std::min(lo + 1, t_in - 1);
    const double frac = x - static_cast<double>(lo);
    auto dst = out.features.row(j);
    auto a = u.features.row(lo);
    auto b = u.features.row(hi);
    for (std::size_t k = 0; k < dim; ++k) dst[k] = (1.0 - frac) * a[k] + frac * b[k];
    const auto nearest = std::min(static_cast<std::size_t>(std::llround(x)), t_in - 1);
    out.phone_alignment[j] = u.phone_alignment[nearest];
  }
  return out;
}

inline std::vector<Utterance> speed_augment(std::span<const Utterance> utts, std::span<const double> ratios) {
  std::vector<Utterance> out;
  out.reserve(utts.size() * ratios.size());
  for (const auto& u : utts)
    for (double r : ratios) out.push_back(speed_perturb(u, r));
  return out;
}

/// Shuffles `items` and cuts them into n_blocks contiguous chunks whose
/// sizes differ by at most one (the first `count % n_blocks` chunks are larger).
template <typename T>
std::vector<std::vector<T>> block_split(std::vector<T> items, std::size_t n_blocks, Rng& rng) {
  if (n_blocks < 2) throw InvalidArgument("block_split: n_blocks must be >= 2");
  if (items.size() < n_blocks) {
    throw ProtocolError("block_split: " + std::to_string(items.size()) + " items for " +
                        std::to_string(n_blocks) + " blocks");
  }
  rng.shuffle(std::span(items));
  const std::size_t base = items.size() / n_blocks;
  const std::size_t extra = items.size() % n_blocks;
  std::vector<std::vector<T>> blocks(n_blocks);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const std::size_t len = base + (b < extra ? 1 : 0);
    blocks[b].assign(std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(pos)),
                     std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(pos + len)));
    pos += len;
  }
  return blocks;
}

/// Keeps the speakers (and their utterances) whose IS is strictly above is_min.
inline Corpus filter_by_intelligibility(const Corpus& c, double is_min) {
  Corpus out;
  out.name = c.name;
  out.phone_inventory = c.phone_inventory;
  out.commands = c.commands;
  out.n_slot_labels = c.n_slot_labels;
  std::set<std::string> keep;
  for (const auto& s : c.speakers) {
    if (s.intelligibility_score > is_min) {
      keep.insert(s.speaker_id);
      out.speakers.push_back(s);
    }
  }
  for (const auto& u : c.utterances)
    if (keep.count(u.speaker_id)) out.utterances.push_back(u);
  return out;
}

}  // namespace dysslu
