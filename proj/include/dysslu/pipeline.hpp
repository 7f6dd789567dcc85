#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dysslu/capsule.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/encoder.hpp"
#include "dysslu/harness.hpp"
#include "dysslu/rng.hpp"

namespace dysslu {

// Stages shared by the command-line tool and the experiment drivers. Every
// stage derives its random stream from (seed, stage tag) so stages can be
// rerun independently and still agree with an all-in-one run.

struct CorpusSettings {
  InventoryConfig inventory;
  DistortionModel distortion;
  std::size_t normal_speakers = 20;
  std::size_t normal_utts_per_speaker = 20;
  std::vector<Stratum> dysarthric_strata = default_dysarthric_strata();
  std::size_t dysarthric_utts_per_speaker = 20;
  std::size_t task_commands = 27;
  std::size_t task_slot_labels = 27;
  std::size_t task_repetitions = 5;
  std::size_t task_min_commands = 9;
  std::vector<TaskSpeaker> task_speakers = default_task_speakers();
  /// Held-out impaired speakers used only to measure frame error rates per
  /// severity band, including bands the task corpus does not cover.
  std::vector<Stratum> probe_strata = {{28.0, 59.9, 3}, {85.1, 100.0, 3}};
  std::size_t probe_utts_per_speaker = 20;
};

struct Corpora {
  PhoneInventory inventory;
  Corpus normal;
  Corpus dysarthric;
  Corpus task;
  Corpus probe;
};

inline Corpora synth_corpora(const CorpusSettings& s, std::uint64_t seed) {
  Corpora c;
  c.inventory = make_phone_inventory(s.inventory, Rng::derive(seed, "inventory"));

  PretrainCorpusConfig normal;
  normal.name = "normal";
  normal.utts_per_speaker = s.normal_utts_per_speaker;
  normal.strata = normal_speech_strata(s.normal_speakers);
  normal.seed = Rng::derive(seed, "normal");
  normal.distortion = s.distortion;
  c.normal = synth_pretrain_corpus(normal, c.inventory);

  PretrainCorpusConfig dys;
  dys.name = "dysarthric";
  dys.utts_per_speaker = s.dysarthric_utts_per_speaker;
  dys.strata = s.dysarthric_strata;
  dys.seed = Rng::derive(seed, "dysarthric");
  dys.distortion = s.distortion;
  c.dysarthric = synth_pretrain_corpus(dys, c.inventory);

  TaskCorpusConfig task;
  task.commands = s.task_commands;
  task.n_slot_labels = s.task_slot_labels;
  task.repetitions_per_command = s.task_repetitions;
  task.min_commands_per_speaker = s.task_min_commands;
  task.speakers = s.task_speakers;
  task.seed = Rng::derive(seed, "task");
  task.distortion = s.distortion;
  c.task = synth_task_corpus(task, c.inventory);

  PretrainCorpusConfig probe;
  probe.name = "probe";
  probe.utts_per_speaker = s.probe_utts_per_speaker;
  probe.strata = s.probe_strata;
  probe.seed = Rng::derive(seed, "probe");
  probe.distortion = s.distortion;
  c.probe = synth_pretrain_corpus(probe, c.inventory);
  return c;
}

/// The untrained starting point of pretraining; frozen as is, it is the
/// "none" variant.
inline EncoderParams initial_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "encoder_init"));
  return init_encoder(cfg, rng);
}

inline EncoderParams pretrain_stage(const EncoderConfig& cfg, const Corpus& normal, std::uint64_t seed,
                                    TrainLog* log = nullptr) {
  Rng rng(Rng::derive(seed, "encoder_init"));
  return pretrain(cfg, normal, rng, log);
}

/// Second-stage training of `normal_only` (unfrozen) for a finetuned variant.
inline EncoderParams finetune_stage(EncoderVariant v, const EncoderParams& normal_only, const Corpora& c,
                                    const EncoderConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr) {
  if (!is_finetuned(v)) throw InvalidArgument("finetune_stage: '" + variant_name(v) + "' is not a finetuned variant");
  Rng rng(Rng::derive(seed, "finetune_" + variant_name(v)));
  EncoderParams init = normal_only;
  init.frozen = false;
  return finetune(init, c.normal, c.dysarthric, variant_is_min(v), cfg, rng, log);
}

using EncoderSet = std::map<EncoderVariant, EncoderParams>;

/// Trains (and freezes) every requested variant, pretraining once.
inline EncoderSet train_encoders(std::span<const EncoderVariant> variants, const EncoderConfig& cfg,
                                 const Corpora& c, std::uint64_t seed) {
  EncoderSet out;
  std::optional<EncoderParams> base;
  for (EncoderVariant v : variants) {
    if (v == EncoderVariant::kNone) {
      out[v] = freeze(initial_encoder(cfg, seed));
      continue;
    }
    if (!base) base = pretrain_stage(cfg, c.normal, seed);
    out[v] = freeze(v == EncoderVariant::kNormalOnly ? *base : finetune_stage(v, *base, c, cfg, seed));
  }
  return out;
}

/// Frame error rate of `p` on each speaker of `corpus`.
inline std::map<std::string, double> speaker_frame_error_rates(const EncoderParams& p, const Corpus& corpus) {
  std::map<std::string, std::vector<Utterance>> by;
  for (const auto& u : corpus.utterances) by[u.speaker_id].push_back(u);
  std::map<std::string, double> out;
  for (const auto& [id, utts] : by) out[id] = count_frame_errors(p, utts).rate();
  return out;
}

/// Pooled frame error rate over the speakers of `corpus` with IS in [lo, hi).
inline std::optional<double> band_frame_error_rate(const EncoderParams& p, const Corpus& corpus, double lo, double hi) {
  std::set<std::string> keep;
  for (const auto& s : corpus.speakers)
    if (s.intelligibility_score >= lo && s.intelligibility_score < hi) keep.insert(s.speaker_id);
  std::vector<Utterance> utts;
  for (const auto& u : corpus.utterances)
    if (keep.count(u.speaker_id)) utts.push_back(u);
  if (utts.empty()) return std::nullopt;
  return count_frame_errors(p, utts).rate();
}

inline VariantData variant_data(const EncoderParams& frozen, const Corpus& task) {
  const auto bnf = extract_bnf(frozen, task);
  return {speaker_datasets(task, bnf), speaker_frame_error_rates(frozen, task)};
}

inline VariantTable variant_table(const EncoderSet& encoders, const Corpus& task) {
  VariantTable t;
  for (const auto& [v, p] : encoders) t[v] = variant_data(p, task);
  return t;
}

}  // namespace dysslu
