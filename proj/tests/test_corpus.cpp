#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "dysslu/corpus.hpp"
#include "dysslu/formats.hpp"

using namespace dysslu;

namespace {

PhoneInventory inventory(std::uint64_t seed = 1) { return make_phone_inventory(InventoryConfig{}, seed); }

Corpus pretrain_corpus(std::vector<Stratum> strata, std::uint64_t seed, std::size_t utts = 20) {
  PretrainCorpusConfig cfg;
  cfg.strata = std::move(strata);
  cfg.seed = seed;
  cfg.utts_per_speaker = utts;
  return synth_pretrain_corpus(cfg, inventory());
}

double distance_to(const PhoneInventory& inv, std::span<const double> frame, std::size_t phone) {
  double d = 0.0;
  for (std::size_t k = 0; k < frame.size(); ++k) {
    const double e = frame[k] - inv.prototypes(phone, k);
    d += e * e;
  }
  return std::sqrt(d);
}

// Fraction of frames whose nearest prototype is the intended phone.
double nearest_prototype_correctness(const Corpus& c) {
  const auto& inv = c.phone_inventory;
  std::size_t ok = 0, total = 0;
  for (const auto& u : c.utterances) {
    for (std::size_t t = 0; t < u.frames(); ++t) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t p = 0; p < inv.size(); ++p) {
        const double d = distance_to(inv, u.features.row(t), p);
        if (d < best_d) best_d = d, best = p;
      }
      ok += static_cast<int>(best) == u.phone_alignment[t];
      ++total;
    }
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

double mean_intended_distance(const Corpus& c, const std::string& speaker) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& u : c.utterances) {
    if (u.speaker_id != speaker) continue;
    for (std::size_t t = 0; t < u.frames(); ++t, ++n)
      sum += distance_to(c.phone_inventory, u.features.row(t), static_cast<std::size_t>(u.phone_alignment[t]));
  }
  return sum / static_cast<double>(n);
}

std::vector<int> collapse(std::span<const int> seq) {
  std::vector<int> out;
  for (int p : seq)
    if (out.empty() || out.back() != p) out.push_back(p);
  return out;
}

}  // namespace

TEST(Inventory, ShapesAndConfusables) {
  const auto inv = inventory();
  EXPECT_EQ(inv.size(), 20u);
  EXPECT_EQ(inv.dim(), 24u);
  ASSERT_EQ(inv.confusable.size(), 20u);
  for (std::size_t p = 0; p < inv.size(); ++p) {
    const int q = inv.confusable[p];
    EXPECT_NE(q, static_cast<int>(p));
    // The confusable phone is the nearest other prototype.
    for (std::size_t r = 0; r < inv.size(); ++r) {
      if (r == p) continue;
      EXPECT_LE(distance_to(inv, inv.prototypes.row(p), static_cast<std::size_t>(q)),
                distance_to(inv, inv.prototypes.row(p), r) + 1e-12);
    }
  }
}

TEST(SynthPretrain, NormalSpeechHasNoDistortion) {
  const Corpus c = pretrain_corpus({{100, 100, 2}}, 3);
  const auto& inv = c.phone_inventory;
  const double bound = inv.noise_scale * (std::sqrt(static_cast<double>(inv.dim())) + 4.0);
  for (const auto& s : c.speakers) {
    EXPECT_EQ(s.substitution_rate, 0.0);
    EXPECT_EQ(s.duration_jitter, 0.0);
    for (double x : s.prototype_offset.data()) EXPECT_EQ(x, 0.0);
  }
  for (const auto& u : c.utterances)
    for (std::size_t t = 0; t < u.frames(); ++t)
      ASSERT_LE(distance_to(inv, u.features.row(t), static_cast<std::size_t>(u.phone_alignment[t])), bound);
}

TEST(SynthPretrain, SeedDeterminesBytes) {
  const Corpus a = pretrain_corpus({{30, 90, 4}}, 7);
  const Corpus b = pretrain_corpus({{30, 90, 4}}, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(encode_bnf_archive(feature_records(a)), encode_bnf_archive(feature_records(b)));
  EXPECT_EQ(encode_manifest(manifest_of(a)), encode_manifest(manifest_of(b)));
  const Corpus c = pretrain_corpus({{30, 90, 4}}, 8);
  EXPECT_NE(a.utterances[0].features, c.utterances[0].features);
}

TEST(SynthPretrain, SevereSpeechIsLessCorrect) {
  const double severe = nearest_prototype_correctness(pretrain_corpus({{28, 60, 3}}, 7));
  const double mild = nearest_prototype_correctness(pretrain_corpus({{85.1, 100, 3}}, 7));
  EXPECT_LT(severe, mild);
}

TEST(SynthPretrain, SpeakerCountsAndScoresFollowStrata) {
  const Corpus c = pretrain_corpus(default_dysarthric_strata(), 1, 2);
  ASSERT_EQ(c.speakers.size(), 20u);
  std::size_t idx = 0;
  for (const auto& st : default_dysarthric_strata()) {
    for (std::size_t k = 0; k < st.speaker_count; ++k, ++idx) {
      EXPECT_GE(c.speakers[idx].intelligibility_score, st.is_low);
      EXPECT_LE(c.speakers[idx].intelligibility_score, st.is_high);
    }
  }
  EXPECT_EQ(c.utterances.size(), 40u);
}

TEST(SynthPretrain, RejectsBadStrata) {
  EXPECT_THROW(pretrain_corpus({}, 1), InvalidArgument);
  EXPECT_THROW(pretrain_corpus({{20, 50, 1}}, 1), InvalidArgument);
  EXPECT_THROW(pretrain_corpus({{50, 101, 1}}, 1), InvalidArgument);
  EXPECT_THROW(pretrain_corpus({{60, 50, 1}}, 1), InvalidArgument);
  EXPECT_THROW(pretrain_corpus({{40, 60, 1}, {55, 70, 1}}, 1), InvalidArgument);
  EXPECT_THROW(pretrain_corpus({{40, 60, 0}}, 1), InvalidArgument);
}

TEST(SynthPretrain, RejectsBadDistortion) {
  PretrainCorpusConfig cfg;
  cfg.strata = {{50, 60, 1}};
  cfg.distortion.shared_fraction = 1.5;
  EXPECT_THROW(synth_pretrain_corpus(cfg, inventory()), InvalidArgument);
}

TEST(SynthTask, CountsUtterancesAndSlots) {
  TaskCorpusConfig cfg;
  cfg.commands = 2;
  cfg.repetitions_per_command = 2;
  cfg.speakers = {{"a", 90}};
  const Corpus c = synth_task_corpus(cfg, inventory());
  ASSERT_EQ(c.utterances.size(), 4u);
  for (const auto& u : c.utterances) {
    ASSERT_TRUE(u.command_id.has_value());
    EXPECT_EQ(u.slot_labels, c.commands[static_cast<std::size_t>(*u.command_id)].slot_labels);
    EXPECT_FALSE(u.slot_labels.empty());
    EXPECT_TRUE(std::is_sorted(u.slot_labels.begin(), u.slot_labels.end()));
  }
}

TEST(SynthTask, SeverityRaisesDistanceButNotPhoneSequence) {
  TaskCorpusConfig cfg;
  cfg.speakers = {{"clear", 100}, {"severe", 40}};
  cfg.seed = 3;
  const Corpus c = synth_task_corpus(cfg, inventory());
  for (const auto& u : c.utterances) {
    const auto& cmd = c.commands[static_cast<std::size_t>(*u.command_id)];
    EXPECT_EQ(collapse(u.phone_alignment), collapse(cmd.phones)) << u.utt_id;
  }
  EXPECT_GT(mean_intended_distance(c, "severe"), mean_intended_distance(c, "clear"));
}

TEST(SynthTask, DefaultPopulationMatchesStrata) {
  int mild = 0, moderate = 0, high = 0;
  for (const auto& s : default_task_speakers()) {
    const double is = s.intelligibility_score;
    mild += is > 85;
    moderate += is >= 70 && is <= 85;
    high += is >= 60 && is < 70;
  }
  EXPECT_EQ(mild, 5);
  EXPECT_EQ(moderate, 6);
  EXPECT_EQ(high, 4);
}

TEST(SynthTask, CommandsHaveDistinctLabelSets) {
  const Corpus c = synth_task_corpus(TaskCorpusConfig{}, inventory());
  std::set<LabelSet> sets;
  for (const auto& cmd : c.commands) sets.insert(cmd.slot_labels);
  EXPECT_EQ(sets.size(), 27u);
  for (const auto& s : c.speakers) {
    std::set<int> cmds;
    for (const auto& u : c.utterances)
      if (u.speaker_id == s.speaker_id) cmds.insert(*u.command_id);
    EXPECT_GE(cmds.size(), 9u);
  }
}

TEST(SpeedPerturb, IdentityRatio) {
  Rng rng(1);
  Utterance u;
  u.utt_id = "u";
  u.features = random_normal(100, 3, 1.0, rng);
  u.phone_alignment.assign(100, 4);
  EXPECT_EQ(speed_perturb(u, 1.0), u);
}

TEST(SpeedPerturb, FrameCounts) {
  Rng rng(2);
  Utterance u;
  u.utt_id = "u";
  u.features = random_normal(100, 3, 1.0, rng);
  for (int t = 0; t < 100; ++t) u.phone_alignment.push_back(t / 10);
  const auto slow = speed_perturb(u, 0.9);
  EXPECT_EQ(slow.frames(), 111u);
  EXPECT_EQ(slow.phone_alignment.size(), 111u);
  const auto fast = speed_perturb(u, 1.1);
  EXPECT_EQ(fast.frames(), 91u);
  EXPECT_EQ(fast.phone_alignment.size(), 91u);
  EXPECT_EQ(fast.features.row(0)[0], u.features.row(0)[0]);
  EXPECT_EQ(fast.features.row(90)[2], u.features.row(99)[2]);
  EXPECT_EQ(collapse(fast.phone_alignment), collapse(u.phone_alignment));
  EXPECT_THROW(speed_perturb(u, 3.0), InvalidArgument);
}

TEST(BlockSplit, EvenDivision) {
  std::vector<int> items(30);
  std::iota(items.begin(), items.end(), 0);
  Rng rng(1);
  const auto blocks = block_split(items, 15, rng);
  ASSERT_EQ(blocks.size(), 15u);
  std::vector<int> all;
  for (const auto& b : blocks) {
    EXPECT_EQ(b.size(), 2u);
    all.insert(all.end(), b.begin(), b.end());
  }
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, items);
}

TEST(BlockSplit, RemainderGoesToOneBlock) {
  std::vector<int> items(31);
  std::iota(items.begin(), items.end(), 0);
  Rng rng(1);
  const auto blocks = block_split(items, 15, rng);
  std::size_t twos = 0, threes = 0;
  for (const auto& b : blocks) twos += b.size() == 2, threes += b.size() == 3;
  EXPECT_EQ(twos, 14u);
  EXPECT_EQ(threes, 1u);
}

TEST(BlockSplit, SeedDeterminesPartition) {
  std::vector<int> items(30);
  std::iota(items.begin(), items.end(), 0);
  Rng a(5), b(5), c(6);
  EXPECT_EQ(block_split(items, 15, a), block_split(items, 15, b));
  EXPECT_NE(block_split(items, 15, a), block_split(items, 15, c));
}

TEST(BlockSplit, TooFewItems) {
  std::vector<int> items(10);
  Rng rng(0);
  EXPECT_THROW(block_split(items, 15, rng), ProtocolError);
  EXPECT_THROW(block_split(items, 1, rng), InvalidArgument);
}

TEST(FilterByIntelligibility, KeepsStrictlyAbove) {
  const Corpus c = pretrain_corpus(default_dysarthric_strata(), 2, 1);
  const Corpus f = filter_by_intelligibility(c, 70);
  std::set<std::string> kept;
  for (const auto& s : f.speakers) {
    EXPECT_GT(s.intelligibility_score, 70);
    kept.insert(s.speaker_id);
  }
  std::size_t want = 0;
  for (const auto& s : c.speakers) want += s.intelligibility_score > 70;
  EXPECT_EQ(kept.size(), want);
  for (const auto& u : f.utterances) EXPECT_TRUE(kept.count(u.speaker_id));
}
