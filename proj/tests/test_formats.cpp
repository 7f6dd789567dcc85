#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dysslu/capsule.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/encoder.hpp"
#include "dysslu/formats.hpp"

using namespace dysslu;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dysslu_test_formats";
  fs::create_directories(dir);
  return dir / name;
}

Corpus small_task(std::uint64_t seed) {
  TaskCorpusConfig cfg;
  cfg.seed = seed;
  cfg.speakers = {{"a", 95}, {"b", 45}};
  return synth_task_corpus(cfg, make_phone_inventory(InventoryConfig{}, seed));
}

}  // namespace

TEST(BnfArchive, EmptyArchiveIsEightBytes) {
  const auto path = scratch("empty.bnf");
  write_bnf_archive({}, path);
  EXPECT_EQ(fs::file_size(path), 8u);
  EXPECT_TRUE(read_bnf_archive(path).empty());
}

TEST(BnfArchive, SingleRecordSize) {
  std::vector<FeatureRecord> recs = {{"utt_a", Matrix(2, 3, {1, 2, 3, 4, 5, 6})}};
  const auto bytes = encode_bnf_archive(recs);
  EXPECT_EQ(bytes.size(), 4u + 2 + 5 + 4 + 4 + 24 + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "BNF1");
  // Little-endian id length then id.
  EXPECT_EQ(bytes[4], 5);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(decode_bnf_archive(bytes), recs);
}

TEST(BnfArchive, ThousandUtteranceRoundTripIsBitExact) {
  Rng rng(3);
  std::vector<FeatureRecord> recs;
  for (int i = 0; i < 1000; ++i) {
    Matrix m = random_normal(1 + rng.below(20), 4, 3.0, rng);
    for (double& x : m.data()) x = static_cast<float>(x);
    recs.push_back({"utt_" + std::to_string(i), std::move(m)});
  }
  const auto path = scratch("big.bnf");
  write_bnf_archive(recs, path);
  const auto back = read_bnf_archive(path);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ASSERT_EQ(back[i].id, recs[i].id);
    ASSERT_EQ(back[i].features.rows(), recs[i].features.rows());
    for (std::size_t k = 0; k < recs[i].features.size(); ++k) {
      const float a = static_cast<float>(back[i].features.data()[k]);
      const float b = static_cast<float>(recs[i].features.data()[k]);
      ASSERT_EQ(std::bit_cast<std::uint32_t>(a), std::bit_cast<std::uint32_t>(b));
    }
  }
}

TEST(BnfArchive, RejectsCorruption) {
  std::vector<FeatureRecord> recs = {{"x", Matrix(1, 2, {1, 2})}};
  auto bytes = encode_bnf_archive(recs);
  auto bad_magic = bytes;
  bad_magic[1] = 'Z';
  EXPECT_THROW(decode_bnf_archive(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.erase(truncated.begin() + 12);
  EXPECT_THROW(decode_bnf_archive(truncated), FormatError);
  auto bad_count = bytes;
  bad_count[bad_count.size() - 4] = 9;
  EXPECT_THROW(decode_bnf_archive(bad_count), FormatError);
  EXPECT_THROW(decode_bnf_archive(std::vector<std::uint8_t>{'B', 'N'}), FormatError);
  std::vector<FeatureRecord> dup = {{"x", Matrix(1, 1)}, {"x", Matrix(1, 1)}};
  EXPECT_THROW(encode_bnf_archive(dup), InvalidArgument);
}

TEST(Manifest, EmptyCorpusIsHeaderOnly) {
  Corpus c;
  c.name = "empty";
  const std::string text = encode_manifest(manifest_of(c));
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_EQ(decode_manifest(text).entries.size(), 0u);
}

TEST(Manifest, RoundTripOnSyntheticCorpus) {
  const Corpus c = small_task(4);
  const auto path = scratch("task.manifest.jsonl");
  write_manifest(c, path);
  EXPECT_EQ(read_manifest(path), manifest_of(c));
}

TEST(Manifest, RejectsOutOfRangeScore) {
  auto m = manifest_of(small_task(5));
  m.entries[0].is_score = 101;
  EXPECT_THROW(decode_manifest(encode_manifest(m)), FormatError);
  EXPECT_THROW(decode_manifest(""), FormatError);
  EXPECT_THROW(decode_manifest("{not json\n"), FormatError);
}

TEST(Corpus, DirectoryRoundTripIsExact) {
  const Corpus c = small_task(6);
  const fs::path dir = scratch("corpus_dir");
  save_corpus(c, dir);
  EXPECT_EQ(load_corpus(dir, c.name), c);
}

TEST(Alignments, RunLengthRoundTrip) {
  const Corpus c = small_task(7);
  const auto al = decode_alignments(encode_alignments(c.utterances), "test");
  for (const auto& u : c.utterances) EXPECT_EQ(al.at(u.utt_id), u.phone_alignment);
  const std::vector<int> seq = {3, 3, 1, 1, 1, 3};
  const auto rle = run_length_encode(seq);
  ASSERT_EQ(rle.size(), 3u);
  EXPECT_EQ(rle[1], (std::pair<int, std::size_t>{1, 3}));
}

TEST(EncoderFile, RoundTripAndMagic) {
  Rng rng(1);
  EncoderConfig cfg;
  EncoderParams p = init_encoder(cfg, rng);
  std::vector<SpeakerProfile> speakers(2);
  speakers[0].speaker_id = "s0";
  speakers[1].speaker_id = "s1";
  add_speakers(p, speakers, rng);
  const auto path = scratch("model.enc");
  save_encoder(p, path);
  EXPECT_EQ(load_encoder(path), p);
  auto bytes = encode_encoder(p);
  bytes[0] ^= 0xFF;
  EXPECT_THROW(decode_encoder(bytes), FormatError);
  auto short_bytes = encode_encoder(p);
  short_bytes.resize(short_bytes.size() - 3);
  EXPECT_THROW(decode_encoder(short_bytes), FormatError);
}

TEST(CapsuleFile, RoundTripAndMagic) {
  Rng rng(2);
  CapsuleConfig cfg;
  cfg.n_primary = 4;
  cfg.d_primary = 5;
  cfg.optimizer = Optimizer::kAdam;
  const CapsuleParams p = init_capsule(cfg, rng);
  const auto path = scratch("model.cap");
  save_capsule(p, path);
  const CapsuleParams back = load_capsule(path);
  EXPECT_EQ(back, p);
  EXPECT_EQ(back.config.optimizer, Optimizer::kAdam);
  auto bytes = encode_capsule(p);
  bytes[3] = '9';
  EXPECT_THROW(decode_capsule(bytes), FormatError);
  auto extra = encode_capsule(p);
  extra.push_back(0);
  EXPECT_THROW(decode_capsule(extra), FormatError);
}
