#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dysslu/binary_io.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/error.hpp"
#include "dysslu/matrix.hpp"

namespace dysslu {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Feature archive ("BNF1")
//
//   "BNF1"
//   repeated: u16 id_len | id (UTF-8) | u32 rows | u32 cols | rows*cols f32
//   u32 record_count
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

struct FeatureRecord {
  std::string id;
  Matrix features;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

inline std::vector<std::uint8_t> encode_bnf_archive(std::span<const FeatureRecord> records) {
  ByteWriter w;
  w.magic("BNF1");
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw InvalidArgument("feature archive: duplicate id " + r.id);
    if (!r.features.all_finite()) throw InvalidArgument("feature archive: non-finite values in " + r.id);
    w.str16(r.id);
    w.u32(static_cast<std::uint32_t>(r.features.rows()));
    w.u32(static_cast<std::uint32_t>(r.features.cols()));
    for (double x : r.features.data()) w.f32(static_cast<float>(x));
  }
  w.u32(static_cast<std::uint32_t>(records.size()));
  return w.buffer();
}

inline std::vector<FeatureRecord> decode_bnf_archive(std::span<const std::uint8_t> bytes,
                                                     const std::string& context = "feature archive") {
  if (bytes.size() < 8) {
    if (bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) != "BNF1")
      throw FormatError(context + ": bad magic (expected \"BNF1\")");
    throw FormatError(context + ": truncated (" + std::to_string(bytes.size()) + " bytes)");
  }
  ByteReader header(bytes, context);
  header.expect_magic("BNF1");
  ByteReader tail(bytes.subspan(bytes.size() - 4), context);
  const std::uint32_t expected = tail.u32();

  ByteReader r(bytes.subspan(4, bytes.size() - 8), context);
  std::vector<FeatureRecord> out;
  std::set<std::string> seen;
  while (r.remaining() > 0) {
    FeatureRecord rec;
    rec.id = r.str16();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    r.need(n * 4, "feature data of " + rec.id);
    std::vector<double> data(n);
    for (double& x : data) x = static_cast<double>(r.f32());
    rec.features = Matrix(rows, cols, std::move(data));
    if (!seen.insert(rec.id).second) throw FormatError(context + ": duplicate id " + rec.id);
    out.push_back(std::move(rec));
  }
  if (out.size() != expected) {
    throw FormatError(context + ": record count mismatch (trailer says " + std::to_string(expected) +
                      ", found " + std::to_string(out.size()) + ")");
  }
  return out;
}

inline void write_bnf_archive(std::span<const FeatureRecord> records, const fs::path& path) {
  write_file_bytes(path, encode_bnf_archive(records));
}

inline std::vector<FeatureRecord> read_bnf_archive(const fs::path& path) {
  return decode_bnf_archive(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines). Line 1 is a header object; every further line is
// one utterance.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string utt_id;
  std::string speaker_id;
  double is_score = 100.0;
  std::size_t n_frames = 0;
  LabelSet slot_labels;
  std::optional<int> command_id;
  std::string phone_alignment_ref;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct CorpusManifest {
  std::string name;
  std::size_t feature_dim = 0;
  int n_slot_labels = 0;
  PhoneInventory phone_inventory;
  std::vector<SpeakerProfile> speakers;
  std::vector<Command> commands;
  std::vector<ManifestEntry> entries;

  friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

namespace detail {

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j, std::size_t cols_hint = 0) {
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j.at(0).size() : cols_hint;
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (j.at(r).size() != cols) throw FormatError("ragged matrix in manifest");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

}  // namespace detail

inline std::string alignment_file_name(const std::string& corpus) { return corpus + ".align.jsonl"; }
inline std::string manifest_file_name(const std::string& corpus) { return corpus + ".manifest.jsonl"; }
inline std::string features_file_name(const std::string& corpus) { return corpus + ".feats.bnf"; }

inline CorpusManifest manifest_of(const Corpus& c) {
  CorpusManifest m;
  m.name = c.name;
  m.feature_dim = c.phone_inventory.dim();
  m.n_slot_labels = c.n_slot_labels;
  m.phone_inventory = c.phone_inventory;
  m.speakers = c.speakers;
  m.commands = c.commands;
  for (const auto& u : c.utterances) {
    ManifestEntry e;
    e.utt_id = u.utt_id;
    e.speaker_id = u.speaker_id;
    e.is_score = c.speaker(u.speaker_id).intelligibility_score;
    e.n_frames = u.frames();
    e.slot_labels = u.slot_labels;
    e.command_id = u.command_id;
    e.phone_alignment_ref = alignment_file_name(c.name) + "#" + u.utt_id;
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline std::string encode_manifest(const CorpusManifest& m) {
  json header;
  header["format"] = "dysslu-manifest-1";
  header["corpus"] = m.name;
  header["feature_dim"] = m.feature_dim;
  header["n_slot_labels"] = m.n_slot_labels;
  const auto& inv = m.phone_inventory;
  header["phone_inventory"] = {{"phones", inv.phones},
                               {"prototypes", detail::matrix_to_json(inv.prototypes)},
                               {"noise_scale", inv.noise_scale},
                               {"shared_deviation", detail::matrix_to_json(inv.shared_deviation)},
                               {"confusable", inv.confusable}};
  json speakers = json::array();
  for (const auto& s : m.speakers) {
    speakers.push_back({{"speaker_id", s.speaker_id},
                        {"is_score", s.intelligibility_score},
                        {"substitution_rate", s.substitution_rate},
                        {"duration_jitter", s.duration_jitter},
                        {"prototype_offset", detail::matrix_to_json(s.prototype_offset)}});
  }
  header["speakers"] = speakers;
  json commands = json::array();
  for (const auto& c : m.commands)
    commands.push_back({{"id", c.id}, {"phones", c.phones}, {"slot_labels", c.slot_labels}});
  header["commands"] = commands;

  std::string out = header.dump() + "\n";
  for (const auto& e : m.entries) {
    json j = {{"utt_id", e.utt_id},
              {"speaker_id", e.speaker_id},
              {"is_score", e.is_score},
              {"n_frames", e.n_frames},
              {"slot_labels", e.slot_labels},
              {"command_id", e.command_id ? json(*e.command_id) : json(nullptr)},
              {"phone_alignment_ref", e.phone_alignment_ref}};
    out += j.dump() + "\n";
  }
  return out;
}

inline CorpusManifest decode_manifest(const std::string& text, const std::string& context = "manifest") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  CorpusManifest m;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError(context + ": line " + std::to_string(line_no) + ": " + why);
  };
  auto check_is = [&](double is) {
    if (!(is >= kMinIntelligibility && is <= kMaxIntelligibility))
      throw fail("is_score " + std::to_string(is) + " outside [28, 100]");
  };
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "dysslu-manifest-1") throw fail("missing manifest header");
        m.name = j.at("corpus").get<std::string>();
        m.feature_dim = j.at("feature_dim").get<std::size_t>();
        m.n_slot_labels = j.at("n_slot_labels").get<int>();
        const auto& inv = j.at("phone_inventory");
        m.phone_inventory.phones = inv.at("phones").get<std::vector<std::string>>();
        m.phone_inventory.prototypes = detail::matrix_from_json(inv.at("prototypes"), m.feature_dim);
        m.phone_inventory.noise_scale = inv.at("noise_scale").get<double>();
        m.phone_inventory.shared_deviation = detail::matrix_from_json(inv.at("shared_deviation"), m.feature_dim);
        m.phone_inventory.confusable = inv.at("confusable").get<std::vector<int>>();
        for (const auto& s : j.at("speakers")) {
          SpeakerProfile sp;
          sp.speaker_id = s.at("speaker_id").get<std::string>();
          sp.intelligibility_score = s.at("is_score").get<double>();
          check_is(sp.intelligibility_score);
          sp.substitution_rate = s.at("substitution_rate").get<double>();
          sp.duration_jitter = s.at("duration_jitter").get<double>();
          sp.prototype_offset = detail::matrix_from_json(s.at("prototype_offset"), m.feature_dim);
          m.speakers.push_back(std::move(sp));
        }
        for (const auto& c : j.at("commands")) {
          Command cmd;
          cmd.id = c.at("id").get<int>();
          cmd.phones = c.at("phones").get<std::vector<int>>();
          cmd.slot_labels = c.at("slot_labels").get<LabelSet>();
          m.commands.push_back(std::move(cmd));
        }
        have_header = true;
        continue;
      }
      ManifestEntry e;
      e.utt_id = j.at("utt_id").get<std::string>();
      e.speaker_id = j.at("speaker_id").get<std::string>();
      e.is_score = j.at("is_score").get<double>();
      check_is(e.is_score);
      e.n_frames = j.at("n_frames").get<std::size_t>();
      e.slot_labels = j.at("slot_labels").get<LabelSet>();
      if (!j.at("command_id").is_null()) e.command_id = j.at("command_id").get<int>();
      e.phone_alignment_ref = j.at("phone_alignment_ref").get<std::string>();
      m.entries.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw fail(std::string("invalid field: ") + e.what());
    }
  }
  if (!have_header) throw FormatError(context + ": empty manifest (no header line)");
  return m;
}

inline void write_manifest(const Corpus& c, const fs::path& path) {
  const std::string text = encode_manifest(manifest_of(c));
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline CorpusManifest read_manifest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_manifest(std::string(bytes.begin(), bytes.end()), path.string());
}

// ---------------------------------------------------------------------------
// Alignments (JSON lines): {"utt_id": ..., "runs": [[phone, run_length], ...]}
// ---------------------------------------------------------------------------

inline std::vector<std::pair<int, std::size_t>> run_length_encode(std::span<const int> alignment) {
  std::vector<std::pair<int, std::size_t>> runs;
  for (int p : alignment) {
    if (!runs.empty() && runs.back().first == p)
      ++runs.back().second;
    else
      runs.emplace_back(p, 1);
  }
  return runs;
}

inline std::string encode_alignments(std::span<const Utterance> utts) {
  std::string out;
  for (const auto& u : utts) {
    json runs = json::array();
    for (auto [p, n] : run_length_encode(u.phone_alignment)) runs.push_back({p, n});
    out += json{{"utt_id", u.utt_id}, {"runs", runs}}.dump() + "\n";
  }
  return out;
}

inline std::map<std::string, std::vector<int>> decode_alignments(const std::string& text,
                                                                 const std::string& context = "alignments") {
  std::map<std::string, std::vector<int>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      std::vector<int> frames;
      for (const auto& run : j.at("runs")) {
        const int p = run.at(0).get<int>();
        const auto n = run.at(1).get<std::size_t>();
        frames.insert(frames.end(), n, p);
      }
      out[j.at("utt_id").get<std::string>()] = std::move(frames);
    } catch (const json::exception& e) {
      throw FormatError(context + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole-corpus persistence: <dir>/<name>.{manifest.jsonl,align.jsonl,feats.bnf}
// ---------------------------------------------------------------------------

inline std::vector<FeatureRecord> feature_records(const Corpus& c) {
  std::vector<FeatureRecord> recs;
  recs.reserve(c.utterances.size());
  for (const auto& u : c.utterances) recs.push_back({u.utt_id, u.features});
  return recs;
}

inline void save_corpus(const Corpus& c, const fs::path& dir) {
  fs::create_directories(dir);
  write_manifest(c, dir / manifest_file_name(c.name));
  const std::string al = encode_alignments(c.utterances);
  write_file_bytes(dir / alignment_file_name(c.name),
                   std::span(reinterpret_cast<const std::uint8_t*>(al.data()), al.size()));
  write_bnf_archive(feature_records(c), dir / features_file_name(c.name));
}

inline Corpus load_corpus(const fs::path& dir, const std::string& name) {
  const CorpusManifest m = read_manifest(dir / manifest_file_name(name));
  const auto align_bytes = read_file_bytes(dir / alignment_file_name(name));
  const auto alignments = decode_alignments(std::string(align_bytes.begin(), align_bytes.end()),
                                            (dir / alignment_file_name(name)).string());
  std::map<std::string, Matrix> feats;
  for (auto& r : read_bnf_archive(dir / features_file_name(name))) feats[r.id] = std::move(r.features);

  Corpus c;
  c.name = m.name;
  c.phone_inventory = m.phone_inventory;
  c.speakers = m.speakers;
  c.commands = m.commands;
  c.n_slot_labels = m.n_slot_labels;
  for (const auto& e : m.entries) {
    Utterance u;
    u.utt_id = e.utt_id;
    u.speaker_id = e.speaker_id;
    u.slot_labels = e.slot_labels;
    u.command_id = e.command_id;
    auto f = feats.find(e.utt_id);
    if (f == feats.end()) throw FormatError(name + ": no features for " + e.utt_id);
    u.features = std::move(f->second);
    auto a = alignments.find(e.utt_id);
    if (a == alignments.end()) throw FormatError(name + ": no alignment for " + e.utt_id);
    u.phone_alignment = a->second;
    if (u.features.rows() != e.n_frames || u.phone_alignment.size() != e.n_frames)
      throw FormatError(name + ": frame count mismatch for " + e.utt_id);
    c.utterances.push_back(std::move(u));
  }
  return c;
}

}  // namespace dysslu
