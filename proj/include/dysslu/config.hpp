#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dysslu/binary_io.hpp"
#include "dysslu/capsule.hpp"
#include "dysslu/corpus.hpp"
#include "dysslu/encoder.hpp"
#include "dysslu/error.hpp"
#include "dysslu/harness.hpp"
#include "dysslu/pipeline.hpp"

namespace dysslu {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// A small TOML subset: [section] headers, `key = value` pairs, # comments.
// Values are integers, floats, booleans, double-quoted strings, and
// (possibly nested, possibly multi-line) bracketed lists of those.
// ---------------------------------------------------------------------------

struct ConfigValue {
  enum class Kind { kInteger, kFloat, kBool, kString, kList };
  Kind kind = Kind::kInteger;
  std::int64_t integer = 0;
  double real = 0.0;
  bool boolean = false;
  std::string text;
  std::vector<ConfigValue> list;
  int line = 0;

  std::string kind_name() const {
    switch (kind) {
      case Kind::kInteger: return "integer";
      case Kind::kFloat: return "float";
      case Kind::kBool: return "boolean";
      case Kind::kString: return "string";
      case Kind::kList: return "list";
    }
    return "?";
  }
};

struct ConfigEntry {
  std::string section;
  std::string key;
  ConfigValue value;
  int line = 0;
};

namespace detail {

class ValueParser {
 public:
  ValueParser(std::string_view text, int line, std::string context)
      : s_(text), line_(line), context_(std::move(context)) {}

  ConfigValue parse_all() {
    ConfigValue v = value();
    skip_space();
    if (pos_ != s_.size()) fail("unexpected trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(context_ + ":" + std::to_string(line_) + ": " + msg);
  }

  void skip_space() {
    while (pos_ < s_.size()) {
      const char c = s_[pos_];
      if (c == '\n') {
        ++line_, ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        ++pos_;
      } else if (c == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  ConfigValue value() {
    skip_space();
    if (pos_ >= s_.size()) fail("missing value");
    ConfigValue v;
    v.line = line_;
    const char c = s_[pos_];
    if (c == '[') {
      v.kind = ConfigValue::Kind::kList;
      ++pos_;
      skip_space();
      if (pos_ < s_.size() && s_[pos_] == ']') {
        ++pos_;
        return v;
      }
      while (true) {
        v.list.push_back(value());
        skip_space();
        if (pos_ >= s_.size()) fail("unterminated list opened on line " + std::to_string(v.line));
        if (s_[pos_] == ',') {
          ++pos_;
          skip_space();
          if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return v;
          }
          continue;
        }
        if (s_[pos_] == ']') {
          ++pos_;
          return v;
        }
        fail("expected ',' or ']' in list");
      }
    }
    if (c == '"') return string_value();
    return bare_value();
  }

  ConfigValue string_value() {
    ConfigValue v;
    v.kind = ConfigValue::Kind::kString;
    v.line = line_;
    ++pos_;
    while (true) {
      if (pos_ >= s_.size() || s_[pos_] == '\n') fail("unterminated string");
      const char c = s_[pos_++];
      if (c == '"') return v;
      if (c != '\\') {
        v.text.push_back(c);
        continue;
      }
      if (pos_ >= s_.size()) fail("unterminated escape");
      switch (const char e = s_[pos_++]) {
        case '"': v.text.push_back('"'); break;
        case '\\': v.text.push_back('\\'); break;
        case 'n': v.text.push_back('\n'); break;
        case 't': v.text.push_back('\t'); break;
        default: fail(std::string("unsupported escape \\") + e);
      }
    }
  }

  ConfigValue bare_value() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' &&
           !std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
    std::string tok(s_.substr(start, pos_ - start));
    ConfigValue v;
    v.line = line_;
    if (tok == "true" || tok == "false") {
      v.kind = ConfigValue::Kind::kBool;
      v.boolean = tok == "true";
      return v;
    }
    std::string digits;
    for (char ch : tok)
      if (ch != '_') digits.push_back(ch);
    if (digits.empty()) fail("missing value");
    const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits.find("inf") != std::string::npos ||
                          digits.find("nan") != std::string::npos;
    std::size_t used = 0;
    try {
      if (is_float) {
        v.kind = ConfigValue::Kind::kFloat;
        v.real = std::stod(digits, &used);
      } else {
        v.kind = ConfigValue::Kind::kInteger;
        v.integer = std::stoll(digits, &used, 10);
      }
    } catch (const std::exception&) {
      fail("invalid value '" + tok + "'");
    }
    if (used != digits.size()) fail("invalid value '" + tok + "'");
    return v;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  int line_;
  std::string context_;
};

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

/// Bracket depth change of a line, ignoring brackets in strings and comments.
inline int bracket_balance(std::string_view line) {
  int depth = 0;
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
    } else if (c == '"') {
      in_str = true;
    } else if (c == '#') {
      break;
    } else if (c == '[') {
      ++depth;
    } else if (c == ']') {
      --depth;
    }
  }
  return depth;
}

}  // namespace detail

/// Parses config text into entries in file order. Duplicate keys and keys
/// outside a section are errors.
inline std::vector<ConfigEntry> parse_config_text(std::string_view text, const std::string& context = "config") {
  std::vector<ConfigEntry> out;
  std::string section;
  std::map<std::string, int> seen;
  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    lines.push_back(cur);
  }
  auto fail = [&](int line, const std::string& msg) -> ConfigError {
    return ConfigError(context + ":" + std::to_string(line) + ": " + msg);
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const std::string line = detail::trim(lines[i]);
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (close == std::string::npos) throw fail(line_no, "unterminated section header");
      const std::string rest = detail::trim(std::string_view(line).substr(close + 1));
      if (!rest.empty() && rest[0] != '#') throw fail(line_no, "unexpected text after section header");
      section = detail::trim(std::string_view(line).substr(1, close - 1));
      if (section.empty()) throw fail(line_no, "empty section name");
      if (seen.count("[" + section + "]")) throw fail(line_no, "duplicate section [" + section + "]");
      seen["[" + section + "]"] = line_no;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail(line_no, "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw fail(line_no, "missing key");
    for (char c : key)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
        throw fail(line_no, "invalid key '" + key + "'");
    if (section.empty()) throw fail(line_no, "key '" + key + "' outside of any section");
    std::string value_text = lines[i].substr(lines[i].find('=') + 1);
    int depth = detail::bracket_balance(value_text);
    while (depth > 0 && i + 1 < lines.size()) {
      ++i;
      value_text += "\n" + lines[i];
      depth += detail::bracket_balance(lines[i]);
    }
    const std::string full = section + "." + key;
    if (seen.count(full)) throw fail(line_no, "duplicate key '" + key + "' in [" + section + "]");
    seen[full] = line_no;
    ConfigEntry e;
    e.section = section;
    e.key = key;
    e.line = line_no;
    e.value = detail::ValueParser(value_text, line_no, context).parse_all();
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// RunConfig: every module's settings plus the global seed and output dir.
// ---------------------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  CorpusSettings corpus;
  EncoderConfig encoder;
  CapsuleConfig capsule;
  ExperimentConfig experiment;

  void validate() const {
    validate_strata(corpus.dysarthric_strata);
    validate_strata(corpus.probe_strata);
    std::set<std::string> ids;
    for (const auto& t : corpus.task_speakers) {
      if (!(t.intelligibility_score >= 0.0 && t.intelligibility_score <= 100.0))
        throw ConfigError("config: task speaker " + t.speaker_id + " has IS outside [0, 100]");
      if (!ids.insert(t.speaker_id).second) throw ConfigError("config: duplicate task speaker " + t.speaker_id);
    }
    if (corpus.inventory.n_phones != encoder.n_phone_targets)
      throw ConfigError("config: corpus.n_phones (" + std::to_string(corpus.inventory.n_phones) +
                        ") must equal encoder phone targets (" + std::to_string(encoder.n_phone_targets) + ")");
    if (corpus.inventory.feature_dim != encoder.input_dim)
      throw ConfigError("config: corpus.feature_dim must equal the encoder input dimension");
    encoder.validate();
    CapsuleConfig c = capsule;
    c.bnf_dim = encoder.bnf_dim;
    c.n_output = corpus.task_slot_labels;
    c.validate();
    experiment.validate();
  }

  /// Decoder settings with the dimensions implied by the encoder and task.
  CapsuleConfig decoder_config() const {
    CapsuleConfig c = capsule;
    c.bnf_dim = encoder.bnf_dim;
    c.n_output = corpus.task_slot_labels;
    return c;
  }
};

namespace detail {

[[noreturn]] inline void type_error(const ConfigEntry& e, const std::string& want) {
  throw ConfigError("[" + e.section + "] " + e.key + " must be " + want + ", got " + e.value.kind_name());
}

inline double as_real(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind == ConfigValue::Kind::kFloat) return v.real;
  if (v.kind == ConfigValue::Kind::kInteger) return static_cast<double>(v.integer);
  type_error(e, "a number");
}

inline std::size_t as_count(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::kInteger) type_error(e, "an integer");
  if (v.integer < 0) throw ConfigError("[" + e.section + "] " + e.key + " must be >= 0");
  return static_cast<std::size_t>(v.integer);
}

inline std::uint64_t as_seed(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::kInteger || v.integer < 0) type_error(e, "a non-negative integer");
  return static_cast<std::uint64_t>(v.integer);
}

inline std::string as_string(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::kString) type_error(e, "a string");
  return v.text;
}

inline bool as_bool(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::kBool) type_error(e, "a boolean");
  return v.boolean;
}

inline const std::vector<ConfigValue>& as_list(const ConfigEntry& e, const ConfigValue& v) {
  if (v.kind != ConfigValue::Kind::kList) type_error(e, "a list");
  return v.list;
}

inline std::vector<Stratum> as_strata(const ConfigEntry& e) {
  std::vector<Stratum> out;
  for (const auto& item : as_list(e, e.value)) {
    const auto& t = as_list(e, item);
    if (t.size() != 3) type_error(e, "a list of [is_low, is_high, speaker_count] triples");
    out.push_back({as_real(e, t[0]), as_real(e, t[1]), as_count(e, t[2])});
  }
  return out;
}

inline std::vector<TaskSpeaker> as_task_speakers(const ConfigEntry& e) {
  std::vector<TaskSpeaker> out;
  for (const auto& item : as_list(e, e.value)) {
    const auto& t = as_list(e, item);
    if (t.size() != 2) type_error(e, "a list of [speaker_id, is] pairs");
    out.push_back({as_string(e, t[0]), as_real(e, t[1])});
  }
  return out;
}

inline std::vector<LayerContext> as_context(const ConfigEntry& e) {
  std::vector<LayerContext> out;
  for (const auto& item : as_list(e, e.value)) {
    const auto& t = as_list(e, item);
    if (t.size() != 2) type_error(e, "a list of [kernel, dilation] pairs");
    out.push_back({as_count(e, t[0]), as_count(e, t[1])});
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const ConfigEntry&)>;

inline const std::map<std::string, std::map<std::string, Setter>>& config_schema() {
  using E = const ConfigEntry&;
  static const std::map<std::string, std::map<std::string, Setter>> schema = {
      {"global",
       {
           {"seed", [](RunConfig& c, E e) { c.seed = as_seed(e, e.value); }},
           {"output_dir", [](RunConfig& c, E e) { c.output_dir = as_string(e, e.value); }},
       }},
      {"corpus",
       {
           {"n_phones",
            [](RunConfig& c, E e) { c.corpus.inventory.n_phones = c.encoder.n_phone_targets = as_count(e, e.value); }},
           {"feature_dim",
            [](RunConfig& c, E e) { c.corpus.inventory.feature_dim = c.encoder.input_dim = as_count(e, e.value); }},
           {"prototype_scale", [](RunConfig& c, E e) { c.corpus.inventory.prototype_scale = as_real(e, e.value); }},
           {"noise_scale", [](RunConfig& c, E e) { c.corpus.inventory.noise_scale = as_real(e, e.value); }},
           {"offset_per_severity",
            [](RunConfig& c, E e) { c.corpus.distortion.offset_per_severity = as_real(e, e.value); }},
           {"substitution_per_severity",
            [](RunConfig& c, E e) { c.corpus.distortion.substitution_per_severity = as_real(e, e.value); }},
           {"jitter_per_severity",
            [](RunConfig& c, E e) { c.corpus.distortion.jitter_per_severity = as_real(e, e.value); }},
           {"shared_fraction", [](RunConfig& c, E e) { c.corpus.distortion.shared_fraction = as_real(e, e.value); }},
           {"normal_speakers", [](RunConfig& c, E e) { c.corpus.normal_speakers = as_count(e, e.value); }},
           {"normal_utts_per_speaker",
            [](RunConfig& c, E e) { c.corpus.normal_utts_per_speaker = as_count(e, e.value); }},
           {"dysarthric_strata", [](RunConfig& c, E e) { c.corpus.dysarthric_strata = as_strata(e); }},
           {"dysarthric_utts_per_speaker",
            [](RunConfig& c, E e) { c.corpus.dysarthric_utts_per_speaker = as_count(e, e.value); }},
           {"task_commands", [](RunConfig& c, E e) { c.corpus.task_commands = as_count(e, e.value); }},
           {"task_slot_labels", [](RunConfig& c, E e) { c.corpus.task_slot_labels = as_count(e, e.value); }},
           {"task_repetitions", [](RunConfig& c, E e) { c.corpus.task_repetitions = as_count(e, e.value); }},
           {"task_min_commands", [](RunConfig& c, E e) { c.corpus.task_min_commands = as_count(e, e.value); }},
           {"task_speakers", [](RunConfig& c, E e) { c.corpus.task_speakers = as_task_speakers(e); }},
           {"probe_strata", [](RunConfig& c, E e) { c.corpus.probe_strata = as_strata(e); }},
           {"probe_utts_per_speaker",
            [](RunConfig& c, E e) { c.corpus.probe_utts_per_speaker = as_count(e, e.value); }},
       }},
      {"encoder",
       {
           {"n_layers",
            [](RunConfig& c, E e) {
              c.encoder.n_layers = as_count(e, e.value);
              c.encoder.context = default_context(c.encoder.n_layers);
            }},
           {"context", [](RunConfig& c, E e) { c.encoder.context = as_context(e); }},
           {"hidden_dim", [](RunConfig& c, E e) { c.encoder.hidden_dim = as_count(e, e.value); }},
           {"bnf_dim", [](RunConfig& c, E e) { c.encoder.bnf_dim = as_count(e, e.value); }},
           {"lr_initial", [](RunConfig& c, E e) { c.encoder.lr_initial = as_real(e, e.value); }},
           {"lr_final", [](RunConfig& c, E e) { c.encoder.lr_final = as_real(e, e.value); }},
           {"n_epochs", [](RunConfig& c, E e) { c.encoder.n_epochs = as_count(e, e.value); }},
           {"finetune_epochs", [](RunConfig& c, E e) { c.encoder.finetune_epochs = as_count(e, e.value); }},
           {"batch_size", [](RunConfig& c, E e) { c.encoder.batch_size = as_count(e, e.value); }},
           {"speaker_embed_dim", [](RunConfig& c, E e) { c.encoder.speaker_embed_dim = as_count(e, e.value); }},
           {"normal_mix_fraction", [](RunConfig& c, E e) { c.encoder.normal_mix_fraction = as_real(e, e.value); }},
           {"speed_ratios",
            [](RunConfig& c, E e) {
              c.encoder.speed_ratios.clear();
              for (const auto& v : as_list(e, e.value)) c.encoder.speed_ratios.push_back(as_real(e, v));
            }},
       }},
      {"capsule",
       {
           {"n_primary", [](RunConfig& c, E e) { c.capsule.n_primary = as_count(e, e.value); }},
           {"d_primary", [](RunConfig& c, E e) { c.capsule.d_primary = as_count(e, e.value); }},
           {"d_output", [](RunConfig& c, E e) { c.capsule.d_output = as_count(e, e.value); }},
           {"routing_iters", [](RunConfig& c, E e) { c.capsule.routing_iters = as_count(e, e.value); }},
           {"detect_threshold", [](RunConfig& c, E e) { c.capsule.detect_threshold = as_real(e, e.value); }},
           {"margin_plus", [](RunConfig& c, E e) { c.capsule.margin_plus = as_real(e, e.value); }},
           {"margin_minus", [](RunConfig& c, E e) { c.capsule.margin_minus = as_real(e, e.value); }},
           {"lambda_neg", [](RunConfig& c, E e) { c.capsule.lambda_neg = as_real(e, e.value); }},
           {"learning_rate", [](RunConfig& c, E e) { c.capsule.learning_rate = as_real(e, e.value); }},
           {"n_epochs", [](RunConfig& c, E e) { c.capsule.n_epochs = as_count(e, e.value); }},
           {"batch_size", [](RunConfig& c, E e) { c.capsule.batch_size = as_count(e, e.value); }},
           {"per_capsule_projection",
            [](RunConfig& c, E e) { c.capsule.per_capsule_projection = as_bool(e, e.value); }},
           {"route_init_std", [](RunConfig& c, E e) { c.capsule.route_init_std = as_real(e, e.value); }},
           {"optimizer",
            [](RunConfig& c, E e) {
              try {
                c.capsule.optimizer = parse_optimizer(as_string(e, e.value));
              } catch (const InvalidArgument& ex) {
                throw ConfigError("config:" + std::to_string(e.line) + ": " + ex.what());
              }
            }},
       }},
      {"experiment",
       {
           {"encoder_variants",
            [](RunConfig& c, E e) {
              c.experiment.encoder_variants.clear();
              for (const auto& v : as_list(e, e.value)) {
                try {
                  c.experiment.encoder_variants.push_back(parse_variant(as_string(e, v)));
                } catch (const InvalidArgument& ex) {
                  throw ConfigError("config:" + std::to_string(e.line) + ": " + ex.what());
                }
              }
            }},
           {"n_blocks", [](RunConfig& c, E e) { c.experiment.n_blocks = as_count(e, e.value); }},
           {"n_folds", [](RunConfig& c, E e) { c.experiment.n_folds = as_count(e, e.value); }},
           {"low_resource_folds", [](RunConfig& c, E e) { c.experiment.low_resource_folds = as_count(e, e.value); }},
           {"seeds",
            [](RunConfig& c, E e) {
              c.experiment.seeds.clear();
              for (const auto& v : as_list(e, e.value)) c.experiment.seeds.push_back(as_seed(e, v));
            }},
       }},
  };
  return schema;
}

}  // namespace detail

/// Builds a RunConfig from config text; unknown sections and keys are errors.
inline RunConfig parse_run_config(std::string_view text, const std::string& context = "config") {
  RunConfig cfg;
  const auto& schema = detail::config_schema();
  for (const auto& e : parse_config_text(text, context)) {
    auto sec = schema.find(e.section);
    if (sec == schema.end())
      throw ConfigError(context + ":" + std::to_string(e.line) + ": unknown section [" + e.section + "]");
    auto key = sec->second.find(e.key);
    if (key == sec->second.end())
      throw ConfigError(context + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "' in [" + e.section +
                        "]");
    try {
      key->second(cfg, e);
    } catch (const Error& ex) {
      throw ConfigError(context + ":" + std::to_string(e.line) + ": " + ex.what());
    }
  }
  cfg.experiment.output_dir = cfg.output_dir;
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& ex) {
    throw ConfigError(context + ": " + ex.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  return out + "\"";
}

}  // namespace detail

/// Canonical text of a config: every setting, fixed order, full precision.
/// Parsing it back yields the same config, and its hash identifies a run.
inline std::string canonical_config_text(const RunConfig& c) {
  using detail::fmt_real;
  std::ostringstream o;
  auto strata = [&](const std::vector<Stratum>& v) {
    o << "[";
    for (std::size_t i = 0; i < v.size(); ++i)
      o << (i ? ", " : "") << "[" << fmt_real(v[i].is_low) << ", " << fmt_real(v[i].is_high) << ", "
        << v[i].speaker_count << "]";
    o << "]\n";
  };
  o << "[global]\nseed = " << c.seed << "\noutput_dir = " << detail::quote(c.output_dir) << "\n\n";
  const auto& k = c.corpus;
  o << "[corpus]\nn_phones = " << k.inventory.n_phones << "\nfeature_dim = " << k.inventory.feature_dim
    << "\nprototype_scale = " << fmt_real(k.inventory.prototype_scale)
    << "\nnoise_scale = " << fmt_real(k.inventory.noise_scale)
    << "\noffset_per_severity = " << fmt_real(k.distortion.offset_per_severity)
    << "\nsubstitution_per_severity = " << fmt_real(k.distortion.substitution_per_severity)
    << "\njitter_per_severity = " << fmt_real(k.distortion.jitter_per_severity)
    << "\nshared_fraction = " << fmt_real(k.distortion.shared_fraction)
    << "\nnormal_speakers = " << k.normal_speakers << "\nnormal_utts_per_speaker = " << k.normal_utts_per_speaker
    << "\ndysarthric_strata = ";
  strata(k.dysarthric_strata);
  o << "dysarthric_utts_per_speaker = " << k.dysarthric_utts_per_speaker << "\ntask_commands = " << k.task_commands
    << "\ntask_slot_labels = " << k.task_slot_labels << "\ntask_repetitions = " << k.task_repetitions
    << "\ntask_min_commands = " << k.task_min_commands << "\ntask_speakers = [";
  for (std::size_t i = 0; i < k.task_speakers.size(); ++i)
    o << (i ? ", " : "") << "[" << detail::quote(k.task_speakers[i].speaker_id) << ", "
      << fmt_real(k.task_speakers[i].intelligibility_score) << "]";
  o << "]\nprobe_strata = ";
  strata(k.probe_strata);
  o << "probe_utts_per_speaker = " << k.probe_utts_per_speaker << "\n\n";
  const auto& e = c.encoder;
  o << "[encoder]\nn_layers = " << e.n_layers << "\ncontext = [";
  for (std::size_t i = 0; i < e.context.size(); ++i)
    o << (i ? ", " : "") << "[" << e.context[i].kernel << ", " << e.context[i].dilation << "]";
  o << "]\nhidden_dim = " << e.hidden_dim << "\nbnf_dim = " << e.bnf_dim << "\nlr_initial = " << fmt_real(e.lr_initial)
    << "\nlr_final = " << fmt_real(e.lr_final) << "\nn_epochs = " << e.n_epochs
    << "\nfinetune_epochs = " << e.finetune_epochs << "\nbatch_size = " << e.batch_size
    << "\nspeaker_embed_dim = " << e.speaker_embed_dim << "\nnormal_mix_fraction = " << fmt_real(e.normal_mix_fraction)
    << "\nspeed_ratios = [";
  for (std::size_t i = 0; i < e.speed_ratios.size(); ++i) o << (i ? ", " : "") << fmt_real(e.speed_ratios[i]);
  o << "]\n\n";
  const auto& p = c.capsule;
  o << "[capsule]\nn_primary = " << p.n_primary << "\nd_primary = " << p.d_primary << "\nd_output = " << p.d_output
    << "\nrouting_iters = " << p.routing_iters << "\ndetect_threshold = " << fmt_real(p.detect_threshold)
    << "\nmargin_plus = " << fmt_real(p.margin_plus) << "\nmargin_minus = " << fmt_real(p.margin_minus)
    << "\nlambda_neg = " << fmt_real(p.lambda_neg) << "\nlearning_rate = " << fmt_real(p.learning_rate)
    << "\nn_epochs = " << p.n_epochs << "\nbatch_size = " << p.batch_size
    << "\nper_capsule_projection = " << (p.per_capsule_projection ? "true" : "false")
    << "\nroute_init_std = " << fmt_real(p.route_init_std) << "\noptimizer = \"" << optimizer_name(p.optimizer)
    << "\"\n\n";
  const auto& x = c.experiment;
  o << "[experiment]\nencoder_variants = [";
  for (std::size_t i = 0; i < x.encoder_variants.size(); ++i)
    o << (i ? ", " : "") << "\"" << variant_name(x.encoder_variants[i]) << "\"";
  o << "]\nn_blocks = " << x.n_blocks << "\nn_folds = " << x.n_folds << "\nlow_resource_folds = " << x.low_resource_folds
    << "\nseeds = [";
  for (std::size_t i = 0; i < x.seeds.size(); ++i) o << (i ? ", " : "") << x.seeds[i];
  o << "]\n";
  return o.str();
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(canonical_config_text(c))); }

}  // namespace dysslu
