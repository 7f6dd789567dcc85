// dysslu: command-line driver for the synthetic dysarthric SLU pipeline.
//
//   dysslu <subcommand> --config run.toml [--seed N] [--out DIR]
//
// Stages keep their artifacts under <out>/<subcommand>/ and each writes a
// run.json provenance record next to them.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dysslu/config.hpp"
#include "dysslu/formats.hpp"
#include "dysslu/pipeline.hpp"
#include "dysslu/report.hpp"
#include "dysslu/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace dysslu;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// An input produced by an earlier stage is missing.
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

struct Run {
  std::string subcommand;
  RunConfig cfg;
  fs::path out;
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::vector<fs::path> inputs;
  std::vector<fs::path> artifacts;

  fs::path stage(const std::string& name) const { return out / name; }
  fs::path dir() const { return stage(subcommand); }
};

void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p))
    throw MissingPrerequisite("missing " + p.string() + ": run `dysslu " + producer + "` first");
}

std::string checksum(const fs::path& p) { return hex64(fnv1a64(read_file_bytes(p))); }

void write_run_json(Run& r, json extra = json::object()) {
  json j;
  j["subcommand"] = r.subcommand;
  j["config_hash"] = config_hash(r.cfg);
  j["seed"] = r.seed;
  json arts = json::object();
  for (const auto& a : r.artifacts) arts[fs::relative(a, r.out).generic_string()] = checksum(a);
  j["artifacts"] = arts;
  json ins = json::object();
  for (const auto& a : r.inputs) ins[fs::relative(a, r.out).generic_string()] = checksum(a);
  j["inputs"] = ins;
  j["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - r.start).count();
  for (auto& [k, v] : extra.items()) j[k] = v;
  const std::string text = j.dump(2) + "\n";
  write_text_file(r.dir() / "run.json", text);
}

const char* kCorpusNames[] = {"normal", "dysarthric", "task", "probe"};

Corpora load_corpora(Run& r) {
  const fs::path dir = r.stage("synth");
  for (const char* name : kCorpusNames) {
    for (const auto& f : {manifest_file_name(name), alignment_file_name(name), features_file_name(name)}) {
      require_file(dir / f, "synth");
      r.inputs.push_back(dir / f);
    }
  }
  Corpora c;
  c.normal = load_corpus(dir, "normal");
  c.dysarthric = load_corpus(dir, "dysarthric");
  c.task = load_corpus(dir, "task");
  c.probe = load_corpus(dir, "probe");
  c.inventory = c.task.phone_inventory;
  return c;
}

fs::path encoder_path(const Run& r, EncoderVariant v) {
  const std::string stage = is_finetuned(v) ? "finetune" : "pretrain";
  return r.stage(stage) / (variant_name(v) + ".enc");
}

EncoderParams load_variant(Run& r, EncoderVariant v) {
  const fs::path p = encoder_path(r, v);
  require_file(p, is_finetuned(v) ? "finetune" : "pretrain");
  r.inputs.push_back(p);
  return load_encoder(p);
}

/// Task-corpus decoder inputs and frame error rates for every configured
/// variant, read back from the extract stage.
VariantTable load_variant_table(Run& r, const Corpus& task) {
  VariantTable table;
  std::vector<EncoderVariant> need = r.cfg.experiment.encoder_variants;
  for (EncoderVariant v : need) {
    const fs::path bnf = r.stage("extract") / (variant_name(v) + ".task.bnf");
    const fs::path fer = r.stage("extract") / (variant_name(v) + ".fer.json");
    if (!fs::exists(bnf) || !fs::exists(fer))
      throw MissingPrerequisite("missing artifacts for encoder variant '" + variant_name(v) + "' in " +
                                r.stage("extract").string() + ": run `dysslu extract` first");
    r.inputs.push_back(bnf);
    r.inputs.push_back(fer);
    VariantData d;
    d.speakers = speaker_datasets(task, read_bnf_archive(bnf));
    const json fj = json::parse(read_text_file(fer));
    for (auto& [id, val] : fj.at("task").items()) d.frame_error_rate[id] = val.get<double>();
    table[v] = std::move(d);
  }
  return table;
}

/// Protocol replicate seeds: experiment.seeds mixed with the run seed.
std::vector<std::uint64_t> protocol_seeds(const Run& r) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s : r.cfg.experiment.seeds) out.push_back(Rng::derive(r.seed, s));
  return out;
}

void emit(Run& r, const ExperimentReport& rep) {
  for (const auto& p : emit_report(rep, r.dir())) r.artifacts.push_back(p);
  json meta = rep.metadata;
  write_text_file(r.dir() / "metadata.json", meta.dump(2) + "\n");
  r.artifacts.push_back(r.dir() / "metadata.json");
}

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << "\n";
}

// ---------------------------------------------------------------------------

int cmd_synth(Run& r) {
  const Corpora c = synth_corpora(r.cfg.corpus, r.seed);
  for (const Corpus* corpus : {&c.normal, &c.dysarthric, &c.task, &c.probe}) {
    save_corpus(*corpus, r.dir());
    for (const auto& f : {manifest_file_name(corpus->name), alignment_file_name(corpus->name),
                          features_file_name(corpus->name)})
      r.artifacts.push_back(r.dir() / f);
    std::cout << corpus->name << ": " << corpus->speakers.size() << " speakers, " << corpus->utterances.size()
              << " utterances\n";
  }
  write_run_json(r);
  return kExitOk;
}

json log_json(const TrainLog& log) { return {{"epoch_loss", log.epoch_loss}, {"epoch_accuracy", log.epoch_accuracy}}; }

int cmd_pretrain(Run& r) {
  const Corpora c = load_corpora(r);
  TrainLog log;
  const EncoderParams base = pretrain_stage(r.cfg.encoder, c.normal, r.seed, &log);
  save_encoder(freeze(base), r.dir() / "normal_only.enc");
  save_encoder(freeze(initial_encoder(r.cfg.encoder, r.seed)), r.dir() / "none.enc");
  r.artifacts = {r.dir() / "none.enc", r.dir() / "normal_only.enc"};
  std::cout << "pretrained " << log.epoch_loss.size() << " epochs, final frame accuracy "
            << (log.epoch_accuracy.empty() ? 0.0 : log.epoch_accuracy.back()) << "\n";
  write_run_json(r, {{"training", log_json(log)}});
  return kExitOk;
}

int cmd_finetune(Run& r) {
  const EncoderParams base = load_variant(r, EncoderVariant::kNormalOnly);
  const Corpora c = load_corpora(r);
  json logs = json::object();
  for (EncoderVariant v : r.cfg.experiment.encoder_variants) {
    if (!is_finetuned(v)) continue;
    TrainLog log;
    const EncoderParams p = freeze(finetune_stage(v, base, c, r.cfg.encoder, r.seed, &log));
    const fs::path path = r.dir() / (variant_name(v) + ".enc");
    save_encoder(p, path);
    r.artifacts.push_back(path);
    logs[variant_name(v)] = log_json(log);
    std::cout << variant_name(v) << ": " << log.epoch_loss.size() << " epochs\n";
  }
  if (r.artifacts.empty()) std::cout << "no finetuned variants configured\n";
  write_run_json(r, {{"training", logs}});
  return kExitOk;
}

int cmd_extract(Run& r) {
  std::map<EncoderVariant, EncoderParams> enc;
  for (EncoderVariant v : r.cfg.experiment.encoder_variants) enc[v] = load_variant(r, v);
  const Corpora c = load_corpora(r);
  for (const auto& [v, p] : enc) {
    const fs::path bnf = r.dir() / (variant_name(v) + ".task.bnf");
    write_bnf_archive(extract_bnf(p, c.task), bnf);
    json fer;
    fer["task"] = speaker_frame_error_rates(p, c.task);
    fer["probe"] = speaker_frame_error_rates(p, c.probe);
    json is = json::object();
    for (const auto& s : c.probe.speakers) is[s.speaker_id] = s.intelligibility_score;
    fer["probe_is"] = is;
    const fs::path ferp = r.dir() / (variant_name(v) + ".fer.json");
    write_text_file(ferp, fer.dump(2) + "\n");
    r.artifacts.push_back(bnf);
    r.artifacts.push_back(ferp);
    std::cout << variant_name(v) << ": task FER " << frame_error_rate(p, c.task) << "\n";
  }
  write_run_json(r);
  return kExitOk;
}

int cmd_train_slu(Run& r) {
  const Corpora c = load_corpora(r);
  const VariantTable table = load_variant_table(r, c.task);
  const CapsuleConfig cc = r.cfg.decoder_config();
  std::string csv = csv_row({"variant", "speaker", "is", "train_size", "test_f1"});
  for (const auto& [v, data] : table) {
    for (std::size_t s = 0; s < data.speakers.size(); ++s) {
      const SpeakerData& sd = data.speakers[s];
      Rng split_rng(Rng::derive(Rng::derive(r.seed, "train_slu"), s));
      Split split;
      try {
        split = low_resource_split(sd, split_rng);
      } catch (const ProtocolError& e) {
        std::cerr << "warning: skipping speaker " << sd.speaker_id << ": " << e.what() << "\n";
        continue;
      }
      Rng fit_rng(Rng::derive(Rng::derive(r.seed, "train_slu_fit"), s));
      const auto train = gather(sd, split.train);
      const CapsuleModel model(fit(cc, train, fit_rng));
      const Evaluation ev = evaluate(model, gather(sd, split.test));
      const fs::path path = r.dir() / variant_name(v) / (sd.speaker_id + ".cap");
      save_capsule(model.params(), path);
      r.artifacts.push_back(path);
      csv += csv_row({variant_name(v), sd.speaker_id, csv_number(sd.is_score), std::to_string(train.size()),
                      csv_number(ev.f1)});
    }
  }
  write_text_file(r.dir() / "slu.csv", csv);
  r.artifacts.push_back(r.dir() / "slu.csv");
  write_run_json(r);
  return kExitOk;
}

int cmd_curve(Run& r) {
  const Corpora c = load_corpora(r);
  const VariantTable table = load_variant_table(r, c.task);
  const ModelFactory factory = capsule_factory(r.cfg.decoder_config());
  std::vector<std::string> warnings;
  std::map<std::string, std::vector<std::vector<CurvePoint>>> reps;
  std::vector<std::string> order;
  for (std::uint64_t s : protocol_seeds(r)) {
    for (auto& vc : variant_curves(table, r.cfg.experiment, factory, s, &warnings)) {
      if (!reps.count(vc.variant)) order.push_back(vc.variant);
      reps[vc.variant].push_back(std::move(vc.points));
    }
  }
  ExperimentReport rep;
  // With one protocol seed std_f1 stays the spread across speakers; with
  // several it becomes the spread across seeds.
  for (const auto& v : order)
    rep.curves.push_back({v, reps[v].size() == 1 ? reps[v].front() : average_curves(reps[v])});
  rep.metadata["protocol"] = "learning_curve";
  rep.metadata["std_f1"] = reps.empty() || reps.begin()->second.size() == 1 ? "across speakers" : "across seeds";
  rep.metadata["n_blocks"] = std::to_string(r.cfg.experiment.n_blocks);
  rep.metadata["n_folds"] = std::to_string(r.cfg.experiment.n_folds);
  rep.metadata["x_axis"] = "n_train is the mean training-set size in utterances per speaker at k blocks";
  print_warnings(warnings);
  emit(r, rep);
  write_run_json(r);
  return kExitOk;
}

int cmd_transfer_report(Run& r) {
  const Corpora c = load_corpora(r);
  const VariantTable table = load_variant_table(r, c.task);
  if (!table.count(EncoderVariant::kNormalOnly))
    throw MissingPrerequisite("transfer-report needs encoder variant 'normal_only' in experiment.encoder_variants");
  const ModelFactory factory = capsule_factory(r.cfg.decoder_config());
  std::vector<std::string> warnings;
  std::vector<std::vector<SpeakerResult>> reps;
  for (std::uint64_t s : protocol_seeds(r)) reps.push_back(is_transfer_rows(table, r.cfg.experiment, factory, s, &warnings));
  ExperimentReport rep;
  rep.speakers = average_rows(reps);
  rep.metadata["protocol"] = "low_resource";
  rep.metadata["low_resource_folds"] = std::to_string(r.cfg.experiment.low_resource_folds);
  rep.metadata["rel_improvement"] = "f1 minus f1 of normal_only for the same speaker";
  print_warnings(warnings);
  emit(r, rep);

  std::string probe = csv_row({"speaker", "is", "variant", "fer"});
  for (EncoderVariant v : r.cfg.experiment.encoder_variants) {
    const json fj = json::parse(read_text_file(r.stage("extract") / (variant_name(v) + ".fer.json")));
    for (auto& [id, val] : fj.at("probe").items())
      probe += csv_row({id, csv_number(fj.at("probe_is").at(id).get<double>()), variant_name(v),
                        csv_number(val.get<double>())});
  }
  write_text_file(r.dir() / "probe_fer.csv", probe);
  r.artifacts.push_back(r.dir() / "probe_fer.csv");
  write_run_json(r);
  return kExitOk;
}

int cmd_validate(Run& r) {
  const auto results = run_self_checks();
  bool ok = true;
  json checks = json::array();
  for (const auto& c : results) {
    std::printf("%-18s %s  %.2fs  %s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL", c.seconds, c.detail.c_str());
    ok &= c.passed;
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}, {"seconds", c.seconds}});
  }
  fs::create_directories(r.dir());
  write_run_json(r, {{"checks", checks}, {"passed", ok}});
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic dysarthric spoken-language-understanding pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;

  using Handler = int (*)(Run&);
  const std::vector<std::pair<std::string, std::pair<std::string, Handler>>> commands = {
      {"synth", {"generate the normal, impaired, task and probe corpora", cmd_synth}},
      {"pretrain", {"train the encoder on normal speech", cmd_pretrain}},
      {"finetune", {"finetune the encoder on impaired speech mixes", cmd_finetune}},
      {"extract", {"extract bottleneck features and frame error rates", cmd_extract}},
      {"train-slu", {"train per-speaker capsule decoders", cmd_train_slu}},
      {"curve", {"learning curves per encoder variant", cmd_curve}},
      {"transfer-report", {"low-resource F1 by intelligibility and variant", cmd_transfer_report}},
      {"validate", {"run the invariant and gradient self-checks", cmd_validate}},
  };
  std::map<CLI::App*, std::pair<std::string, Handler>> handlers;
  for (const auto& [name, info] : commands) {
    CLI::App* sub = app.add_subcommand(name, info.first);
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_option("--seed", seed, "override [global] seed");
    sub->add_option("--out", out, "override [global] output_dir");
    handlers[sub] = {name, info.second};
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Run run;
  CLI::App* chosen = app.get_subcommands().front();
  run.subcommand = handlers.at(chosen).first;
  try {
    run.cfg = load_run_config(config_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (seed) run.cfg.seed = *seed;
  if (out) run.cfg.output_dir = *out;
  run.cfg.experiment.output_dir = run.cfg.output_dir;
  run.seed = run.cfg.seed;
  run.out = run.cfg.output_dir;

  try {
    return handlers.at(chosen).second(run);
  } catch (const MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
