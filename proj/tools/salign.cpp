// Copyright 2026 The salign Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// salign: data generation, training, evaluation, diagnostics and ablations.
//
// Every command writes into --out, which ends up holding config.json and
// meta.json next to the command's artifacts. Outputs are staged in a sibling
// directory and only moved into place on success.
//
// Exit codes: 0 ok, 2 configuration error, 3 runtime failure.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "salign/experiment.hpp"

namespace fs = std::filesystem;
using namespace salign;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string init;        // train / ablate: starting checkpoint
  std::string checkpoint;  // evaluate / diagnose
  std::string log;         // diagnose: training log for curves
  int start_step = 0;      // train: resume offset
  bool full = false;       // ablate
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IngestionError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + p.string());
  out << s;
}

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

// Content hash over every input: the config file, checkpoints, logs, and a
// data directory (files in sorted order, each prefixed by its relative path).
std::uint64_t inputs_hash(const Options& o, const ExperimentConfig& cfg) {
  std::string blob;
  auto add_file = [&](const fs::path& p, const std::string& tag) {
    blob += tag + "\n" + read_bytes(p) + "\n";
  };
  if (!o.config_path.empty()) add_file(o.config_path, "config");
  if (!o.init.empty()) add_file(o.init, "init");
  if (!o.checkpoint.empty()) add_file(o.checkpoint, "checkpoint");
  if (!o.log.empty()) add_file(o.log, "log");
  const auto source = cfg.get<std::string>("data", "source");
  if (source != "synthetic") {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(source))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_file(f, fs::relative(f, source).generic_string());
  }
  return fnv1a64(blob);
}

void write_self_description(const fs::path& dir, const Options& o, const ExperimentConfig& cfg) {
  write_text(dir / "config.json", cfg.dump());
  write_json(dir / "meta.json", Json{{"command", o.command},
                                     {"seed", cfg.get<std::uint64_t>("train", "seed")},
                                     {"data_seed", cfg.get<std::uint64_t>("data", "seed")},
                                     {"config_fingerprint", hex64(cfg.fingerprint())},
                                     {"inputs_hash", hex64(inputs_hash(o, cfg))}});
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d.ckpt", step);
  return buf;
}

CheckpointHook saving_hook(const fs::path& dir) {
  fs::create_directories(dir);
  return [dir](int step, double, const ModelParams& p) { save_checkpoint(dir / step_name(step), p); };
}

ModelParams load_for(const ExperimentConfig& cfg, const std::string& path) {
  const ModelConfig mc = cfg.model_config();
  return load_checkpoint(path, &mc);
}

void write_training(const fs::path& dir, const TrainResult& r) {
  save_checkpoint(dir / "final.ckpt", r.final_params);
  save_checkpoint(dir / "averaged.ckpt", r.averaged);
  r.log.write_jsonl(dir / "train_log.jsonl");
  Json val = Json::array();
  for (const auto& [step, metric] : r.validation) val.push_back({{"step", step}, {"valid_st_loss", metric}});
  write_json(dir / "validation.json", Json{{"checkpoints", val}, {"averaged_steps", r.averaged_steps}});
  if (!r.log.empty()) export_curves(r.log, dir / "curves.csv");
}

Json scores_json(const std::vector<TaskScore>& scores, const std::string& checkpoint) {
  Json j;
  for (const auto& s : scores) j[s.task] = to_json(s, checkpoint);
  return j;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const Options&, const ExperimentConfig& cfg, const fs::path& out) {
  if (cfg.get<std::string>("data", "source") != "synthetic")
    throw ConfigError("gen-data needs data.source=synthetic");
  write_splits(out / "data", synthetic_splits(cfg));
}

void cmd_pretrain(const Options&, const ExperimentConfig& cfg, const fs::path& out) {
  const DataSplits data = load_data(cfg);
  std::cerr << "pretrain-mt: " << cfg.pretrain_steps() << " steps on " << data.mt.size() << " text pairs\n";
  write_training(out, run_pretrain(cfg, data, saving_hook(out / "checkpoints")));
}

void cmd_train(const Options& o, const ExperimentConfig& cfg, const fs::path& out) {
  const DataSplits data = load_data(cfg);
  ModelParams init;
  if (!o.init.empty()) {
    init = load_for(cfg, o.init);
  } else {
    std::cerr << "train: no --init, running MT pre-training first\n";
    init = run_pretrain(cfg, data).final_params;
  }
  TrainConfig t = cfg.finetune_config();
  t.start_step = o.start_step;
  std::cerr << "train: steps " << t.start_step + 1 << ".." << t.max_steps << "\n";
  const TrainResult r = finetune_multitask(t, std::move(init), data.train, data.mt, data.valid,
                                           saving_hook(out / "checkpoints"));
  write_training(out, r);
  if (!r.audits.empty()) {
    Json a = Json::array();
    for (const auto& x : r.audits)
      a.push_back({{"step", x.step},
                   {"disc_loss_into_encoders", x.disc_loss_into_encoders},
                   {"gen_loss_into_disc", x.gen_loss_into_disc}});
    write_json(out / "partition_audit.json", a);
  }
}

void cmd_evaluate(const Options& o, const ExperimentConfig& cfg, const fs::path& out) {
  const DataSplits data = load_data(cfg);
  ModelParams params = o.checkpoint.empty() ? initial_params(cfg) : load_for(cfg, o.checkpoint);
  const std::string ck = o.checkpoint.empty() ? "untrained" : o.checkpoint;
  for (const auto& s : evaluate_tasks(cfg, params, data.test)) {
    write_json(out / (s.task + ".json"), to_json(s, ck));
    std::cout << s.task << " " << s.metric << " " << s.value << "\n";
  }
}

void cmd_diagnose(const Options& o, const ExperimentConfig& cfg, const fs::path& out) {
  const DataSplits data = load_data(cfg);
  ModelParams params = o.checkpoint.empty() ? initial_params(cfg) : load_for(cfg, o.checkpoint);
  const ModalityReport rep = diagnose(cfg, params, data.test);
  Json j = to_json(rep);
  write_scatter_csv(rep, out / "scatter.csv");
  if (!o.log.empty()) {
    const TrainLog log = TrainLog::read_jsonl(o.log);
    const bool plot = cfg.get<bool>("diagnostics", "plot");
    export_curves(log, out / "curves.csv", plot ? out / "curves.svg" : fs::path{});
    const double rho = disc_gen_spearman(log);
    j["disc_gen_spearman"] = std::isfinite(rho) ? Json(rho) : Json(nullptr);
  }
  write_json(out / "report.json", j);
  std::cout << "discriminator_accuracy " << rep.discriminator_accuracy << "\ncentroid_distance "
            << rep.centroid_distance << "\n";
}

void cmd_ablate(const Options& o, const Json& file, const ExperimentConfig& base, const fs::path& out) {
  const DataSplits data = load_data(base);
  std::map<std::uint64_t, ModelParams> pretrained;
  Json rows = Json::array();
  std::string csv = "name,config_fingerprint,data_seed,st_bleu,mt_bleu,asr_wer,disc_acc,centroid_distance,disc_gen_spearman\n";
  for (const auto& row : ablation_grid(o.full)) {
    const ExperimentConfig cfg = row_config(file, row, o.overrides);
    if (cfg.get<std::uint64_t>("data", "seed") != base.get<std::uint64_t>("data", "seed"))
      throw ConfigError("ablation rows must share the data seed");
    const fs::path dir = out / row.name;
    fs::create_directories(dir);
    write_self_description(dir, o, cfg);

    ModelParams init;
    if (!o.init.empty()) {
      init = load_for(cfg, o.init);
    } else {
      const auto key = pretrain_key(cfg);
      if (!pretrained.count(key)) {
        std::cerr << "ablate: MT pre-training\n";
        pretrained.emplace(key, run_pretrain(cfg, data).final_params);
      }
      init = pretrained.at(key);
    }
    std::cerr << "ablate: " << row.name << "\n";
    TrainResult r = run_finetune(cfg, data, std::move(init), saving_hook(dir / "checkpoints"));
    write_training(dir, r);
    const auto scores = evaluate_tasks(cfg, r.averaged, data.test);
    write_json(dir / "scores.json", scores_json(scores, (dir / "averaged.ckpt").string()));
    const ModalityReport rep = diagnose(cfg, r.averaged, data.test);
    write_json(dir / "report.json", to_json(rep));
    write_scatter_csv(rep, dir / "scatter.csv");
    const double rho = disc_gen_spearman(r.log);

    Json line{{"name", row.name},
              {"config_fingerprint", hex64(cfg.fingerprint())},
              {"data_seed", cfg.get<std::uint64_t>("data", "seed")},
              {"overrides", row.overrides},
              {"disc_acc", rep.discriminator_accuracy},
              {"centroid_distance", rep.centroid_distance},
              {"disc_gen_spearman", std::isfinite(rho) ? Json(rho) : Json(nullptr)}};
    for (const auto& s : scores) line[s.task] = s.value;
    rows.push_back(line);
    csv += row.name + "," + hex64(cfg.fingerprint()) + "," + std::to_string(cfg.get<std::uint64_t>("data", "seed"));
    for (const auto& s : scores) csv += "," + format_number(s.value);
    csv += "," + format_number(rep.discriminator_accuracy) + "," + format_number(rep.centroid_distance) + "," +
           (std::isfinite(rho) ? format_number(rho) : std::string()) + "\n";
  }
  write_json(out / "results.json", rows);
  write_text(out / "results.csv", csv);
}

int run(const Options& o) {
  Json file = Json::object();
  if (!o.config_path.empty()) {
    try {
      file = Json::parse(read_bytes(o.config_path));
    } catch (const Json::parse_error& e) {
      throw ConfigError("config " + o.config_path + ": " + e.what());
    } catch (const IngestionError& e) {
      throw ConfigError(e.what());
    }
  }
  const ExperimentConfig cfg = ExperimentConfig::resolve(file, o.overrides);
  if (!o.init.empty() && !fs::exists(o.init)) throw ConfigError("no such checkpoint: " + o.init);
  if (!o.checkpoint.empty() && !fs::exists(o.checkpoint)) throw ConfigError("no such checkpoint: " + o.checkpoint);
  if (!o.log.empty() && !fs::exists(o.log)) throw ConfigError("no such log: " + o.log);

  const fs::path out = fs::absolute(o.out).lexically_normal();
  fs::path staging = out;
  staging += ".partial-" + std::to_string(::getpid());
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    write_self_description(staging, o, cfg);
    if (o.command == "gen-data") cmd_gen_data(o, cfg, staging);
    else if (o.command == "pretrain-mt") cmd_pretrain(o, cfg, staging);
    else if (o.command == "train") cmd_train(o, cfg, staging);
    else if (o.command == "evaluate") cmd_evaluate(o, cfg, staging);
    else if (o.command == "diagnose") cmd_diagnose(o, cfg, staging);
    else if (o.command == "ablate") cmd_ablate(o, file, cfg, staging);
    fs::remove_all(out);
    fs::rename(staging, out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"salign: speech/text modality alignment experiments"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file (profile defaults when omitted)");
    sub->add_option("--override", o.overrides, "section.key=value, repeatable")->allow_extra_args(false);
    sub->add_option("--out", o.out, "output directory")->required();
  };
  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus and manifests");
  auto* pre = app.add_subcommand("pretrain-mt", "MT pre-training of textual encoder and decoder");
  auto* train = app.add_subcommand("train", "multi-task fine-tuning");
  auto* eval = app.add_subcommand("evaluate", "ST/MT BLEU and ASR WER on the test split");
  auto* diag = app.add_subcommand("diagnose", "modality report, PCA scatter, loss curves");
  auto* abl = app.add_subcommand("ablate", "run the ablation grid under shared seeds");
  for (auto* s : {gen, pre, train, eval, diag, abl}) common(s);
  train->add_option("--init", o.init, "checkpoint to start from (pre-trains first when omitted)");
  train->add_option("--start-step", o.start_step, "resume offset: first step run is start-step + 1");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate (untrained model when omitted)");
  diag->add_option("--checkpoint", o.checkpoint, "checkpoint to analyse (untrained model when omitted)");
  diag->add_option("--log", o.log, "train_log.jsonl for loss curves");
  abl->add_option("--init", o.init, "shared starting checkpoint (pre-trains once when omitted)");
  abl->add_flag("--full", o.full, "also run H-Align and the single-task models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  o.command = app.get_subcommands().front()->get_name();

  try {
    return run(o);
  } catch (const ConfigError& e) {
    std::cerr << "salign " << o.command << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "salign " << o.command << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}
