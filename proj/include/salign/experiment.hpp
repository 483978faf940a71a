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

// Experiment building blocks shared by the command-line tool and the
// acceptance suite: data splits, training stages, evaluation, diagnostics,
// and the ablation grid.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "salign/checkpoint.hpp"
#include "salign/config.hpp"
#include "salign/diagnostics.hpp"
#include "salign/evalkit.hpp"
#include "salign/synthdata.hpp"
#include "salign/trainer.hpp"

namespace salign {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

struct DataSplits {
  Vocabulary vocab;
  std::vector<Triple> train;  // speech triples
  std::vector<Triple> mt;     // text pairs: transcripts of `train` plus extra text
  std::vector<Triple> valid;
  std::vector<Triple> test;
};

inline Triple text_only(const Triple& t) {
  Triple out = t;
  out.frames = Matrix(0, t.frames.cols());
  return out;
}

/// Disjoint index ranges of one synthetic stream: train, extra text, valid, test.
inline DataSplits synthetic_splits(const ExperimentConfig& cfg) {
  const SynthSpec spec = cfg.synth_spec();
  const auto n_train = cfg.get<std::size_t>("data", "n_train");
  const auto n_extra = cfg.get<std::size_t>("data", "n_mt_extra");
  const auto n_valid = cfg.get<std::size_t>("data", "n_valid");
  const auto n_test = cfg.get<std::size_t>("data", "n_test");
  DataSplits d;
  d.vocab = Vocabulary::synthetic(spec.vocab_size);
  d.train = generate_corpus(spec, n_train, 0);
  for (const auto& t : d.train) d.mt.push_back(text_only(t));
  if (n_extra > 0)
    for (auto& t : generate_corpus(spec, n_extra, n_train, false)) d.mt.push_back(std::move(t));
  if (n_valid > 0) d.valid = generate_corpus(spec, n_valid, n_train + n_extra);
  if (n_test > 0) d.test = generate_corpus(spec, n_test, n_train + n_extra + n_valid);
  return d;
}

/// Layout written by gen-data: vocab.txt plus one manifest directory per split.
inline void write_splits(const std::filesystem::path& dir, const DataSplits& d) {
  std::filesystem::create_directories(dir);
  d.vocab.save(dir / "vocab.txt");
  write_manifest(dir / "train", d.train, d.vocab);
  write_manifest(dir / "mt", d.mt, d.vocab);
  write_manifest(dir / "valid", d.valid, d.vocab);
  write_manifest(dir / "test", d.test, d.vocab);
}

inline DataSplits read_splits(const std::filesystem::path& dir) {
  DataSplits d;
  d.vocab = Vocabulary::load(dir / "vocab.txt");
  d.train = load_manifest(dir / "train" / "manifest.tsv", d.vocab);
  d.mt = load_manifest(dir / "mt" / "manifest.tsv", d.vocab);
  d.valid = load_manifest(dir / "valid" / "manifest.tsv", d.vocab);
  d.test = load_manifest(dir / "test" / "manifest.tsv", d.vocab);
  return d;
}

/// data.source is "synthetic" or a directory written by gen-data.
inline DataSplits load_data(const ExperimentConfig& cfg) {
  const auto source = cfg.get<std::string>("data", "source");
  if (source == "synthetic") return synthetic_splits(cfg);
  DataSplits d = read_splits(source);
  if (d.vocab.size() != cfg.get<int>("data", "vocab_size"))
    throw ConfigError("data.vocab_size differs from the vocabulary in " + source);
  return d;
}

inline ModelParams initial_params(const ExperimentConfig& cfg) {
  return ModelParams(cfg.model_config(), cfg.get<std::uint64_t>("train", "seed"));
}

/// Initial parameters after the MT pre-training stage (if any).
inline TrainResult run_pretrain(const ExperimentConfig& cfg, const DataSplits& data, const CheckpointHook& hook = {}) {
  TrainConfig t = cfg.pretrain_config();
  t.keep_best_k = 0;
  if (cfg.pretrain_steps() == 0) {
    TrainResult r;
    r.final_params = initial_params(cfg);
    r.averaged = r.final_params;
    return r;
  }
  return pretrain_mt(t, initial_params(cfg), data.mt, {}, hook);
}

inline TrainResult run_finetune(const ExperimentConfig& cfg, const DataSplits& data, ModelParams init,
                                const CheckpointHook& hook = {}) {
  return finetune_multitask(cfg.finetune_config(), std::move(init), data.train, data.mt, data.valid, hook);
}

inline DecodeOptions decode_options(const ExperimentConfig& cfg) {
  return {cfg.get<int>("eval", "beam"), cfg.get<int>("eval", "max_len"), cfg.get<double>("eval", "length_penalty")};
}

/// ST and MT by beam search, ASR by CTC greedy decoding.
inline std::vector<TaskScore> evaluate_tasks(const ExperimentConfig& cfg, ModelParams& params,
                                             const std::vector<Triple>& test) {
  if (test.empty()) throw EmptyInputError("evaluate: empty test set");
  const DecodeOptions o = decode_options(cfg);
  return {evaluate_st(params, test, o), evaluate_mt(params, test, o), evaluate_asr(params, test)};
}

inline Json to_json(const TaskScore& s, const std::string& checkpoint) {
  return Json{{"task", s.task},   {"metric", s.metric},         {"value", s.value},
              {"n_sentences", s.n_sentences}, {"beam", s.beam}, {"checkpoint", checkpoint}};
}

/// Modality report over the first `diagnostics.n_sentences` test triples.
inline ModalityReport diagnose(const ExperimentConfig& cfg, ModelParams& params, const std::vector<Triple>& data) {
  const auto n = std::min<std::size_t>(data.size(), cfg.get<std::size_t>("diagnostics", "n_sentences"));
  if (n == 0) throw EmptyInputError("diagnose: no data");
  std::vector<Triple> subset(data.begin(), data.begin() + static_cast<long>(n));
  const PooledSet pooled = pooled_representations(params, subset);
  return modality_report(pooled.speech, pooled.text, discriminator_classifier(params), pooled.ids, pooled.ids);
}

inline Json to_json(const ModalityReport& r) {
  return Json{{"centroid_distance", r.centroid_distance},
              {"discriminator_accuracy", r.discriminator_accuracy},
              {"variance_explained", r.variance_explained},
              {"degenerate", r.degenerate},
              {"n_points", r.ids.size()}};
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationRow {
  std::string name;
  std::vector<std::string> overrides;
};

/// Contrastive weight used when hard alignment is switched on.
inline constexpr double kHardAlignWeight = 1.0;

/// S-Align, minus enhanced AT, minus AT, plus low/high-level H-Align. The
/// full grid adds the single-task models and plain H-Align.
inline std::vector<AblationRow> ablation_grid(bool full) {
  const std::string hw = "objectives.contrastive_weight=" + std::to_string(kHardAlignWeight);
  std::vector<AblationRow> rows = {
      {"s_align", {}},
      {"no_enhanced", {"continuity.enabled=false"}},
      {"no_at", {"train.lambda=0"}},
      {"s_align_low_h", {hw, "objectives.contrastive_level=low"}},
      {"s_align_high_h", {hw, "objectives.contrastive_level=high"}},
  };
  if (full) {
    rows.push_back({"h_align", {"train.lambda=0", hw, "objectives.contrastive_level=low"}});
    rows.push_back({"mt_single", {"train.lambda=0", "train.w_asr=0", "train.w_st=0", "train.disc_observer=false"}});
    rows.push_back({"asr_single", {"train.lambda=0", "train.w_mt=0", "train.w_st=0", "train.disc_observer=false"}});
  }
  return rows;
}

/// Row config: the base file plus the row's overrides plus the caller's.
inline ExperimentConfig row_config(const Json& base_file, const AblationRow& row, const std::vector<std::string>& extra,
                                   bool use_env = true) {
  std::vector<std::string> o = extra;
  o.insert(o.end(), row.overrides.begin(), row.overrides.end());
  ExperimentConfig cfg = ExperimentConfig::resolve(base_file, o, use_env);
  // Single ASR models train ASR for the whole run.
  if (row.name == "asr_single") {
    Json j = cfg.json();
    j["train"]["asr_step_cap"] = j["train"]["max_steps"];
    cfg = ExperimentConfig(j);
  }
  return cfg;
}

/// Fingerprint of everything the pre-training stage depends on, so rows that
/// differ only in fine-tuning settings can share one pre-trained model.
inline std::uint64_t pretrain_key(const ExperimentConfig& cfg) {
  const Json& j = cfg.json();
  Json key{{"data", j["data"]}, {"model", j["model"]}};
  for (const char* k : {"seed", "pretrain_steps", "pretrain_learning_rate", "warmup_steps", "max_tokens", "clip_norm"})
    key["train"][k] = j["train"][k];
  return fnv1a64(key.dump());
}

struct RowOutcome {
  std::string name;
  std::uint64_t fingerprint = 0;
  std::vector<TaskScore> scores;
  TrainResult train;
  ModalityReport report;
};

}  // namespace salign
