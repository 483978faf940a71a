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

// Experiment configuration: a nested JSON document with sections data,
// model, objectives, continuity, train, eval, and diagnostics. Resolution
// order: profile defaults, then the config file, then dotted --override
// flags, then SALIGN_SEED. Unknown keys are rejected at every stage.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salign/error.hpp"
#include "salign/network.hpp"
#include "salign/objectives.hpp"
#include "salign/rng.hpp"
#include "salign/synthdata.hpp"
#include "salign/trainer.hpp"

namespace salign {

using Json = nlohmann::json;

/// Defaults for a profile: "toy" (desk runs) or "paper_default".
inline Json profile_defaults(const std::string& profile) {
  Json j;
  j["profile"] = profile;
  j["data"] = {
      {"source", "synthetic"},
      {"seed", 1},
      {"vocab_size", 40},
      {"min_len", 3},
      {"max_len", 8},
      {"min_frames_per_token", 6},
      {"max_frames_per_token", 10},
      {"blank_insert_rate", 0.2},
      {"noise_std", 0.1},
      {"d_feat", 64},
      {"prototype_std", 1.0},
      {"translation", "permute"},
      {"shift", 1},
      {"n_train", 2000},
      {"n_mt_extra", 2000},
      {"n_valid", 100},
      {"n_test", 200},
  };
  j["model"] = {
      {"d_model", 64},  {"heads", 4},       {"ffn_dim", 256},         {"aenc_layers", 2},
      {"tenc_layers", 2}, {"dec_layers", 2}, {"subsample_layers", 2}, {"disc_hidden", 64},
      {"disc_layers", 3}, {"dropout", 0.1},  {"input_projection", false},
  };
  j["objectives"] = {
      {"contrastive_weight", 0.0},
      {"contrastive_level", "low"},
      {"temperature", 0.05},
  };
  j["continuity"] = {
      {"enabled", true},
      {"tau", 0.1},
      {"replacement_source", "ctc_argmax"},
      {"per", "batch"},
      {"mixed_generator_loss", false},
  };
  j["train"] = {
      {"seed", 1},
      {"pretrain_steps", 600},
      {"pretrain_learning_rate", 1e-3},
      {"max_steps", 1500},
      {"learning_rate", 1e-3},
      {"warmup_steps", 200},
      {"w_asr", 1.0},
      {"w_mt", 0.5},
      {"w_st", 1.0},
      {"lambda", 3.5},
      {"asr_step_cap", 450},
      {"checkpoint_every", 100},
      {"keep_best_k", 5},
      {"max_frames", 640},
      {"max_tokens", 96},
      {"alternating", false},
      {"disc_observer", true},
      {"audit_every", 0},
      {"clip_norm", 0.0},
  };
  j["eval"] = {{"beam", 8}, {"max_len", 24}, {"length_penalty", 1.0}};
  j["diagnostics"] = {{"n_sentences", 200}, {"plot", true}};
  if (profile == "paper_default") {
    j["model"]["d_model"] = 512;
    j["model"]["heads"] = 8;
    j["model"]["ffn_dim"] = 2048;
    j["model"]["aenc_layers"] = 6;
    j["model"]["tenc_layers"] = 6;
    j["model"]["dec_layers"] = 6;
    j["model"]["disc_hidden"] = 512;
    j["model"]["input_projection"] = true;
    j["train"]["max_steps"] = 50000;
    j["train"]["learning_rate"] = 2e-4;
    j["train"]["warmup_steps"] = 4000;
    j["train"]["asr_step_cap"] = 15000;
    j["train"]["checkpoint_every"] = 1000;
    j["train"]["pretrain_steps"] = 50000;
    j["train"]["pretrain_learning_rate"] = 2e-4;
  } else if (profile != "toy") {
    throw ConfigError("unknown profile '" + profile + "' (expected toy or paper_default)");
  }
  return j;
}

namespace detail {

inline bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

/// Merges `patch` into `base`, rejecting keys and types `base` lacks.
inline void merge_known(Json& base, const Json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_known(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
      slot = it.value().is_number_integer() && slot.is_number_float() ? Json(it.value().get<double>()) : it.value();
    }
  }
}

}  // namespace detail

/// Applies one `section.key=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
inline void apply_override(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) keys.push_back(k);
  Json patch = value;
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = Json{{*it, patch}};
  if (keys.size() == 1 && keys[0] == "profile") throw ConfigError("profile cannot be overridden; set it in the config file");
  detail::merge_known(cfg, patch, "");
}

/// Resolved configuration plus typed views of each section.
class ExperimentConfig {
 public:
  ExperimentConfig() : ExperimentConfig(profile_defaults("toy")) {}
  explicit ExperimentConfig(Json resolved) : json_(std::move(resolved)) { validate(); }

  /// Profile defaults <- file <- overrides <- SALIGN_SEED.
  static ExperimentConfig resolve(const Json& file, const std::vector<std::string>& overrides = {},
                                  bool use_env = true) {
    std::string profile = "toy";
    if (file.contains("profile")) {
      if (!file["profile"].is_string()) throw ConfigError("profile must be a string");
      profile = file["profile"].get<std::string>();
    }
    Json cfg = profile_defaults(profile);
    detail::merge_known(cfg, file, "");
    for (const auto& o : overrides) apply_override(cfg, o);
    if (use_env) {
      if (const char* env = std::getenv("SALIGN_SEED"); env != nullptr && *env != '\0') {
        try {
          std::size_t used = 0;
          const long long s = std::stoll(env, &used);
          if (used != std::string(env).size() || s < 0) throw std::invalid_argument("seed");
          cfg["data"]["seed"] = s;
          cfg["train"]["seed"] = s;
        } catch (const std::exception&) {
          throw ConfigError("SALIGN_SEED must be a nonnegative integer");
        }
      }
    }
    return ExperimentConfig(cfg);
  }

  static ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                               bool use_env = true) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    Json file;
    try {
      file = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return resolve(file, overrides, use_env);
  }

  const Json& json() const { return json_; }
  std::string dump() const { return json_.dump(2) + "\n"; }
  std::uint64_t fingerprint() const { return fnv1a64(json_.dump()); }

  template <typename T>
  T get(const std::string& section, const std::string& key) const {
    return json_.at(section).at(key).get<T>();
  }

  SynthSpec synth_spec() const {
    SynthSpec s;
    s.vocab_size = get<int>("data", "vocab_size");
    s.min_len = get<int>("data", "min_len");
    s.max_len = get<int>("data", "max_len");
    s.min_frames_per_token = get<int>("data", "min_frames_per_token");
    s.max_frames_per_token = get<int>("data", "max_frames_per_token");
    s.blank_insert_rate = get<double>("data", "blank_insert_rate");
    s.noise_std = get<double>("data", "noise_std");
    s.d_feat = get<int>("data", "d_feat");
    s.prototype_std = get<double>("data", "prototype_std");
    const auto tr = get<std::string>("data", "translation");
    s.translation.kind = tr == "identity" ? TranslationKind::kIdentity : TranslationKind::kPermute;
    s.translation.shift = get<int>("data", "shift");
    s.seed = get<std::uint64_t>("data", "seed");
    return s;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.vocab_size = get<int>("data", "vocab_size");
    m.d_feat = get<int>("data", "d_feat");
    m.d_model = get<int>("model", "d_model");
    m.heads = get<int>("model", "heads");
    m.ffn_dim = get<int>("model", "ffn_dim");
    m.aenc_layers = get<int>("model", "aenc_layers");
    m.tenc_layers = get<int>("model", "tenc_layers");
    m.dec_layers = get<int>("model", "dec_layers");
    m.subsample_layers = get<int>("model", "subsample_layers");
    m.disc_hidden = get<int>("model", "disc_hidden");
    m.disc_layers = get<int>("model", "disc_layers");
    m.dropout = get<double>("model", "dropout");
    m.input_projection = get<bool>("model", "input_projection");
    return m;
  }

  TrainConfig finetune_config() const {
    TrainConfig t;
    t.seed = get<std::uint64_t>("train", "seed");
    t.max_steps = get<int>("train", "max_steps");
    t.learning_rate = get<double>("train", "learning_rate");
    t.warmup_steps = get<int>("train", "warmup_steps");
    t.weights.asr = get<double>("train", "w_asr");
    t.weights.mt = get<double>("train", "w_mt");
    t.weights.st = get<double>("train", "w_st");
    t.weights.lambda = get<double>("train", "lambda");
    t.weights.contrastive = get<double>("objectives", "contrastive_weight");
    t.asr_step_cap = get<int>("train", "asr_step_cap");
    t.checkpoint_every = get<int>("train", "checkpoint_every");
    t.keep_best_k = get<int>("train", "keep_best_k");
    t.max_frames = get<std::size_t>("train", "max_frames");
    t.max_tokens = get<std::size_t>("train", "max_tokens");
    t.alternating = get<bool>("train", "alternating");
    t.disc_observer = get<bool>("train", "disc_observer");
    t.audit_every = get<int>("train", "audit_every");
    t.clip_norm = get<double>("train", "clip_norm");
    t.contrastive_level = get<std::string>("objectives", "contrastive_level") == "high" ? AlignLevel::kHigh : AlignLevel::kLow;
    t.contrastive_temperature = get<double>("objectives", "temperature");
    t.continuity.enabled = get<bool>("continuity", "enabled");
    t.continuity.tau = get<double>("continuity", "tau");
    t.continuity.source =
        get<std::string>("continuity", "replacement_source") == "gold" ? ReplacementSource::kGold : ReplacementSource::kCtcArgmax;
    t.continuity.per_example = get<std::string>("continuity", "per") == "example";
    t.continuity.mixed_generator_loss = get<bool>("continuity", "mixed_generator_loss");
    return t;
  }

  TrainConfig pretrain_config() const {
    TrainConfig t = finetune_config();
    t.max_steps = std::max(1, get<int>("train", "pretrain_steps"));
    t.learning_rate = get<double>("train", "pretrain_learning_rate");
    t.asr_step_cap = 0;
    t.start_step = 0;
    return t;
  }

  int pretrain_steps() const { return get<int>("train", "pretrain_steps"); }

 private:
  void validate() const {
    auto one_of = [&](const std::string& sec, const std::string& key, std::initializer_list<const char*> ok) {
      const auto v = get<std::string>(sec, key);
      for (const char* o : ok)
        if (v == o) return;
      throw ConfigError(sec + "." + key + ": unsupported value '" + v + "'");
    };
    one_of("data", "translation", {"permute", "identity"});
    one_of("objectives", "contrastive_level", {"low", "high"});
    one_of("continuity", "replacement_source", {"ctc_argmax", "gold"});
    one_of("continuity", "per", {"batch", "example"});
    for (const char* k : {"n_train", "n_mt_extra", "n_valid", "n_test"})
      if (get<long long>("data", k) < 0) throw ConfigError(std::string("data.") + k + " must be nonnegative");
    if (get<int>("data", "n_train") < 1) throw ConfigError("data.n_train must be positive");
    if (get<int>("train", "pretrain_steps") < 0) throw ConfigError("train.pretrain_steps must be nonnegative");
    if (get<int>("eval", "beam") < 1) throw ConfigError("eval.beam must be at least 1");
    if (get<int>("eval", "max_len") < 1) throw ConfigError("eval.max_len must be at least 1");
    if (get<int>("diagnostics", "n_sentences") < 2) throw ConfigError("diagnostics.n_sentences must be at least 2");
    synth_spec().validate();
    model_config().validate();
    finetune_config().validate();
  }

  Json json_;
};

}  // namespace salign
