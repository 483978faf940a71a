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

// Progressive training: MT pre-training of the embedding, textual encoder,
// and decoder, then multi-task fine-tuning on ASR, MT, ST, and the
// adversarial game.
//
// Gradient partition. The discriminator loss is computed on detached pooled
// representations with live discriminator weights; the generator losses use
// live representations with a frozen copy of the discriminator. Summing
// everything into one objective therefore updates each side only through its
// own terms.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salign/checkpoint.hpp"
#include "salign/continuity.hpp"
#include "salign/network.hpp"
#include "salign/objectives.hpp"
#include "salign/optim.hpp"
#include "salign/synthdata.hpp"

namespace salign {

struct ContinuityConfig {
  bool enabled = true;
  double tau = 0.1;
  ReplacementSource source = ReplacementSource::kCtcArgmax;
  bool per_example = false;           // one p per sequence instead of per batch
  bool mixed_generator_loss = false;  // also pull mixed sequences toward c_u

  void validate() const {
    if (tau < 0.0 || tau > 1.0) throw ConfigError("continuity.tau must be in [0,1]");
  }
};

struct TrainConfig {
  int max_steps = 800;
  double learning_rate = 1e-3;
  int warmup_steps = 200;
  LossWeights weights;
  int asr_step_cap = 240;
  int checkpoint_every = 100;
  int keep_best_k = 5;
  std::uint64_t seed = 1;
  std::size_t max_frames = 640;  // padded speech frames per ST batch
  std::size_t max_tokens = 96;   // padded tokens per MT batch
  bool alternating = false;      // separate D and G updates per step
  bool disc_observer = true;     // with lambda = 0, still fit D on L_D alone
  int audit_every = 0;           // gradient-partition audit period, 0 = off
  double clip_norm = 0.0;
  AlignLevel contrastive_level = AlignLevel::kLow;
  double contrastive_temperature = 0.05;
  ContinuityConfig continuity;
  int start_step = 0;  // resume offset: the first step run is start_step + 1

  void validate() const {
    if (max_steps < 1) throw ConfigError("train.max_steps must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be nonnegative");
    weights.validate();
    if (asr_step_cap < 0 || asr_step_cap > max_steps) throw ConfigError("train.asr_step_cap must be in [0, max_steps]");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be positive");
    if (keep_best_k < 0) throw ConfigError("train.keep_best_k must be nonnegative");
    if (audit_every < 0) throw ConfigError("train.audit_every must be nonnegative");
    if (!(contrastive_temperature > 0.0)) throw ConfigError("objectives.temperature must be positive");
    if (start_step < 0 || start_step >= max_steps) throw ConfigError("train.start_step must be in [0, max_steps)");
    continuity.validate();
  }
};

// ---------------------------------------------------------------------------
// Training log

struct TrainRecord {
  int step = 0;
  std::string stage;
  LossBreakdown parts;
  double asr_weight = 0.0;  // effective ASR weight at this step (0 past the cap)
  double disc_acc = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  std::optional<double> mix_p;
};

inline nlohmann::json to_json(const TrainRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["asr"] = r.parts.asr;
  j["mt"] = r.parts.mt;
  j["st"] = r.parts.st;
  j["disc"] = r.parts.disc;
  j["gen_st"] = r.parts.gen_st;
  j["gen_mt"] = r.parts.gen_mt;
  j["contrastive"] = r.parts.contrastive;
  j["total"] = r.parts.total;
  j["asr_weight"] = r.asr_weight;
  j["disc_acc"] = std::isfinite(r.disc_acc) ? nlohmann::json(r.disc_acc) : nlohmann::json(nullptr);
  j["lr"] = r.lr;
  j["mix_p"] = r.mix_p ? nlohmann::json(*r.mix_p) : nlohmann::json(nullptr);
  return j;
}

inline TrainRecord record_from_json(const nlohmann::json& j) {
  TrainRecord r;
  r.step = j.at("step").get<int>();
  r.stage = j.at("stage").get<std::string>();
  r.parts.asr = j.at("asr").get<double>();
  r.parts.mt = j.at("mt").get<double>();
  r.parts.st = j.at("st").get<double>();
  r.parts.disc = j.at("disc").get<double>();
  r.parts.gen_st = j.at("gen_st").get<double>();
  r.parts.gen_mt = j.at("gen_mt").get<double>();
  r.parts.contrastive = j.at("contrastive").get<double>();
  r.parts.total = j.at("total").get<double>();
  r.asr_weight = j.at("asr_weight").get<double>();
  r.disc_acc = j.at("disc_acc").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("disc_acc").get<double>();
  r.lr = j.at("lr").get<double>();
  if (!j.at("mix_p").is_null()) r.mix_p = j.at("mix_p").get<double>();
  return r;
}

/// Append-only per-step records with strictly increasing steps.
class TrainLog {
 public:
  void append(TrainRecord r) {
    if (!records_.empty() && r.step <= records_.back().step)
      throw ConfigError("TrainLog: step " + std::to_string(r.step) + " does not follow " +
                        std::to_string(records_.back().step));
    records_.push_back(std::move(r));
  }
  const std::vector<TrainRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) out += to_json(r).dump() + "\n";
    return out;
  }
  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot write log " + path.string());
    out << to_jsonl();
  }
  static TrainLog read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open log " + path.string());
    TrainLog log;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        log.append(record_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw IngestionError(path.string() + " line " + std::to_string(n) + ": " + e.what());
      }
    }
    return log;
  }

 private:
  std::vector<TrainRecord> records_;
};

// ---------------------------------------------------------------------------
// Batch streams

/// Batches for step s (1-based) come from epoch (s-1)/n_batches, each epoch
/// reshuffled from (seed, epoch). Any step's batch is a pure function of the
/// step, which makes resumed runs see the same data as uninterrupted ones.
class BatchStream {
 public:
  BatchStream(const std::vector<Triple>* data, std::size_t budget, std::uint64_t seed, bool text)
      : data_(data), budget_(budget), seed_(seed), text_(text) {
    if (data_->empty()) throw EmptyInputError("BatchStream: empty dataset");
    load(0);
  }

  const Batch& at_step(int step) {
    const auto idx = static_cast<std::size_t>(step - 1);
    const std::size_t epoch = idx / batches_.size();
    if (epoch != epoch_) load(epoch);
    return batches_[idx % batches_.size()];
  }
  std::size_t batches_per_epoch() const { return batches_.size(); }

 private:
  void load(std::size_t epoch) {
    const std::uint64_t s = splitmix64(seed_ ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)) ^ (text_ ? 0x7465787400ULL : 0));
    batches_ = text_ ? make_text_batches(*data_, budget_, s) : make_batches(*data_, budget_, s);
    epoch_ = epoch;
  }

  const std::vector<Triple>* data_;
  std::size_t budget_;
  std::uint64_t seed_;
  bool text_;
  std::size_t epoch_ = 0;
  std::vector<Batch> batches_;
};

inline Tokens with_bos(const Tokens& t) {
  Tokens out{kBosId};
  out.insert(out.end(), t.begin(), t.end());
  return out;
}
inline Tokens with_eos(const Tokens& t) {
  Tokens out(t);
  out.push_back(kEosId);
  return out;
}

inline Tokens unpadded(const Tokens& t, const Mask& m) { return Tokens(t.begin(), t.begin() + static_cast<long>(count_valid(m))); }

/// Teacher-forced CE of `tgt` given an encoder output.
inline Var translation_ce(const EncoderOutput& enc, const Tokens& tgt, Binding& w, const RunMode& mode) {
  const Tokens in = with_bos(tgt);
  const Tokens out = with_eos(tgt);
  return ce_loss(decoder_forward(enc, in, w, mode), out, Mask(out.size(), true)).loss;
}

// ---------------------------------------------------------------------------
// Validation

/// Mean per-sentence ST cross entropy in evaluation mode.
inline double validation_st_loss(ModelParams& params, const std::vector<Triple>& data) {
  if (data.empty()) throw EmptyInputError("validation_st_loss: empty set");
  ag::NoGradGuard ng;
  Binding w(params);
  double total = 0.0;
  for (const auto& ex : data) {
    auto a = acoustic_encode(ex.frames, Mask(static_cast<std::size_t>(ex.frames.rows()), true), w);
    total += translation_ce(textual_encode(a, w), ex.tgt_tokens, w, {}).item();
  }
  return total / static_cast<double>(data.size());
}

/// Mean per-sentence MT cross entropy in evaluation mode.
inline double validation_mt_loss(ModelParams& params, const std::vector<Triple>& data) {
  if (data.empty()) throw EmptyInputError("validation_mt_loss: empty set");
  ag::NoGradGuard ng;
  Binding w(params);
  double total = 0.0;
  for (const auto& ex : data) {
    auto e = embed_text(ex.src_tokens, Mask(ex.src_tokens.size(), true), w);
    total += translation_ce(textual_encode(e, w), ex.tgt_tokens, w, {}).item();
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Keeping the best checkpoints

class BestK {
 public:
  explicit BestK(std::size_t k) : k_(k) {}
  void offer(int step, double metric, const ModelParams& params) {
    if (k_ == 0) return;
    snaps_.push_back({step, metric, params});
    std::stable_sort(snaps_.begin(), snaps_.end(), [](const Snapshot& a, const Snapshot& b) {
      if (a.metric != b.metric) return a.metric < b.metric;
      return a.step < b.step;
    });
    if (snaps_.size() > k_) snaps_.pop_back();
  }
  const std::vector<Snapshot>& snapshots() const { return snaps_; }

 private:
  std::size_t k_;
  std::vector<Snapshot> snaps_;
};

/// Called at every checkpoint with (step, validation metric, parameters).
using CheckpointHook = std::function<void(int, double, const ModelParams&)>;

struct PartitionAudit {
  int step = 0;
  double disc_loss_into_encoders = 0.0;  // max |dL_D / d theta_enc|
  double gen_loss_into_disc = 0.0;       // max |d(L_Gst + L_Gmt) / d theta_D|
};

struct TrainResult {
  ModelParams final_params;
  ModelParams averaged;  // best-k average, or the final parameters when k = 0
  TrainLog log;
  std::vector<PartitionAudit> audits;
  std::vector<std::pair<int, double>> validation;  // (step, metric)
  std::vector<int> averaged_steps;
};

namespace detail {

inline double max_abs_grad(const ModelParams& params, bool discriminator) {
  double m = 0.0;
  for (const auto& p : params.list())
    if (is_discriminator(p.name) == discriminator && p.grad.size() > 0) m = std::max(m, p.grad.cwiseAbs().maxCoeff());
  return m;
}

inline void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v))
    throw DivergenceError("step " + std::to_string(step) + ": non-finite " + std::string(what) + " loss");
}

inline void finish(TrainResult& r, const BestK& best) {
  if (best.snapshots().empty()) {
    r.averaged = r.final_params;
    return;
  }
  r.averaged = average_checkpoints(best.snapshots(), best.snapshots().size());
  for (const auto& s : best.snapshots()) r.averaged_steps.push_back(s.step);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MT pre-training

/// Trains embedding, textual encoder, and decoder on text pairs with CE.
/// Acoustic encoder, CTC head, and discriminator are left untouched.
inline TrainResult pretrain_mt(const TrainConfig& cfg, ModelParams params, const std::vector<Triple>& mt_data,
                               const std::vector<Triple>& valid = {}, const CheckpointHook& hook = {}) {
  cfg.validate();
  BatchStream stream(&mt_data, cfg.max_tokens, cfg.seed, true);
  Adam opt({0.9, 0.98, 1e-9, cfg.clip_norm});
  const auto trainable = [](const Parameter& p) {
    const auto g = group_of(p.name);
    return g == ParamGroup::kEmbedding || g == ParamGroup::kTextualEncoder || g == ParamGroup::kDecoder;
  };
  TrainResult result;
  BestK best(static_cast<std::size_t>(cfg.keep_best_k));
  for (int step = cfg.start_step + 1; step <= cfg.max_steps; ++step) {
    const Batch& b = stream.at_step(step);
    Rng drop_rng = Rng::derive(cfg.seed, Stream::kDropout, static_cast<std::uint64_t>(step));
    RunMode mode{true, &drop_rng};
    params.zero_grad();
    Binding w(params);
    std::vector<std::pair<Var, double>> terms;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Tokens src = unpadded(b.src[i], b.src_masks[i]);
      const Tokens tgt = unpadded(b.tgt[i], b.tgt_masks[i]);
      auto e = embed_text(src, Mask(src.size(), true), w, mode);
      terms.emplace_back(translation_ce(textual_encode(e, w, mode), tgt, w, mode), 1.0 / static_cast<double>(b.size()));
    }
    Var loss = ag::weighted_sum(terms);
    detail::check_finite(loss.item(), "mt", step);
    ag::backward(loss);
    const double lr = inverse_sqrt_lr(step, cfg.learning_rate, cfg.warmup_steps);
    opt.step(params.list(), lr, trainable);
    TrainRecord rec;
    rec.step = step;
    rec.stage = "pretrain";
    rec.parts.mt = loss.item();
    rec.parts.total = loss.item();
    rec.lr = lr;
    result.log.append(rec);
    if (!valid.empty() && (step % cfg.checkpoint_every == 0 || step == cfg.max_steps)) {
      const double m = validation_mt_loss(params, valid);
      result.validation.emplace_back(step, m);
      best.offer(step, m, params);
      if (hook) hook(step, m, params);
    }
  }
  params.zero_grad();
  result.final_params = std::move(params);
  detail::finish(result, best);
  return result;
}

// ---------------------------------------------------------------------------
// Multi-task fine-tuning

namespace detail {

struct StepGraph {
  std::vector<std::pair<Var, double>> task_terms;  // already weighted
  Var disc_loss;                                   // L_D (pure + mixed), live D on constants
  Var gen_loss;                                    // L_Gst + L_Gmt with frozen D
  bool adversarial = false;
  LossBreakdown parts;
  double disc_acc = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> mix_p;
};

inline Var mean_of(const std::vector<Var>& xs) {
  std::vector<std::pair<Var, double>> t;
  for (const auto& x : xs) t.emplace_back(x, 1.0 / static_cast<double>(xs.size()));
  return ag::weighted_sum(t);
}

/// Pooled T-enc representation of a mixed or noised sequence, evaluated
/// without dropout. With `grad` false the pass is recorded nowhere.
inline Var mixed_pool(const MixOutcome& mix, Binding& w, bool grad) {
  std::optional<ag::NoGradGuard> guard;
  if (!grad) guard.emplace();
  Var x = ag::constant(mix.sequence);
  if (mix.branch == MixBranch::kMtNoise) x = add_positions(x);
  auto t = textual_encode({x, mix.mask}, w, {});
  return pool(t);
}

}  // namespace detail

/// Multi-task fine-tuning from `params`. `st_data` holds speech triples,
/// `mt_data` text pairs; `valid` (speech triples) selects the best-k
/// checkpoints by ST cross entropy.
inline TrainResult finetune_multitask(const TrainConfig& cfg, ModelParams params, const std::vector<Triple>& st_data,
                                      const std::vector<Triple>& mt_data, const std::vector<Triple>& valid = {},
                                      const CheckpointHook& hook = {}) {
  cfg.validate();
  const LossWeights& lw = cfg.weights;
  const bool observer = cfg.disc_observer && lw.lambda == 0.0;
  const bool adversarial = lw.lambda > 0.0 || observer;
  const bool contrastive = lw.contrastive > 0.0;
  const bool st_side = lw.asr > 0.0 || lw.st > 0.0 || adversarial || contrastive;
  const bool mt_side = lw.mt > 0.0 || adversarial;
  if (st_side && st_data.empty()) throw EmptyInputError("finetune: speech data required");
  if (mt_side && mt_data.empty()) throw EmptyInputError("finetune: text data required");
  const bool need_tenc_st = lw.st > 0.0 || adversarial || (contrastive && cfg.contrastive_level == AlignLevel::kHigh);

  std::optional<BatchStream> st_stream, mt_stream;
  if (st_side) st_stream.emplace(&st_data, cfg.max_frames, cfg.seed, false);
  if (mt_side) mt_stream.emplace(&mt_data, cfg.max_tokens, cfg.seed, true);
  Adam opt({0.9, 0.98, 1e-9, cfg.clip_norm});
  TrainResult result;
  BestK best(static_cast<std::size_t>(cfg.keep_best_k));
  const auto encoders = [](const Parameter& p) { return !is_discriminator(p.name); };
  const auto discriminator = [](const Parameter& p) { return is_discriminator(p.name); };

  for (int step = cfg.start_step + 1; step <= cfg.max_steps; ++step) {
    Rng drop_rng = Rng::derive(cfg.seed, Stream::kDropout, static_cast<std::uint64_t>(step));
    Rng mix_rng = Rng::derive(cfg.seed, Stream::kMix, static_cast<std::uint64_t>(step));
    RunMode mode{true, &drop_rng};
    const double w_asr = step <= cfg.asr_step_cap ? lw.asr : 0.0;
    params.zero_grad();
    Binding w(params);
    detail::StepGraph g;

    // Speech side: ASR, ST, pooled h_st, contrastive pairs.
    std::vector<Var> asr_losses, st_losses, st_pools, low_st, low_mt, high_mt;
    std::vector<EncoderOutput> aencs;
    std::vector<Matrix> ctc_values;
    std::vector<Tokens> st_src;
    if (st_side) {
      const Batch& b = st_stream->at_step(step);
      for (std::size_t i = 0; i < b.size(); ++i) {
        const Index n_frames = static_cast<Index>(count_valid(b.frame_masks[i]));
        const Matrix frames = b.frames[i].topRows(n_frames);
        const Tokens src = unpadded(b.src[i], b.src_masks[i]);
        const Tokens tgt = unpadded(b.tgt[i], b.tgt_masks[i]);
        auto a = acoustic_encode(frames, Mask(static_cast<std::size_t>(n_frames), true), w, mode);
        Var lp = ctc_log_probs(a, w);
        asr_losses.push_back(ctc_loss(lp, src, static_cast<int>(lp.rows())));
        if (need_tenc_st) {
          auto t = textual_encode(a, w, mode);
          if (lw.st > 0.0) st_losses.push_back(translation_ce(t, tgt, w, mode));
          st_pools.push_back(pool(t));
        }
        if (contrastive) {
          if (cfg.contrastive_level == AlignLevel::kLow) {
            low_st.push_back(pool(a));
            low_mt.push_back(ag::masked_mean_rows(token_embeddings(src, w), Mask(src.size(), true)));
          } else {
            auto e = embed_text(src, Mask(src.size(), true), w, mode);
            high_mt.push_back(pool(textual_encode(e, w, mode)));
          }
        }
        aencs.push_back(a);
        ctc_values.push_back(lp.value());
        st_src.push_back(src);
      }
      Var asr = detail::mean_of(asr_losses);
      g.parts.asr = asr.item();
      if (w_asr > 0.0) g.task_terms.emplace_back(asr, w_asr);
      if (!st_losses.empty()) {
        Var st = detail::mean_of(st_losses);
        g.parts.st = st.item();
        g.task_terms.emplace_back(st, lw.st);
      }
      if (contrastive && b.size() >= 2) {
        Var c = cfg.contrastive_level == AlignLevel::kLow
                    ? contrastive_loss(ag::concat_rows(low_st), ag::concat_rows(low_mt), cfg.contrastive_temperature)
                    : contrastive_loss(ag::concat_rows(st_pools), ag::concat_rows(high_mt), cfg.contrastive_temperature);
        g.parts.contrastive = c.item();
        g.task_terms.emplace_back(c, lw.contrastive);
      }
    }

    // Text side: MT and pooled h_mt.
    std::vector<Var> mt_losses, mt_pools;
    std::vector<Tokens> mt_src;
    if (mt_side) {
      const Batch& b = mt_stream->at_step(step);
      for (std::size_t i = 0; i < b.size(); ++i) {
        const Tokens src = unpadded(b.src[i], b.src_masks[i]);
        const Tokens tgt = unpadded(b.tgt[i], b.tgt_masks[i]);
        auto e = embed_text(src, Mask(src.size(), true), w, mode);
        auto t = textual_encode(e, w, mode);
        if (lw.mt > 0.0) mt_losses.push_back(translation_ce(t, tgt, w, mode));
        mt_pools.push_back(pool(t));
        mt_src.push_back(src);
      }
      if (!mt_losses.empty()) {
        Var mt = detail::mean_of(mt_losses);
        g.parts.mt = mt.item();
        g.task_terms.emplace_back(mt, lw.mt);
      }
    }

    // Adversarial game.
    if (adversarial) {
      g.adversarial = true;
      Var p_st = ag::concat_rows(st_pools);
      Var p_mt = ag::concat_rows(mt_pools);
      Var d_st = discriminate_pooled(ag::detach(p_st), w);
      Var d_mt = discriminate_pooled(ag::detach(p_mt), w);
      std::vector<std::pair<Var, double>> d_terms{{discriminator_loss(d_st, d_mt), 1.0}};
      std::vector<std::pair<Var, double>> g_extra_st, g_extra_mt;
      int correct = 0;
      for (Index r = 0; r < d_st.rows(); ++r) correct += d_st.value()(r, 0) < 0.5 ? 1 : 0;
      for (Index r = 0; r < d_mt.rows(); ++r) correct += d_mt.value()(r, 0) >= 0.5 ? 1 : 0;
      g.disc_acc = static_cast<double>(correct) / static_cast<double>(d_st.rows() + d_mt.rows());

      if (cfg.continuity.enabled) {
        const Matrix emb_rows = embedding_rows(params);
        const Eigen::RowVectorXd blank = emb_rows.row(kBlankId);
        std::vector<std::pair<Var, double>> mix_terms;
        const std::size_t n_mix = cfg.continuity.per_example ? std::max(st_src.size(), mt_src.size()) : 1;
        std::vector<MixOutcome> mixes;
        double first_p = 0.0;
        for (std::size_t k = 0; k < n_mix; ++k) {
          const double p = sample_mix_rate(mix_rng);
          if (k == 0) first_p = p;
          const MixBranch br = branch_for(p, cfg.continuity.tau);
          // Per batch: one sequence drawn from the chosen side; per example:
          // the k-th sequence of that side.
          const std::size_t side = br == MixBranch::kStMix ? st_src.size() : mt_src.size();
          const std::size_t i = cfg.continuity.per_example
                                    ? k % side
                                    : static_cast<std::size_t>(mix_rng.uniform_int(0, static_cast<int>(side) - 1));
          if (br == MixBranch::kStMix) {
            mixes.push_back(mix_st_sequence(aencs[i].reps.value(), aencs[i].mask, ctc_values[i], emb_rows, p, mix_rng,
                                            cfg.continuity.source, &st_src[i]));
          } else {
            Matrix emb(static_cast<Index>(mt_src[i].size()), emb_rows.cols());
            for (std::size_t j = 0; j < mt_src[i].size(); ++j) emb.row(static_cast<Index>(j)) = emb_rows.row(mt_src[i][j]);
            mixes.push_back(noise_mt_sequence(emb, p, blank, mix_rng));
          }
        }
        g.mix_p = first_p;
        const double inv = 1.0 / static_cast<double>(mixes.size());
        for (const auto& m : mixes) {
          Var pooled = detail::mixed_pool(m, w, cfg.continuity.mixed_generator_loss);
          mix_terms.emplace_back(bce_loss(discriminate_pooled(ag::detach(pooled), w), m.label), inv);
          if (cfg.continuity.mixed_generator_loss)
            (m.branch == MixBranch::kStMix ? g_extra_st : g_extra_mt).emplace_back(pooled, inv);
        }
        d_terms.emplace_back(ag::weighted_sum(mix_terms), 1.0);
      }
      g.disc_loss = ag::weighted_sum(d_terms);
      g.parts.disc = g.disc_loss.item();

      Binding frozen(params, true);
      auto side_loss = [&](const Var& pooled, const std::vector<std::pair<Var, double>>& extra) {
        std::vector<std::pair<Var, double>> t{{generator_loss(discriminate_pooled(pooled, frozen)), 1.0}};
        for (const auto& [x, wt] : extra) t.emplace_back(generator_loss(discriminate_pooled(x, frozen)), wt);
        return ag::weighted_sum(t);
      };
      Var gst = side_loss(p_st, g_extra_st);
      Var gmt = side_loss(p_mt, g_extra_mt);
      g.gen_loss = ag::add(gst, gmt);
      g.parts.gen_st = gst.item();
      g.parts.gen_mt = gmt.item();
    }

    LossWeights eff = lw;
    eff.asr = w_asr;
    g.parts.total = total_loss(g.parts, eff);
    detail::check_finite(g.parts.asr, "asr", step);
    detail::check_finite(g.parts.mt, "mt", step);
    detail::check_finite(g.parts.st, "st", step);
    detail::check_finite(g.parts.disc, "discriminator", step);
    detail::check_finite(g.parts.gen_st + g.parts.gen_mt, "generator", step);
    detail::check_finite(g.parts.contrastive, "contrastive", step);

    // Partition audit: each adversarial term on its own.
    if (g.adversarial && cfg.audit_every > 0 && (step - cfg.start_step - 1) % cfg.audit_every == 0) {
      PartitionAudit audit;
      audit.step = step;
      params.zero_grad();
      ag::backward(g.disc_loss);
      audit.disc_loss_into_encoders = detail::max_abs_grad(params, false);
      params.zero_grad();
      ag::backward(g.gen_loss);
      audit.gen_loss_into_disc = detail::max_abs_grad(params, true);
      params.zero_grad();
      result.audits.push_back(audit);
    }

    const double lr = inverse_sqrt_lr(step, cfg.learning_rate, cfg.warmup_steps);
    const double d_weight = lw.lambda > 0.0 ? lw.lambda : 1.0;
    if (!cfg.alternating || !g.adversarial) {
      std::vector<std::pair<Var, double>> all = g.task_terms;
      if (g.adversarial) {
        all.emplace_back(g.disc_loss, d_weight);
        if (lw.lambda > 0.0) all.emplace_back(g.gen_loss, lw.lambda);
      }
      if (!all.empty()) {
        ag::backward(ag::weighted_sum(all));
        opt.step(params.list(), lr);
      }
    } else {
      // D first on the detached representations, then the encoders against
      // the updated, frozen D.
      ag::backward(ag::scale(g.disc_loss, d_weight));
      opt.step(params.list(), lr, discriminator);
      params.zero_grad();
      std::vector<std::pair<Var, double>> all = g.task_terms;
      if (lw.lambda > 0.0) {
        Binding frozen(params, true);
        Var gst = generator_loss(discriminate_pooled(ag::concat_rows(st_pools), frozen));
        Var gmt = generator_loss(discriminate_pooled(ag::concat_rows(mt_pools), frozen));
        all.emplace_back(ag::add(gst, gmt), lw.lambda);
      }
      if (!all.empty()) {
        ag::backward(ag::weighted_sum(all));
        opt.step(params.list(), lr, encoders);
      }
    }
    if (!params.all_finite()) throw DivergenceError("step " + std::to_string(step) + ": parameters became non-finite");

    TrainRecord rec;
    rec.step = step;
    rec.stage = "finetune";
    rec.parts = g.parts;
    rec.asr_weight = w_asr;
    rec.disc_acc = g.disc_acc;
    rec.lr = lr;
    rec.mix_p = g.mix_p;
    result.log.append(rec);

    if (!valid.empty() && (step % cfg.checkpoint_every == 0 || step == cfg.max_steps)) {
      const double m = validation_st_loss(params, valid);
      result.validation.emplace_back(step, m);
      best.offer(step, m, params);
      if (hook) hook(step, m, params);
    }
  }
  params.zero_grad();
  result.final_params = std::move(params);
  detail::finish(result, best);
  return result;
}

}  // namespace salign
