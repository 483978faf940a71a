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

// The speech translation model: acoustic encoder (strided-conv subsampling
// plus transformer layers, with a CTC head), a textual encoder shared by the
// speech and text paths, a weight-tied autoregressive decoder, and the
// modality discriminator (masked mean pool -> feed-forward stack -> sigmoid).
//
// All transformer stacks are pre-norm. Forward functions operate on one
// sequence at a time; padding is carried by masks and never read.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/rng.hpp"
#include "salign/synthdata.hpp"

namespace salign {

using ag::Var;

struct ModelConfig {
  int vocab_size = 40;
  int d_model = 64;
  int d_feat = 64;
  int heads = 4;
  int ffn_dim = 256;
  int aenc_layers = 2;
  int tenc_layers = 2;
  int dec_layers = 2;
  int subsample_layers = 2;  // each a kernel-3 stride-2 convolution
  int disc_hidden = 64;
  int disc_layers = 3;
  double dropout = 0.1;
  bool input_projection = false;

  int subsample_factor() const { return 1 << subsample_layers; }

  void validate() const {
    if (vocab_size <= kFirstContentToken) throw ConfigError("model: vocab_size too small");
    if (d_model < 1 || d_feat < 1 || ffn_dim < 1 || disc_hidden < 1) throw ConfigError("model: widths must be positive");
    if (heads < 1 || d_model % heads != 0) throw ConfigError("model: d_model must be divisible by heads");
    if (aenc_layers < 0 || tenc_layers < 0 || dec_layers < 0 || subsample_layers < 0 || disc_layers < 1)
      throw ConfigError("model: invalid layer counts");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
  }

  /// Canonical description of every shape-determining field; dropout is a
  /// training knob and does not enter.
  std::string canonical() const {
    std::ostringstream s;
    s << "vocab=" << vocab_size << ";d=" << d_model << ";feat=" << d_feat << ";heads=" << heads << ";ffn=" << ffn_dim
      << ";aenc=" << aenc_layers << ";tenc=" << tenc_layers << ";dec=" << dec_layers << ";sub=" << subsample_layers
      << ";disc_h=" << disc_hidden << ";disc_l=" << disc_layers << ";proj=" << (input_projection ? 1 : 0);
    return s.str();
  }
  std::uint64_t fingerprint() const { return fnv1a64(canonical()); }
};

enum class ParamGroup { kEmbedding, kAcousticEncoder, kCtcHead, kTextualEncoder, kDecoder, kDiscriminator };

inline ParamGroup group_of(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("embed.")) return ParamGroup::kEmbedding;
  if (starts("aenc.")) return ParamGroup::kAcousticEncoder;
  if (starts("ctc.")) return ParamGroup::kCtcHead;
  if (starts("tenc.")) return ParamGroup::kTextualEncoder;
  if (starts("dec.")) return ParamGroup::kDecoder;
  if (starts("disc.")) return ParamGroup::kDiscriminator;
  throw ConfigError("unknown parameter group for '" + name + "'");
}

/// Encoder-side parameters act as the generators; only the discriminator
/// group is updated by the discriminator loss.
inline bool is_discriminator(const std::string& name) { return group_of(name) == ParamGroup::kDiscriminator; }

/// All model parameters in a fixed, documented order (creation order below).
class ModelParams {
 public:
  ModelParams() = default;

  /// Xavier-uniform projections, zero biases, unit layer-norm gains,
  /// N(0, 1/d) embeddings.
  ModelParams(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng = Rng::derive(seed, Stream::kInit);
    const int d = cfg.d_model;
    add_normal("embed.weight", cfg.vocab_size, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    int c_in = cfg.d_feat;
    if (cfg.input_projection) {
      add_linear("aenc.proj", cfg.d_feat, d, rng);
      c_in = d;
    }
    for (int i = 0; i < cfg.subsample_layers; ++i) {
      add_linear("aenc.conv" + std::to_string(i), 3 * c_in, d, rng);
      c_in = d;
    }
    if (cfg.subsample_layers == 0 && !cfg.input_projection && cfg.d_feat != d)
      throw ConfigError("model: d_feat differs from d_model with no projection or subsampling");
    for (int l = 0; l < cfg.aenc_layers; ++l) add_encoder_layer("aenc.layers." + std::to_string(l), rng);
    add_norm("aenc.ln");
    add_linear("ctc", d, cfg.vocab_size, rng);
    for (int l = 0; l < cfg.tenc_layers; ++l) add_encoder_layer("tenc.layers." + std::to_string(l), rng);
    add_norm("tenc.ln");
    for (int l = 0; l < cfg.dec_layers; ++l) add_decoder_layer("dec.layers." + std::to_string(l), rng);
    add_norm("dec.ln");
    int h_in = d;
    for (int i = 0; i < cfg.disc_layers; ++i) {
      add_linear("disc.fc" + std::to_string(i), h_in, cfg.disc_hidden, rng);
      h_in = cfg.disc_hidden;
    }
    add_linear("disc.out", h_in, 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& list() { return params_; }
  const std::vector<Parameter>& list() const { return params_; }

  Parameter& at(const std::string& name) { return params_.at(index_.at(name)); }
  const Parameter& at(const std::string& name) const { return params_.at(index_.at(name)); }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.value.allFinite()) return false;
    return true;
  }

  /// Appends a parameter; used by construction and checkpoint loading.
  void push(std::string name, Matrix value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    Parameter p{std::move(name), std::move(value), Matrix()};
    p.zero_grad();
    params_.push_back(std::move(p));
  }

  void set_config(const ModelConfig& cfg) { cfg_ = cfg; }

 private:
  void add_normal(const std::string& name, int rows, int cols, double std, Rng& rng) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std;
    push(name, std::move(m));
  }
  void add_linear(const std::string& prefix, int in, int out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(in, out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * a;
    push(prefix + ".weight", std::move(w));
    push(prefix + ".bias", Matrix::Zero(1, out));
  }
  void add_norm(const std::string& prefix) {
    push(prefix + ".gain", Matrix::Ones(1, cfg_.d_model));
    push(prefix + ".bias", Matrix::Zero(1, cfg_.d_model));
  }
  void add_attention(const std::string& prefix, Rng& rng) {
    for (const char* p : {"q", "k", "v", "o"}) add_linear(prefix + "." + p, cfg_.d_model, cfg_.d_model, rng);
  }
  void add_ffn(const std::string& prefix, Rng& rng) {
    add_linear(prefix + ".fc1", cfg_.d_model, cfg_.ffn_dim, rng);
    add_linear(prefix + ".fc2", cfg_.ffn_dim, cfg_.d_model, rng);
  }
  void add_encoder_layer(const std::string& prefix, Rng& rng) {
    add_norm(prefix + ".ln1");
    add_attention(prefix + ".self_attn", rng);
    add_norm(prefix + ".ln2");
    add_ffn(prefix + ".ffn", rng);
  }
  void add_decoder_layer(const std::string& prefix, Rng& rng) {
    add_norm(prefix + ".ln1");
    add_attention(prefix + ".self_attn", rng);
    add_norm(prefix + ".ln2");
    add_attention(prefix + ".cross_attn", rng);
    add_norm(prefix + ".ln3");
    add_ffn(prefix + ".ffn", rng);
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Maps parameter names to graph variables for one forward/backward pass.
/// A frozen binding hands out constants, so nothing flows back into the
/// parameters it covers.
class Binding {
 public:
  explicit Binding(ModelParams& params, bool frozen = false) : params_(&params), frozen_(frozen) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Parameter& p = params_->at(name);
    Var v = frozen_ ? ag::constant(p.value) : ag::param(p);
    cache_.emplace(name, v);
    return v;
  }

  const ModelConfig& config() const { return params_->config(); }
  ModelParams& params() { return *params_; }
  bool frozen() const { return frozen_; }

 private:
  ModelParams* params_;
  bool frozen_;
  std::map<std::string, Var> cache_;
};

/// Time-major representation plus validity mask.
struct EncoderOutput {
  Var reps;  // [T x d]
  Mask mask;

  Index length() const { return reps.rows(); }
};

/// Dropout switch and its RNG. Evaluation mode (the default) is deterministic.
struct RunMode {
  bool training = false;
  Rng* rng = nullptr;

  Var drop(const Var& x, double rate) const {
    if (!training || rng == nullptr) return x;
    return ag::dropout(x, rate, *rng);
  }
};

inline Matrix sinusoidal_positions(Index length, int d) {
  Matrix pe(length, d);
  for (Index t = 0; t < length; ++t) {
    for (int i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(t, i) = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) pe(t, i + 1) = std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

namespace layers {

inline Var linear(const Var& x, Binding& w, const std::string& prefix) {
  return ag::add_row(ag::matmul(x, w(prefix + ".weight")), w(prefix + ".bias"));
}

inline Var norm(const Var& x, Binding& w, const std::string& prefix) {
  return ag::layer_norm(x, w(prefix + ".gain"), w(prefix + ".bias"));
}

inline Var attend(const Var& query_in, const Var& memory, const Mask& memory_mask, const Mask& query_mask, bool causal,
                  Binding& w, const std::string& prefix) {
  Var q = linear(query_in, w, prefix + ".q");
  Var k = linear(memory, w, prefix + ".k");
  Var v = linear(memory, w, prefix + ".v");
  Var a = ag::attention(q, k, v, memory_mask, query_mask, causal, w.config().heads);
  return linear(a, w, prefix + ".o");
}

inline Var feed_forward(const Var& x, Binding& w, const std::string& prefix, const RunMode& mode) {
  Var h = ag::gelu(linear(x, w, prefix + ".fc1"));
  h = mode.drop(h, w.config().dropout);
  return linear(h, w, prefix + ".fc2");
}

inline Var encoder_layer(const Var& x_in, const Mask& mask, Binding& w, const std::string& prefix, const RunMode& mode) {
  const double p = w.config().dropout;
  Var h = norm(x_in, w, prefix + ".ln1");
  Var x = ag::add(x_in, mode.drop(attend(h, h, mask, mask, false, w, prefix + ".self_attn"), p));
  h = norm(x, w, prefix + ".ln2");
  return ag::add(x, mode.drop(feed_forward(h, w, prefix + ".ffn", mode), p));
}

inline Var encoder_stack(Var x, const Mask& mask, int n_layers, Binding& w, const std::string& prefix, const RunMode& mode) {
  for (int l = 0; l < n_layers; ++l) x = encoder_layer(x, mask, w, prefix + ".layers." + std::to_string(l), mode);
  return ag::mask_rows(norm(x, w, prefix + ".ln"), mask);
}

}  // namespace layers

/// Scaled embedding rows of `tokens` (no positions) -> [L x d].
inline Var token_embeddings(std::span<const int> tokens, Binding& w) {
  const double s = std::sqrt(static_cast<double>(w.config().d_model));
  return ag::scale(ag::gather_rows(w("embed.weight"), tokens), s);
}

/// The scaled embedding table as a plain matrix (row i = token i).
inline Matrix embedding_rows(const ModelParams& params) {
  return params.at("embed.weight").value * std::sqrt(static_cast<double>(params.config().d_model));
}

inline Var add_positions(const Var& x) {
  return ag::add(x, ag::constant(sinusoidal_positions(x.rows(), static_cast<int>(x.cols()))));
}

/// Text-path input: scaled embeddings plus positions. Padding rows are zeroed.
inline EncoderOutput embed_text(std::span<const int> tokens, const Mask& mask, Binding& w, const RunMode& mode = {}) {
  if (tokens.size() != mask.size()) throw ShapeError("embed_text: mask length mismatch");
  Var x = mode.drop(add_positions(token_embeddings(tokens, w)), w.config().dropout);
  return {ag::mask_rows(x, mask), mask};
}

/// Speech frames [T x d_feat] -> token-level representations [ceil(T/4) x d].
inline EncoderOutput acoustic_encode(const Var& frames, const Mask& frame_mask, Binding& w, const RunMode& mode = {}) {
  const ModelConfig& cfg = w.config();
  if (frames.rows() == 0 || count_valid(frame_mask) == 0) throw EmptyInputError("acoustic_encode: no frames");
  if (static_cast<Index>(frame_mask.size()) != frames.rows()) throw ShapeError("acoustic_encode: mask length mismatch");
  if (frames.cols() != cfg.d_feat) throw ShapeError("acoustic_encode: frame width differs from d_feat");
  Var x = ag::mask_rows(frames, frame_mask);
  Mask m = frame_mask;
  if (cfg.input_projection) x = layers::linear(x, w, "aenc.proj");
  for (int i = 0; i < cfg.subsample_layers; ++i) {
    Var u = ag::unfold_time(x, m, 3, 2, 1);
    x = ag::gelu(layers::linear(u, w, "aenc.conv" + std::to_string(i)));
    Mask next(static_cast<std::size_t>(x.rows()));
    for (std::size_t t = 0; t < next.size(); ++t) next[t] = 2 * t < m.size() && m[2 * t];
    m = std::move(next);
  }
  x = mode.drop(add_positions(x), cfg.dropout);
  return {layers::encoder_stack(x, m, cfg.aenc_layers, w, "aenc", mode), m};
}

inline EncoderOutput acoustic_encode(const Matrix& frames, const Mask& frame_mask, Binding& w, const RunMode& mode = {}) {
  return acoustic_encode(ag::constant(frames), frame_mask, w, mode);
}

/// Shared textual encoder over either embedded text or acoustic output.
inline EncoderOutput textual_encode(const EncoderOutput& input, Binding& w, const RunMode& mode = {}) {
  if (input.reps.cols() != w.config().d_model) throw ShapeError("textual_encode: input width differs from d_model");
  if (static_cast<Index>(input.mask.size()) != input.reps.rows()) throw ShapeError("textual_encode: mask length mismatch");
  Var x = ag::mask_rows(input.reps, input.mask);
  return {layers::encoder_stack(x, input.mask, w.config().tenc_layers, w, "tenc", mode), input.mask};
}

/// Per-frame CTC log-distributions over the vocabulary from acoustic output.
inline Var ctc_log_probs(const EncoderOutput& aenc, Binding& w) {
  return ag::log_softmax_rows(layers::linear(aenc.reps, w, "ctc"));
}

/// Teacher-forced decoder: logits [L x vocab] for each prefix position.
/// Position i sees prev_tokens[0..i] and the whole encoder output.
inline Var decoder_forward(const EncoderOutput& encoder_out, std::span<const int> prev_tokens, Binding& w,
                           const RunMode& mode = {}) {
  const ModelConfig& cfg = w.config();
  if (prev_tokens.empty()) throw ShapeError("decoder_forward: empty prefix");
  if (count_valid(encoder_out.mask) == 0) throw EmptyInputError("decoder_forward: encoder output fully masked");
  const Mask all(prev_tokens.size(), true);
  Var x = mode.drop(add_positions(token_embeddings(prev_tokens, w)), cfg.dropout);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string pre = "dec.layers." + std::to_string(l);
    Var h = layers::norm(x, w, pre + ".ln1");
    x = ag::add(x, mode.drop(layers::attend(h, h, all, all, true, w, pre + ".self_attn"), cfg.dropout));
    h = layers::norm(x, w, pre + ".ln2");
    x = ag::add(x, mode.drop(layers::attend(h, encoder_out.reps, encoder_out.mask, all, false, w, pre + ".cross_attn"),
                             cfg.dropout));
    h = layers::norm(x, w, pre + ".ln3");
    x = ag::add(x, mode.drop(layers::feed_forward(h, w, pre + ".ffn", mode), cfg.dropout));
  }
  x = layers::norm(x, w, "dec.ln");
  return ag::matmul_nt(x, w("embed.weight"));
}

/// Masked mean pooling -> [1 x d].
inline Var pool(const EncoderOutput& h) { return ag::masked_mean_rows(h.reps, h.mask); }

/// Discriminator over pooled representations [B x d] -> probabilities [B x 1]
/// that each row comes from the text modality.
inline Var discriminate_pooled(const Var& pooled, Binding& w) {
  const ModelConfig& cfg = w.config();
  Var h = pooled;
  for (int i = 0; i < cfg.disc_layers; ++i) h = ag::gelu(layers::linear(h, w, "disc.fc" + std::to_string(i)));
  return ag::sigmoid(layers::linear(h, w, "disc.out"));
}

/// Single-sequence discriminator probability (a 1x1 variable).
inline Var discriminate(const EncoderOutput& h, Binding& w) {
  if (count_valid(h.mask) == 0) throw EmptyInputError("discriminate: every position is masked");
  return discriminate_pooled(pool(h), w);
}

}  // namespace salign
