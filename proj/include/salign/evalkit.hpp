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

// Decoding and metrics: beam search, CTC greedy decoding, corpus BLEU, WER.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/network.hpp"
#include "salign/synthdata.hpp"

namespace salign {

inline constexpr int kDefaultBeam = 8;

struct DecodeResult {
  Tokens tokens;        // generated tokens, <bos> excluded
  double score = 0.0;   // summed log-probability
  double normalized = 0.0;  // score / length^length_penalty
  bool finished = false;    // tokens end with <eos>
};

namespace detail {
struct Hyp {
  Tokens tokens;
  double score;
};
inline bool better(const Hyp& a, const Hyp& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}
inline double normalize(double score, std::size_t len, double alpha) {
  return score / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), alpha);
}
}  // namespace detail

/// Length-normalized beam search over `next(prefix) -> log-probs row`.
/// The prefix passed to `next` starts with <bos>. Ties are broken by the
/// lexicographically smaller token sequence, so beam 1 is greedy argmax with
/// the lowest id winning ties. Returns every finished hypothesis (or the
/// surviving unfinished ones when none finished) best first.
template <typename NextFn>
std::vector<DecodeResult> beam_search_all(NextFn&& next, int beam, int max_len, double length_penalty = 1.0) {
  if (beam < 1) throw ConfigError("beam_search: beam must be at least 1");
  if (max_len < 1) throw ConfigError("beam_search: max_len must be at least 1");
  std::vector<detail::Hyp> alive{{Tokens{}, 0.0}};
  std::vector<DecodeResult> done;
  for (int step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<detail::Hyp> cand;
    for (const auto& h : alive) {
      Tokens prefix{kBosId};
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const Eigen::RowVectorXd lp = next(prefix);
      for (Index v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp(v))) continue;
        Tokens t = h.tokens;
        t.push_back(static_cast<int>(v));
        cand.push_back({std::move(t), h.score + lp(v)});
      }
    }
    std::sort(cand.begin(), cand.end(), detail::better);
    if (cand.size() > static_cast<std::size_t>(beam)) cand.resize(static_cast<std::size_t>(beam));
    alive.clear();
    for (auto& c : cand) {
      if (c.tokens.back() == kEosId) {
        DecodeResult r{c.tokens, c.score, detail::normalize(c.score, c.tokens.size(), length_penalty), true};
        done.push_back(std::move(r));
      } else {
        alive.push_back(std::move(c));
      }
    }
    if (done.size() >= static_cast<std::size_t>(beam)) break;
  }
  if (done.empty()) {
    for (const auto& h : alive)
      done.push_back({h.tokens, h.score, detail::normalize(h.score, h.tokens.size(), length_penalty), false});
  }
  std::stable_sort(done.begin(), done.end(), [](const DecodeResult& a, const DecodeResult& b) {
    if (a.normalized != b.normalized) return a.normalized > b.normalized;
    return a.tokens < b.tokens;
  });
  return done;
}

template <typename NextFn>
DecodeResult beam_search(NextFn&& next, int beam = kDefaultBeam, int max_len = 32, double length_penalty = 1.0) {
  return beam_search_all(std::forward<NextFn>(next), beam, max_len, length_penalty).front();
}

/// Stepwise argmax decoding, lowest id on ties.
template <typename NextFn>
DecodeResult greedy_decode(NextFn&& next, int max_len = 32) {
  DecodeResult r;
  Tokens prefix{kBosId};
  for (int step = 0; step < max_len; ++step) {
    const Eigen::RowVectorXd lp = next(prefix);
    Index best = -1;
    for (Index v = 0; v < lp.size(); ++v)
      if (std::isfinite(lp(v)) && (best < 0 || lp(v) > lp(best))) best = v;
    if (best < 0) break;
    r.tokens.push_back(static_cast<int>(best));
    r.score += lp(best);
    prefix.push_back(static_cast<int>(best));
    if (best == kEosId) {
      r.finished = true;
      break;
    }
  }
  r.normalized = detail::normalize(r.score, r.tokens.size(), 1.0);
  return r;
}

/// Strips the trailing <eos> of a finished hypothesis.
inline Tokens content_tokens(const DecodeResult& r) {
  Tokens t = r.tokens;
  if (r.finished && !t.empty()) t.pop_back();
  return t;
}

// ---------------------------------------------------------------------------
// CTC greedy decoding

/// Per-frame argmax, collapse repeats, drop blanks.
inline Tokens ctc_greedy_decode(const Matrix& log_probs, Index input_len = -1) {
  if (input_len < 0) input_len = log_probs.rows();
  Tokens out;
  int prev = -1;
  for (Index t = 0; t < input_len; ++t) {
    Index best = 0;
    for (Index c = 1; c < log_probs.cols(); ++c)
      if (log_probs(t, c) > log_probs(t, best)) best = c;
    const int tok = static_cast<int>(best);
    if (tok != prev && tok != kBlankId) out.push_back(tok);
    prev = tok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model decoders

/// next() for the decoder over a fixed encoder output: log-softmax of the
/// last position with <blank>, <pad>, and <bos> excluded.
class DecoderStep {
 public:
  DecoderStep(ModelParams& params, EncoderOutput enc) : w_(params), enc_(std::move(enc)) {}
  Eigen::RowVectorXd operator()(const Tokens& prefix) {
    ag::NoGradGuard ng;
    Var logits = decoder_forward(enc_, prefix, w_);
    Eigen::RowVectorXd last = logits.value().row(logits.rows() - 1);
    for (int r : {kBlankId, kPadId, kBosId}) last(r) = -std::numeric_limits<double>::infinity();
    const double m = last.maxCoeff();
    const double lse = m + std::log((last.array() - m).exp().sum());
    return last.array() - lse;
  }

 private:
  Binding w_;
  EncoderOutput enc_;
};

inline EncoderOutput encode_speech(ModelParams& params, const Matrix& frames) {
  ag::NoGradGuard ng;
  Binding w(params);
  auto a = acoustic_encode(frames, Mask(static_cast<std::size_t>(frames.rows()), true), w);
  auto t = textual_encode(a, w);
  return {ag::constant(t.reps.value()), t.mask};
}

inline EncoderOutput encode_text(ModelParams& params, const Tokens& src) {
  ag::NoGradGuard ng;
  Binding w(params);
  auto t = textual_encode(embed_text(src, Mask(src.size(), true), w), w);
  return {ag::constant(t.reps.value()), t.mask};
}

struct DecodeOptions {
  int beam = kDefaultBeam;
  int max_len = 24;
  double length_penalty = 1.0;
};

inline Tokens translate_speech(ModelParams& params, const Matrix& frames, const DecodeOptions& o = {}) {
  DecoderStep next(params, encode_speech(params, frames));
  return content_tokens(beam_search(next, o.beam, o.max_len, o.length_penalty));
}

inline Tokens translate_text(ModelParams& params, const Tokens& src, const DecodeOptions& o = {}) {
  DecoderStep next(params, encode_text(params, src));
  return content_tokens(beam_search(next, o.beam, o.max_len, o.length_penalty));
}

inline Tokens transcribe(ModelParams& params, const Matrix& frames) {
  ag::NoGradGuard ng;
  Binding w(params);
  auto a = acoustic_encode(frames, Mask(static_cast<std::size_t>(frames.rows()), true), w);
  return ctc_greedy_decode(ctc_log_probs(a, w).value());
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {
template <typename T>
std::map<std::vector<T>, int> ngram_counts(const std::vector<T>& s, std::size_t n) {
  std::map<std::vector<T>, int> c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[std::vector<T>(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return c;
}
}  // namespace detail

struct BleuStats {
  double score = 0.0;
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

/// Corpus 4-gram BLEU in [0, 100] with brevity penalty and exponential
/// smoothing of zero-match orders (the k-th such order gets precision
/// 100 / (2^k * total)). No match of any order scores 0.
template <typename T>
BleuStats corpus_bleu_stats(const std::vector<std::vector<T>>& hyps, const std::vector<std::vector<T>>& refs) {
  if (hyps.size() != refs.size()) throw ShapeError("corpus_bleu: hypothesis and reference counts differ");
  if (hyps.empty()) throw EmptyInputError("corpus_bleu: empty corpus");
  constexpr std::size_t N = 4;
  double correct[N] = {0, 0, 0, 0}, total[N] = {0, 0, 0, 0};
  BleuStats s;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    s.hyp_len += hyps[i].size();
    s.ref_len += refs[i].size();
    for (std::size_t n = 1; n <= N; ++n) {
      const auto h = detail::ngram_counts(hyps[i], n);
      const auto r = detail::ngram_counts(refs[i], n);
      for (const auto& [g, c] : h) {
        total[n - 1] += c;
        auto it = r.find(g);
        if (it != r.end()) correct[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (s.hyp_len == 0) return s;
  if (std::all_of(std::begin(correct), std::end(correct), [](double c) { return c == 0; })) return s;
  double smooth = 1.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (total[n] == 0) return s;  // zero precision for this order
    if (correct[n] == 0) {
      smooth *= 2.0;
      s.precisions[n] = 100.0 / (smooth * total[n]);
    } else {
      s.precisions[n] = 100.0 * correct[n] / total[n];
    }
    log_sum += std::log(s.precisions[n]);
  }
  s.brevity_penalty = s.hyp_len < s.ref_len ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)) : 1.0;
  s.score = s.brevity_penalty * std::exp(log_sum / N);
  return s;
}

template <typename T>
double corpus_bleu(const std::vector<std::vector<T>>& hyps, const std::vector<std::vector<T>>& refs) {
  return corpus_bleu_stats(hyps, refs).score;
}

template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Total Levenshtein edits over total reference tokens.
template <typename T>
double wer(const std::vector<std::vector<T>>& hyps, const std::vector<std::vector<T>>& refs) {
  if (hyps.size() != refs.size()) throw ShapeError("wer: hypothesis and reference counts differ");
  std::size_t edits = 0, words = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(hyps[i], refs[i]);
    words += refs[i].size();
  }
  if (words == 0) throw EmptyInputError("wer: empty reference corpus");
  return static_cast<double>(edits) / static_cast<double>(words);
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Task-level evaluation

struct TaskScore {
  std::string task;    // "st", "mt", or "asr"
  std::string metric;  // "bleu" or "wer"
  double value = 0.0;
  std::size_t n_sentences = 0;
  int beam = 0;  // 0 for CTC decoding
};

inline TaskScore evaluate_st(ModelParams& params, const std::vector<Triple>& data, const DecodeOptions& o = {}) {
  std::vector<Tokens> hyps, refs;
  for (const auto& ex : data) {
    hyps.push_back(translate_speech(params, ex.frames, o));
    refs.push_back(ex.tgt_tokens);
  }
  return {"st", "bleu", corpus_bleu(hyps, refs), data.size(), o.beam};
}

inline TaskScore evaluate_mt(ModelParams& params, const std::vector<Triple>& data, const DecodeOptions& o = {}) {
  std::vector<Tokens> hyps, refs;
  for (const auto& ex : data) {
    hyps.push_back(translate_text(params, ex.src_tokens, o));
    refs.push_back(ex.tgt_tokens);
  }
  return {"mt", "bleu", corpus_bleu(hyps, refs), data.size(), o.beam};
}

inline TaskScore evaluate_asr(ModelParams& params, const std::vector<Triple>& data) {
  std::vector<Tokens> hyps, refs;
  for (const auto& ex : data) {
    hyps.push_back(transcribe(params, ex.frames));
    refs.push_back(ex.src_tokens);
  }
  return {"asr", "wer", wer(hyps, refs), data.size(), 0};
}

}  // namespace salign
