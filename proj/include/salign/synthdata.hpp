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

// Synthetic (speech, transcription, translation) triples with a controllable
// modality gap, the on-disk manifest format, and frame-bounded batching.
//
// Token ids: 0 <blank> (CTC only), 1 <pad>, 2 <bos>, 3 <eos>; ids from
// kFirstContentToken upward are words. Speech is rendered by expanding each
// word into a few noisy copies of its prototype vector, with occasional
// silence segments (zero prototype + noise) in front of words.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/rng.hpp"

namespace salign {

inline constexpr int kBlankId = 0;
inline constexpr int kPadId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kFirstContentToken = 4;

using Tokens = std::vector<int>;

/// One training example. Text-only pairs (MT data) carry an empty frame matrix.
struct Triple {
  std::string id;
  Matrix frames;  // [T_frames x d_feat]
  Tokens src_tokens;
  Tokens tgt_tokens;

  bool has_speech() const { return frames.rows() > 0; }
  bool operator==(const Triple& o) const {
    return id == o.id && frames.rows() == o.frames.rows() && frames.cols() == o.frames.cols() &&
           frames == o.frames && src_tokens == o.src_tokens && tgt_tokens == o.tgt_tokens;
  }
};

enum class TranslationKind { kIdentity, kPermute };

/// Word-level permutation followed by a cyclic positional shift:
/// tgt[i] = perm(src[(i + shift) mod L]).
struct TranslationRule {
  TranslationKind kind = TranslationKind::kPermute;
  int shift = 1;
};

struct SynthSpec {
  int vocab_size = 40;
  int min_len = 3;
  int max_len = 8;
  int min_frames_per_token = 6;
  int max_frames_per_token = 10;
  double blank_insert_rate = 0.2;
  double noise_std = 0.1;
  int d_feat = 64;
  double prototype_std = 1.0;
  TranslationRule translation;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size <= kFirstContentToken) throw ConfigError("synth spec: vocab_size must exceed the 4 reserved ids");
    if (min_len < 1 || max_len < min_len) throw ConfigError("synth spec: need 1 <= min_len <= max_len");
    if (min_frames_per_token < 1 || max_frames_per_token < min_frames_per_token)
      throw ConfigError("synth spec: need 1 <= min_frames_per_token <= max_frames_per_token");
    if (blank_insert_rate < 0.0 || blank_insert_rate > 1.0) throw ConfigError("synth spec: blank_insert_rate not in [0,1]");
    if (!(noise_std >= 0.0)) throw ConfigError("synth spec: noise_std must be nonnegative");
    if (d_feat < 1) throw ConfigError("synth spec: d_feat must be positive");
  }
  int content_vocab() const { return vocab_size - kFirstContentToken; }
};

/// Per-token prototype vectors; row 0 (blank) is the zero vector and rows
/// for the other reserved ids are unused zeros.
inline Matrix make_prototypes(const SynthSpec& spec) {
  spec.validate();
  Rng rng = Rng::derive(spec.seed, Stream::kPrototypes);
  Matrix protos = Matrix::Zero(spec.vocab_size, spec.d_feat);
  for (int t = kFirstContentToken; t < spec.vocab_size; ++t)
    for (int c = 0; c < spec.d_feat; ++c) protos(t, c) = static_cast<float>(rng.normal() * spec.prototype_std);
  return protos;
}

/// The translation function as an explicit word map (identity or a seeded
/// permutation of the content ids).
inline std::vector<int> make_word_map(const SynthSpec& spec) {
  std::vector<int> map(static_cast<std::size_t>(spec.vocab_size));
  std::iota(map.begin(), map.end(), 0);
  if (spec.translation.kind == TranslationKind::kPermute) {
    Rng rng = Rng::derive(spec.seed, Stream::kTranslation);
    for (int i = spec.vocab_size - 1; i > kFirstContentToken; --i) {
      int j = rng.uniform_int(kFirstContentToken, i);
      std::swap(map[static_cast<std::size_t>(i)], map[static_cast<std::size_t>(j)]);
    }
  }
  return map;
}

inline Tokens apply_translation(const Tokens& src, const SynthSpec& spec, const std::vector<int>& word_map) {
  Tokens out(src.size());
  const auto n = static_cast<long>(src.size());
  const long shift = spec.translation.kind == TranslationKind::kIdentity ? 0 : spec.translation.shift;
  for (long i = 0; i < n; ++i) {
    long j = ((i + shift) % n + n) % n;
    out[static_cast<std::size_t>(i)] = word_map[static_cast<std::size_t>(src[static_cast<std::size_t>(j)])];
  }
  return out;
}

/// Expands each token into k ~ U{min..max frames_per_token} noisy copies of
/// its prototype; before each token, with probability blank_insert_rate, a
/// silence segment of the same length distribution is inserted.
inline Matrix render_speech(const Tokens& src_tokens, const SynthSpec& spec, const Matrix& prototypes, Rng& rng) {
  std::vector<int> frame_token;
  frame_token.reserve(src_tokens.size() * static_cast<std::size_t>(spec.max_frames_per_token) * 2);
  for (int tok : src_tokens) {
    if (tok < kFirstContentToken || tok >= spec.vocab_size) throw ConfigError("render_speech: token outside content vocabulary");
    if (spec.blank_insert_rate > 0.0 && rng.bernoulli(spec.blank_insert_rate)) {
      int k = rng.uniform_int(spec.min_frames_per_token, spec.max_frames_per_token);
      frame_token.insert(frame_token.end(), static_cast<std::size_t>(k), kBlankId);
    }
    int k = rng.uniform_int(spec.min_frames_per_token, spec.max_frames_per_token);
    frame_token.insert(frame_token.end(), static_cast<std::size_t>(k), tok);
  }
  Matrix frames(static_cast<Index>(frame_token.size()), spec.d_feat);
  for (Index t = 0; t < frames.rows(); ++t) {
    for (Index c = 0; c < frames.cols(); ++c) {
      double noise = spec.noise_std > 0.0 ? rng.normal() * spec.noise_std : 0.0;
      // Rounded through float so frames survive the float32 frame files exactly.
      frames(t, c) = static_cast<float>(prototypes(frame_token[static_cast<std::size_t>(t)], c) + noise);
    }
  }
  return frames;
}

inline Tokens sample_sentence(const SynthSpec& spec, Rng& rng) {
  int len = rng.uniform_int(spec.min_len, spec.max_len);
  Tokens s(static_cast<std::size_t>(len));
  for (auto& t : s) t = rng.uniform_int(kFirstContentToken, spec.vocab_size - 1);
  return s;
}

/// Triples `first_index .. first_index + n - 1` of the corpus defined by
/// `spec`. Each triple depends only on (spec, index), so disjoint index
/// ranges give disjoint train/valid/test splits of one stream.
inline std::vector<Triple> generate_corpus(const SynthSpec& spec, std::size_t n, std::size_t first_index = 0,
                                           bool with_speech = true) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_corpus: n must be at least 1");
  const Matrix protos = make_prototypes(spec);
  const auto word_map = make_word_map(spec);
  std::vector<Triple> out;
  out.reserve(n);
  for (std::size_t i = first_index; i < first_index + n; ++i) {
    Rng rng = Rng::derive(spec.seed, Stream::kData, i);
    Triple t;
    t.id = (with_speech ? "utt" : "txt") + std::to_string(i);
    t.src_tokens = sample_sentence(spec, rng);
    t.tgt_tokens = apply_translation(t.src_tokens, spec, word_map);
    t.frames = with_speech ? render_speech(t.src_tokens, spec, protos, rng) : Matrix(0, spec.d_feat);
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and manifest files

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second)
        throw IngestionError("vocabulary: duplicate token '" + words_[i] + "'");
    }
  }

  /// Reserved ids 0-3 followed by w4, w5, ...
  static Vocabulary synthetic(int vocab_size) {
    std::vector<std::string> words = {"<blank>", "<pad>", "<bos>", "<eos>"};
    for (int i = kFirstContentToken; i < vocab_size; ++i) words.push_back("w" + std::to_string(i));
    return Vocabulary(std::move(words));
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("vocabulary: cannot open " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      words.push_back(line);
    }
    if (words.size() < 4 || words[0] != "<blank>" || words[1] != "<pad>" || words[2] != "<bos>" || words[3] != "<eos>")
      throw IngestionError("vocabulary: first lines must be <blank>, <pad>, <bos>, <eos>");
    return Vocabulary(std::move(words));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    for (const auto& w : words_) out << w << '\n';
    if (!out) throw IngestionError("vocabulary: cannot write " + path.string());
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::string detokenize(const Tokens& toks) const {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (i) s += ' ';
      s += word(toks[i]);
    }
    return s;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Frame file: little-endian uint32 T, uint32 d, then T*d float32 row-major.
inline void write_frames(const std::filesystem::path& path, const Matrix& frames) {
  static_assert(std::endian::native == std::endian::little, "frame files assume a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write frame file " + path.string());
  std::uint32_t header[2] = {static_cast<std::uint32_t>(frames.rows()), static_cast<std::uint32_t>(frames.cols())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(static_cast<std::size_t>(frames.size()));
  for (Index i = 0; i < frames.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(frames.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline Matrix read_frames(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open frame file " + path.string());
  std::uint32_t header[2];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) throw IngestionError("truncated frame header in " + path.string());
  std::vector<float> buf(static_cast<std::size_t>(header[0]) * header[1]);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw IngestionError("truncated frame data in " + path.string());
  Matrix m(header[0], header[1]);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = buf[i];
  return m;
}

inline constexpr const char* kManifestHeader = "id\tframes\tn_frames\tsrc_text\ttgt_text";

/// Writes `<dir>/manifest.tsv` and one frame file per triple under
/// `<dir>/frames/`. Frame paths in the manifest are relative to `dir`.
inline void write_manifest(const std::filesystem::path& dir, const std::vector<Triple>& triples, const Vocabulary& vocab) {
  std::filesystem::create_directories(dir / "frames");
  std::ofstream out(dir / "manifest.tsv");
  if (!out) throw IngestionError("cannot write manifest in " + dir.string());
  out << kManifestHeader << '\n';
  for (const auto& t : triples) {
    std::string rel = "frames/" + t.id + ".bin";
    write_frames(dir / rel, t.frames);
    out << t.id << '\t' << rel << '\t' << t.frames.rows() << '\t' << vocab.detokenize(t.src_tokens) << '\t'
        << vocab.detokenize(t.tgt_tokens) << '\n';
  }
}

namespace detail {
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

inline Tokens tokenize(const std::string& text, const Vocabulary& vocab, std::size_t row) {
  Tokens out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    auto id = vocab.find(w);
    if (!id) throw IngestionError("manifest row " + std::to_string(row) + ": unknown token '" + w + "'");
    if (*id < kFirstContentToken)
      throw IngestionError("manifest row " + std::to_string(row) + ": reserved token '" + w + "' in text");
    out.push_back(*id);
  }
  return out;
}
}  // namespace detail

inline std::vector<Triple> load_manifest(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<Triple> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (row == 1) {
      if (line != kManifestHeader) throw IngestionError("manifest row 1: bad header");
      continue;
    }
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    const std::string where = "manifest row " + std::to_string(row);
    if (f.size() != 5) throw IngestionError(where + ": expected 5 tab-separated fields");
    if (!ids.insert(f[0]).second) throw IngestionError(where + ": duplicate id '" + f[0] + "'");
    Triple t;
    t.id = f[0];
    long n_frames = 0;
    try {
      std::size_t used = 0;
      n_frames = std::stol(f[2], &used);
      if (used != f[2].size() || n_frames < 0) throw std::invalid_argument("n_frames");
    } catch (const std::exception&) {
      throw IngestionError(where + ": n_frames is not a nonnegative integer");
    }
    try {
      t.frames = read_frames(base / f[1]);
    } catch (const IngestionError& e) {
      throw IngestionError(where + ": " + e.what());
    }
    if (t.frames.rows() != n_frames) throw IngestionError(where + ": n_frames does not match the stored frame matrix");
    if (!t.frames.allFinite()) throw IngestionError(where + ": frame matrix has non-finite values");
    t.src_tokens = detail::tokenize(f[3], vocab, row);
    t.tgt_tokens = detail::tokenize(f[4], vocab, row);
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::size_t> indices;  // positions in the source dataset
  std::vector<Matrix> frames;        // each right-padded to the batch's longest
  std::vector<Mask> frame_masks;
  std::vector<Tokens> src;  // right-padded with <pad>
  std::vector<Mask> src_masks;
  std::vector<Tokens> tgt;
  std::vector<Mask> tgt_masks;

  std::size_t size() const { return indices.size(); }
  std::size_t padded_frames() const { return frames.empty() ? 0 : frames.size() * static_cast<std::size_t>(frames[0].rows()); }
};

namespace detail {
inline void pad_tokens(const std::vector<const Tokens*>& seqs, std::vector<Tokens>& out, std::vector<Mask>& masks) {
  std::size_t longest = 0;
  for (auto* s : seqs) longest = std::max(longest, s->size());
  for (auto* s : seqs) {
    Tokens t(*s);
    Mask m(s->size(), true);
    t.resize(longest, kPadId);
    m.resize(longest, false);
    out.push_back(std::move(t));
    masks.push_back(std::move(m));
  }
}

inline Batch assemble(const std::vector<Triple>& data, const std::vector<std::size_t>& members) {
  Batch b;
  b.indices = members;
  Index longest = 0;
  for (auto i : members) longest = std::max(longest, data[i].frames.rows());
  std::vector<const Tokens*> src, tgt;
  for (auto i : members) {
    const auto& t = data[i];
    if (t.has_speech()) {
      Matrix f = Matrix::Zero(longest, t.frames.cols());
      f.topRows(t.frames.rows()) = t.frames;
      Mask m(static_cast<std::size_t>(longest), false);
      std::fill(m.begin(), m.begin() + t.frames.rows(), true);
      b.frames.push_back(std::move(f));
      b.frame_masks.push_back(std::move(m));
    }
    src.push_back(&t.src_tokens);
    tgt.push_back(&t.tgt_tokens);
  }
  pad_tokens(src, b.src, b.src_masks);
  pad_tokens(tgt, b.tgt, b.tgt_masks);
  return b;
}

/// Length-sorted greedy packing under `batch size * longest length <= budget`,
/// then a seeded shuffle of batch order.
template <typename LengthFn>
std::vector<Batch> pack(const std::vector<Triple>& data, std::size_t budget, std::uint64_t seed, LengthFn length) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, Stream::kBatching);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return length(data[a]) < length(data[b]); });
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> cur;
  std::size_t cur_max = 0;
  for (auto i : order) {
    std::size_t len = length(data[i]);
    if (len > budget) throw ConfigError("make_batches: example '" + data[i].id + "' exceeds the batch budget");
    std::size_t new_max = std::max(cur_max, len);
    if (!cur.empty() && (cur.size() + 1) * new_max > budget) {
      groups.push_back(std::move(cur));
      cur.clear();
      new_max = len;
    }
    cur.push_back(i);
    cur_max = new_max;
  }
  if (!cur.empty()) groups.push_back(std::move(cur));
  for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[static_cast<std::size_t>(rng.next_u64() % i)]);
  std::vector<Batch> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(assemble(data, g));
  return out;
}
}  // namespace detail

/// Speech batches bounded by padded frame count.
inline std::vector<Batch> make_batches(const std::vector<Triple>& dataset, std::size_t max_frames, std::uint64_t shuffle_seed) {
  return detail::pack(dataset, max_frames, shuffle_seed,
                      [](const Triple& t) { return static_cast<std::size_t>(t.frames.rows()); });
}

/// Text batches bounded by padded source-token count.
inline std::vector<Batch> make_text_batches(const std::vector<Triple>& dataset, std::size_t max_tokens, std::uint64_t shuffle_seed) {
  return detail::pack(dataset, max_tokens, shuffle_seed,
                      [](const Triple& t) { return std::max(t.src_tokens.size(), t.tgt_tokens.size() + 1); });
}

}  // namespace salign
