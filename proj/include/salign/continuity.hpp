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

// Continuous discriminator targets. A rate p ~ U(0,1) is drawn; below the
// threshold tau a speech sequence is mixed with text (acoustic positions
// swapped for token embeddings with probability p), otherwise a text
// sequence is roughened with audio-like noise (blank or repeated tokens
// inserted with probability 1 - p). Either way the discriminator's target
// for the result is p. Mixed sequences only ever reach the discriminator.

#pragma once

#include <string>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/rng.hpp"
#include "salign/synthdata.hpp"

namespace salign {

enum class MixBranch { kStMix, kMtNoise };

enum class ReplacementSource { kCtcArgmax, kGold };

struct MixOutcome {
  Matrix sequence;  // [T x d], input to the textual encoder
  Mask mask;
  double label = 0.0;  // discriminator target, equal to the sampled rate
  MixBranch branch = MixBranch::kStMix;
  std::vector<Index> replaced_positions;  // st_mix only
  std::vector<Index> inserted_positions;  // mt_noise only, indices into `sequence`
};

inline double sample_mix_rate(Rng& rng) { return rng.uniform(); }

inline MixBranch branch_for(double p, double tau) { return p < tau ? MixBranch::kStMix : MixBranch::kMtNoise; }

inline int argmax_row(const Matrix& m, Index r) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

/// Replaces acoustic positions by text embeddings. Eligible positions are
/// unmasked frames whose CTC argmax is not blank; each is replaced
/// independently with probability p by the embedding row of its token. With
/// ReplacementSource::kGold the token identity comes from `gold`, indexed by
/// the position's collapsed CTC segment (falling back to the argmax past the
/// end of `gold`).
inline MixOutcome mix_st_sequence(const Matrix& h_aenc, const Mask& mask, const Matrix& ctc_log_probs,
                                  const Matrix& embedding_rows, double p, Rng& rng,
                                  ReplacementSource source = ReplacementSource::kCtcArgmax, const Tokens* gold = nullptr) {
  if (ctc_log_probs.rows() != h_aenc.rows() || static_cast<Index>(mask.size()) != h_aenc.rows())
    throw ShapeError("mix_st_sequence: CTC predictions, mask, and representations differ in length");
  if (embedding_rows.cols() != h_aenc.cols()) throw ShapeError("mix_st_sequence: embedding width differs");
  if (p < 0.0 || p > 1.0) throw ConfigError("mix_st_sequence: p outside [0,1]");
  if (source == ReplacementSource::kGold && gold == nullptr) throw ConfigError("mix_st_sequence: gold source without tokens");
  MixOutcome out{h_aenc, mask, p, MixBranch::kStMix, {}, {}};
  int prev = kBlankId;
  int segment = -1;
  for (Index t = 0; t < h_aenc.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const int tok = argmax_row(ctc_log_probs, t);
    if (tok != kBlankId && tok != prev) ++segment;
    prev = tok;
    if (tok == kBlankId) continue;
    if (!rng.bernoulli(p)) continue;
    int use = tok;
    if (source == ReplacementSource::kGold && segment < static_cast<int>(gold->size()))
      use = (*gold)[static_cast<std::size_t>(segment)];
    out.sequence.row(t) = embedding_rows.row(use);
    out.replaced_positions.push_back(t);
  }
  return out;
}

/// Inserts audio-like noise into a text sequence. After each of the L tokens
/// one noise element is inserted with probability 1 - p: the blank embedding
/// or a copy of the token just emitted, chosen evenly.
inline MixOutcome noise_mt_sequence(const Matrix& emb_seq, double p, const Eigen::RowVectorXd& blank_embedding, Rng& rng) {
  if (emb_seq.rows() < 1) throw EmptyInputError("noise_mt_sequence: empty sequence");
  if (blank_embedding.size() != emb_seq.cols()) throw ShapeError("noise_mt_sequence: blank embedding width differs");
  if (p < 0.0 || p > 1.0) throw ConfigError("noise_mt_sequence: p outside [0,1]");
  std::vector<Eigen::RowVectorXd> rows;
  MixOutcome out;
  out.label = p;
  out.branch = MixBranch::kMtNoise;
  for (Index i = 0; i < emb_seq.rows(); ++i) {
    rows.push_back(emb_seq.row(i));
    if (rng.bernoulli(1.0 - p)) {
      out.inserted_positions.push_back(static_cast<Index>(rows.size()));
      rows.push_back(rng.bernoulli(0.5) ? blank_embedding : Eigen::RowVectorXd(emb_seq.row(i)));
    }
  }
  out.sequence.resize(static_cast<Index>(rows.size()), emb_seq.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.sequence.row(static_cast<Index>(r)) = rows[r];
  out.mask.assign(rows.size(), true);
  return out;
}

}  // namespace salign
