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

// Training objectives: CTC for recognition, teacher-forced cross entropy for
// translation, binary cross entropy for the modality discriminator and the
// two generators, symmetric InfoNCE for hard alignment, and the weighted
// total. Each loss has a differentiable graph form and a plain-value form.
//
// Reductions: CTC and CE are summed over time within a sequence; callers
// average over the batch. BCE terms are averaged over their batch rows.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/synthdata.hpp"

namespace salign {

using ag::Var;

inline constexpr double kProbEpsilon = 1e-7;
inline constexpr double kSpeechLabel = 0.0;   // c_st
inline constexpr double kTextLabel = 1.0;     // c_mt
inline constexpr double kUnifiedLabel = 0.5;  // c_u, midway between the two

// ---------------------------------------------------------------------------
// CTC

namespace detail {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Blank-augmented label sequence: blank, x1, blank, x2, ..., xL, blank.
inline std::vector<int> extend_with_blanks(std::span<const int> target) {
  std::vector<int> ext(2 * target.size() + 1, kBlankId);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

inline bool can_skip(const std::vector<int>& ext, std::size_t s) {
  return s >= 2 && ext[s] != kBlankId && ext[s] != ext[s - 2];
}
}  // namespace detail

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
inline int ctc_min_frames(std::span<const int> target) {
  int need = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i) need += target[i] == target[i - 1] ? 1 : 0;
  return need;
}

inline void check_ctc_inputs(const Matrix& log_probs, std::span<const int> target, int input_len) {
  if (input_len < 1 || input_len > log_probs.rows()) throw ShapeError("ctc: input_len outside [1, T]");
  for (int t : target) {
    if (t == kBlankId) throw InfeasibleError("ctc: target contains the blank id");
    if (t < 0 || t >= log_probs.cols()) throw ShapeError("ctc: target id outside the vocabulary");
  }
  if (ctc_min_frames(target) > input_len)
    throw InfeasibleError("ctc: target of length " + std::to_string(target.size()) + " needs " +
                          std::to_string(ctc_min_frames(target)) + " frames, got " + std::to_string(input_len));
}

/// Forward variables log alpha [input_len x (2L+1)].
inline Matrix ctc_alpha(const Matrix& lp, const std::vector<int>& ext, int input_len) {
  const auto S = static_cast<Index>(ext.size());
  Matrix a = Matrix::Constant(input_len, S, detail::kNegInf);
  a(0, 0) = lp(0, ext[0]);
  if (S > 1) a(0, 1) = lp(0, ext[1]);
  for (Index t = 1; t < input_len; ++t) {
    for (Index s = 0; s < S; ++s) {
      double v = a(t - 1, s);
      if (s >= 1) v = detail::log_add(v, a(t - 1, s - 1));
      if (detail::can_skip(ext, static_cast<std::size_t>(s))) v = detail::log_add(v, a(t - 1, s - 2));
      a(t, s) = v == detail::kNegInf ? v : v + lp(t, ext[static_cast<std::size_t>(s)]);
    }
  }
  return a;
}

/// -log P_CTC(target | frames) from per-frame log-distributions, using the
/// first `input_len` rows.
inline double ctc_neg_log_likelihood(const Matrix& log_probs, std::span<const int> target, int input_len) {
  check_ctc_inputs(log_probs, target, input_len);
  const auto ext = detail::extend_with_blanks(target);
  const Matrix a = ctc_alpha(log_probs, ext, input_len);
  const Index S = static_cast<Index>(ext.size());
  double lp = a(input_len - 1, S - 1);
  if (S > 1) lp = detail::log_add(lp, a(input_len - 1, S - 2));
  return -lp;
}

/// Differentiable CTC loss. The gradient with respect to each log-probability
/// entry is minus the posterior occupancy of that (frame, label) pair.
inline Var ctc_loss(const Var& log_probs, std::span<const int> target, int input_len) {
  const Matrix& lp = log_probs.value();
  check_ctc_inputs(lp, target, input_len);
  const auto ext = detail::extend_with_blanks(target);
  const Index S = static_cast<Index>(ext.size());
  const Matrix a = ctc_alpha(lp, ext, input_len);
  double log_p = a(input_len - 1, S - 1);
  if (S > 1) log_p = detail::log_add(log_p, a(input_len - 1, S - 2));
  return ag::make_op(Matrix::Constant(1, 1, -log_p), {log_probs}, [a, ext, input_len, log_p](ag::Node& n) {
    const Matrix& lp = n.parent(0).value;
    const Index S = static_cast<Index>(ext.size());
    // beta excludes the emission at its own frame.
    Matrix b = Matrix::Constant(input_len, S, detail::kNegInf);
    b(input_len - 1, S - 1) = 0.0;
    if (S > 1) b(input_len - 1, S - 2) = 0.0;
    for (Index t = input_len - 2; t >= 0; --t) {
      for (Index s = 0; s < S; ++s) {
        double v = b(t + 1, s) + lp(t + 1, ext[static_cast<std::size_t>(s)]);
        if (s + 1 < S) v = detail::log_add(v, b(t + 1, s + 1) + lp(t + 1, ext[static_cast<std::size_t>(s + 1)]));
        if (s + 2 < S && detail::can_skip(ext, static_cast<std::size_t>(s + 2)))
          v = detail::log_add(v, b(t + 1, s + 2) + lp(t + 1, ext[static_cast<std::size_t>(s + 2)]));
        b(t, s) = v;
      }
    }
    Matrix g = Matrix::Zero(lp.rows(), lp.cols());
    const double up = n.grad(0, 0);
    for (Index t = 0; t < input_len; ++t) {
      for (Index s = 0; s < S; ++s) {
        double occ = a(t, s) + b(t, s) - log_p;
        if (occ == detail::kNegInf) continue;
        g(t, ext[static_cast<std::size_t>(s)]) -= up * std::exp(occ);
      }
    }
    n.parent(0).accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Cross entropy

struct CeResult {
  Var loss;              // 1x1, summed over unmasked positions
  bool all_pad = false;  // true when no position was scored
};

/// Sum over unmasked positions of -log softmax(logits[i])[target[i]].
inline CeResult ce_loss(const Var& logits, std::span<const int> target, const Mask& pad_mask) {
  if (static_cast<Index>(target.size()) != logits.rows() || pad_mask.size() != target.size())
    throw ShapeError("ce_loss: logits, target, and mask lengths differ");
  const Matrix& z = logits.value();
  double total = 0.0;
  std::vector<Index> rows;
  for (Index i = 0; i < z.rows(); ++i) {
    if (!pad_mask[static_cast<std::size_t>(i)]) continue;
    const int y = target[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw ShapeError("ce_loss: target id outside the vocabulary");
    double m = z.row(i).maxCoeff();
    double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, y);
    rows.push_back(i);
  }
  std::vector<int> tgt(target.begin(), target.end());
  Var loss = ag::make_op(Matrix::Constant(1, 1, total), {logits}, [rows, tgt](ag::Node& n) {
    const Matrix& z = n.parent(0).value;
    Matrix g = Matrix::Zero(z.rows(), z.cols());
    for (Index i : rows) {
      double m = z.row(i).maxCoeff();
      Eigen::RowVectorXd p = (z.row(i).array() - m).exp();
      p /= p.sum();
      g.row(i) = p;
      g(i, tgt[static_cast<std::size_t>(i)]) -= 1.0;
    }
    n.parent(0).accumulate(g * n.grad(0, 0));
  });
  return {loss, rows.empty()};
}

// ---------------------------------------------------------------------------
// Binary cross entropy: discriminator and generators

inline double clamp_prob(double p, double eps = kProbEpsilon) { return std::clamp(p, eps, 1.0 - eps); }

/// -[t log d + (1-t) log(1-d)] with d clamped to [eps, 1-eps].
inline double bce(double d, double target, double eps = kProbEpsilon) {
  const double c = clamp_prob(d, eps);
  double v = 0.0;
  if (target > 0.0) v -= target * std::log(c);
  if (target < 1.0) v -= (1.0 - target) * std::log(1.0 - c);
  return v;
}

inline double binary_entropy(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return -(t * std::log(t) + (1.0 - t) * std::log(1.0 - t));
}

/// BCE(d_st, c_st) + BCE(d_mt, c_mt) = -log(1 - d_st) - log(d_mt).
inline double discriminator_loss(double d_st, double d_mt, double eps = kProbEpsilon) {
  return bce(d_st, kSpeechLabel, eps) + bce(d_mt, kTextLabel, eps);
}

/// Soft-target BCE pulling the discriminator output toward `target`
/// (c_u = 0.5 by default). Minimum value is the binary entropy of the target.
inline double generator_loss(double d, double target = kUnifiedLabel, double eps = kProbEpsilon) {
  return bce(d, target, eps);
}

/// Graph form: mean over the rows of d [B x 1] of the soft-target BCE.
inline Var bce_loss(const Var& d, double target, double eps = kProbEpsilon) {
  if (d.cols() != 1 || d.rows() < 1) throw ShapeError("bce_loss: expected a [B x 1] probability column");
  const double inv_b = 1.0 / static_cast<double>(d.rows());
  std::vector<std::pair<Var, double>> terms;
  if (target > 0.0) terms.emplace_back(ag::sum(ag::log_clamped(d, eps)), -target * inv_b);
  if (target < 1.0) terms.emplace_back(ag::sum(ag::log1m_clamped(d, eps)), -(1.0 - target) * inv_b);
  return ag::weighted_sum(terms);
}

inline Var discriminator_loss(const Var& d_st, const Var& d_mt, double eps = kProbEpsilon) {
  return ag::add(bce_loss(d_st, kSpeechLabel, eps), bce_loss(d_mt, kTextLabel, eps));
}

inline Var generator_loss(const Var& d, double target = kUnifiedLabel, double eps = kProbEpsilon) {
  return bce_loss(d, target, eps);
}

// ---------------------------------------------------------------------------
// Hard alignment

enum class AlignLevel { kLow, kHigh };

/// Symmetric InfoNCE over in-batch negatives with cosine similarity: the
/// average of the speech->text and text->speech directions, each the mean
/// over rows of -log softmax(sim / temperature)[i, i].
inline Var contrastive_loss(const Var& st_pool, const Var& mt_pool, double temperature) {
  if (st_pool.rows() != mt_pool.rows() || st_pool.cols() != mt_pool.cols())
    throw ShapeError("contrastive_loss: pooled batches differ in shape");
  if (st_pool.rows() < 2) throw ShapeError("contrastive_loss: degenerate batch, need at least 2 pairs");
  if (!(temperature > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");
  const Index B = st_pool.rows();
  Var sim = ag::scale(ag::matmul_nt(ag::normalize_rows(st_pool), ag::normalize_rows(mt_pool)), 1.0 / temperature);
  std::vector<std::pair<Index, Index>> diag;
  for (Index i = 0; i < B; ++i) diag.emplace_back(i, i);
  Var fwd = ag::pick_sum(ag::log_softmax_rows(sim), diag);
  Var bwd = ag::pick_sum(ag::log_softmax_rows(ag::transpose(sim)), diag);
  const double w = -0.5 / static_cast<double>(B);
  return ag::weighted_sum({{fwd, w}, {bwd, w}});
}

inline double contrastive_loss(const Matrix& st_pool, const Matrix& mt_pool, double temperature) {
  ag::NoGradGuard guard;
  return contrastive_loss(ag::constant(st_pool), ag::constant(mt_pool), temperature).item();
}

// ---------------------------------------------------------------------------
// Total objective

struct LossBreakdown {
  double asr = 0.0;
  double mt = 0.0;
  double st = 0.0;
  double disc = 0.0;
  double gen_st = 0.0;
  double gen_mt = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
};

struct LossWeights {
  double asr = 1.0;
  double mt = 0.5;
  double st = 1.0;
  double lambda = 3.5;  // adversarial weight
  double contrastive = 0.0;

  void validate() const {
    if (asr < 0 || mt < 0 || st < 0 || lambda < 0 || contrastive < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

/// w_asr L_asr + w_mt L_mt + w_st L_st + lambda (L_D + L_Gst + L_Gmt) + w_c L_c.
inline double total_loss(const LossBreakdown& p, const LossWeights& w) {
  return w.asr * p.asr + w.mt * p.mt + w.st * p.st + w.lambda * (p.disc + p.gen_st + p.gen_mt) +
         w.contrastive * p.contrastive;
}

}  // namespace salign
