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

// Modality-space diagnostics: joint PCA of pooled speech and text
// representations, discriminator accuracy, centroid distance, and loss-curve
// export. Nothing here modifies model parameters.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "salign/autograd.hpp"
#include "salign/error.hpp"
#include "salign/network.hpp"
#include "salign/trainer.hpp"

namespace salign {

struct PcaResult {
  Matrix points;                          // [N x dims]
  Matrix components;                      // [d x dims], unit columns
  Eigen::RowVectorXd mean;                // [1 x d]
  std::vector<double> variance_explained;  // eigenvalues of the 1/(N-1) covariance
  bool degenerate = false;                // fewer than `dims` nonzero directions
};

/// Projects centred rows onto the top `dims` principal directions. Each
/// direction's largest-magnitude loading is made positive (first such loading
/// on ties). Directions with zero variance are zero-filled and flagged.
inline PcaResult pca_project(const Matrix& reps, int dims = 2) {
  if (dims < 1) throw ConfigError("pca_project: dims must be positive");
  if (reps.rows() <= dims) throw ShapeError("pca_project: need more rows than dims");
  if (dims > reps.cols()) throw ShapeError("pca_project: dims exceeds the feature width");
  if (!reps.allFinite()) throw ShapeError("pca_project: non-finite input");
  PcaResult r;
  r.mean = reps.colwise().mean();
  const Matrix centred = reps.rowwise() - r.mean;
  const Matrix cov = (centred.transpose() * centred) / static_cast<double>(reps.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd vals = eig.eigenvalues();  // ascending
  const Eigen::MatrixXd vecs = eig.eigenvectors();
  const double top = std::max(vals(vals.size() - 1), 0.0);
  r.components = Matrix::Zero(reps.cols(), dims);
  for (int k = 0; k < dims; ++k) {
    const Index src = vals.size() - 1 - k;
    const double lambda = std::max(vals(src), 0.0);
    if (lambda <= top * 1e-12 || lambda == 0.0) {
      r.degenerate = true;
      r.variance_explained.push_back(0.0);
      continue;
    }
    Eigen::VectorXd v = vecs.col(src);
    Index arg = 0;
    for (Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0) v = -v;
    r.components.col(k) = v;
    r.variance_explained.push_back(lambda);
  }
  r.points = centred * r.components;
  return r;
}

enum class Modality { kSpeech, kText };

inline const char* modality_name(Modality m) { return m == Modality::kSpeech ? "speech" : "text"; }

struct ModalityReport {
  double centroid_distance = 0.0;
  double discriminator_accuracy = 0.0;
  std::vector<std::string> ids;
  std::vector<Modality> modality;
  Matrix points;  // [N x 2], speech rows first
  std::vector<double> variance_explained;
  bool degenerate = false;
};

/// Probability that a pooled row comes from the text modality.
using ModalityClassifier = std::function<double(const Eigen::RowVectorXd&)>;

/// Wraps the model's discriminator as a classifier.
inline ModalityClassifier discriminator_classifier(ModelParams& params) {
  return [&params](const Eigen::RowVectorXd& row) {
    ag::NoGradGuard ng;
    Binding w(params);
    return discriminate_pooled(ag::constant(Matrix(row)), w).item();
  };
}

/// Fraction classified correctly at threshold 0.5 (text iff p >= 0.5).
inline double classification_accuracy(const Matrix& st, const Matrix& mt, const ModalityClassifier& d) {
  std::size_t correct = 0;
  for (Index i = 0; i < st.rows(); ++i) correct += d(st.row(i)) < 0.5 ? 1 : 0;
  for (Index i = 0; i < mt.rows(); ++i) correct += d(mt.row(i)) >= 0.5 ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(st.rows() + mt.rows());
}

inline ModalityReport modality_report(const Matrix& st, const Matrix& mt, const ModalityClassifier& d,
                                      std::vector<std::string> st_ids = {}, std::vector<std::string> mt_ids = {}) {
  if (st.rows() == 0 || mt.rows() == 0) throw EmptyInputError("modality_report: both modalities need at least one row");
  if (st.cols() != mt.cols()) throw ShapeError("modality_report: modalities differ in width");
  ModalityReport r;
  r.centroid_distance = (st.colwise().mean() - mt.colwise().mean()).norm();
  r.discriminator_accuracy = classification_accuracy(st, mt, d);
  Matrix all(st.rows() + mt.rows(), st.cols());
  all << st, mt;
  const int dims = static_cast<int>(std::min<Index>(2, all.cols()));
  if (all.rows() > dims) {
    PcaResult p = pca_project(all, dims);
    r.points = Matrix::Zero(all.rows(), 2);
    r.points.leftCols(dims) = p.points;
    r.variance_explained = p.variance_explained;
    r.degenerate = p.degenerate;
  } else {
    r.points = Matrix::Zero(all.rows(), 2);
    r.variance_explained = {0.0, 0.0};
    r.degenerate = true;
  }
  for (Index i = 0; i < st.rows(); ++i) {
    r.ids.push_back(i < static_cast<Index>(st_ids.size()) ? st_ids[static_cast<std::size_t>(i)] : "st" + std::to_string(i));
    r.modality.push_back(Modality::kSpeech);
  }
  for (Index i = 0; i < mt.rows(); ++i) {
    r.ids.push_back(i < static_cast<Index>(mt_ids.size()) ? mt_ids[static_cast<std::size_t>(i)] : "mt" + std::to_string(i));
    r.modality.push_back(Modality::kText);
  }
  return r;
}

struct PooledSet {
  Matrix speech;  // pooled T-enc output of each utterance [N x d]
  Matrix text;    // pooled T-enc output of each transcription [N x d]
  std::vector<std::string> ids;
};

/// h_st and h_mt pooled exactly as the discriminator sees them (eval mode).
inline PooledSet pooled_representations(ModelParams& params, const std::vector<Triple>& data) {
  ag::NoGradGuard ng;
  Binding w(params);
  const int d = params.config().d_model;
  PooledSet out{Matrix(static_cast<Index>(data.size()), d), Matrix(static_cast<Index>(data.size()), d), {}};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    auto a = acoustic_encode(ex.frames, Mask(static_cast<std::size_t>(ex.frames.rows()), true), w);
    out.speech.row(static_cast<Index>(i)) = pool(textual_encode(a, w)).value();
    auto e = embed_text(ex.src_tokens, Mask(ex.src_tokens.size(), true), w);
    out.text.row(static_cast<Index>(i)) = pool(textual_encode(e, w)).value();
    out.ids.push_back(ex.id);
  }
  return out;
}

inline void write_scatter_csv(const ModalityReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "id,modality,pc1,pc2\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.ids.size(); ++i)
    out << r.ids[i] << ',' << modality_name(r.modality[i]) << ',' << r.points(static_cast<Index>(i), 0) << ','
        << r.points(static_cast<Index>(i), 1) << '\n';
}

// ---------------------------------------------------------------------------
// Curves

struct CurveRow {
  int step;
  double disc, gen, asr, mt, st, acc;
};

/// Per-step series; `gen` is L_Gst + L_Gmt.
inline std::vector<CurveRow> curve_rows(const TrainLog& log) {
  if (log.empty()) throw EmptyInputError("export_curves: empty log");
  std::vector<CurveRow> rows;
  for (const auto& r : log.records())
    rows.push_back({r.step, r.parts.disc, r.parts.gen_st + r.parts.gen_mt, r.parts.asr, r.parts.mt, r.parts.st, r.disc_acc});
  return rows;
}

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline std::string render_svg(const std::vector<CurveRow>& rows) {
  const double W = 640, H = 360, pad = 40;
  double lo = 1e300, hi = -1e300;
  for (const auto& r : rows)
    for (double v : {r.disc, r.gen}) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) hi = lo + 1.0;
  const double s0 = rows.front().step, s1 = std::max<double>(rows.back().step, s0 + 1);
  auto line = [&](auto get, const char* colour) {
    std::ostringstream p;
    p << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& r : rows) {
      const double x = pad + (r.step - s0) / (s1 - s0) * (W - 2 * pad);
      const double y = H - pad - (get(r) - lo) / (hi - lo) * (H - 2 * pad);
      p << std::setprecision(6) << x << ',' << y << ' ';
    }
    p << "\"/>\n";
    return p.str();
  };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << line([](const CurveRow& r) { return r.disc; }, "#1f77b4")
      << line([](const CurveRow& r) { return r.gen; }, "#d62728")
      << "<text x=\"" << pad << "\" y=\"20\" font-size=\"12\" fill=\"#1f77b4\">Discriminator</text>\n"
      << "<text x=\"" << pad + 110 << "\" y=\"20\" font-size=\"12\" fill=\"#d62728\">Generators</text>\n"
      << "</svg>\n";
  return svg.str();
}

/// Writes `step,disc,gen,asr,mt,st,acc` and, when `svg_path` is non-empty,
/// a discriminator/generators plot.
inline void export_curves(const TrainLog& log, const std::filesystem::path& out_path,
                          const std::filesystem::path& svg_path = {}) {
  const auto rows = curve_rows(log);
  std::ofstream out(out_path);
  if (!out) throw IngestionError("cannot write " + out_path.string());
  out << "step,disc,gen,asr,mt,st,acc\n";
  for (const auto& r : rows)
    out << r.step << ',' << format_number(r.disc) << ',' << format_number(r.gen) << ',' << format_number(r.asr) << ','
        << format_number(r.mt) << ',' << format_number(r.st) << ',' << format_number(r.acc) << '\n';
  if (!svg_path.empty()) {
    std::ofstream svg(svg_path);
    if (!svg) throw IngestionError("cannot write " + svg_path.string());
    svg << render_svg(rows);
  }
}

/// Ranks with ties sharing their average rank (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal series of length >= 2");
  return pearson(average_ranks(a), average_ranks(b));
}

/// Spearman correlation of the discriminator and generators series over
/// the fine-tuning records of `log`.
inline double disc_gen_spearman(const TrainLog& log) {
  std::vector<double> d, g;
  for (const auto& r : log.records()) {
    if (r.stage != "finetune") continue;
    d.push_back(r.parts.disc);
    g.push_back(r.parts.gen_st + r.parts.gen_mt);
  }
  return spearman(d, g);
}

}  // namespace salign
