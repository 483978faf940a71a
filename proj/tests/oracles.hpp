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

// Reference implementations written independently of the library code:
// brute-force CTC, a string-keyed BLEU scorer, a collapse oracle, simple
// statistical tests, and an SVD-based PCA.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace oracle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// B: merge repeats, then drop blanks (id 0).
inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int s : path) {
    if (s != prev && s != 0) out.push_back(s);
    prev = s;
  }
  return out;
}

/// Calls f(path) for every sequence of length T over symbols [0, V).
template <typename F>
void for_each_path(int T, int V, F&& f) {
  std::vector<int> path(static_cast<std::size_t>(T), 0);
  while (true) {
    f(path);
    int i = T - 1;
    while (i >= 0 && path[static_cast<std::size_t>(i)] == V - 1) path[static_cast<std::size_t>(i--)] = 0;
    if (i < 0) return;
    ++path[static_cast<std::size_t>(i)];
  }
}

/// P(target) by summing exp(sum of log-probs) over every path that collapses to it.
inline double ctc_bruteforce_prob(const Mat& log_probs, const std::vector<int>& target) {
  const int T = static_cast<int>(log_probs.rows());
  const int V = static_cast<int>(log_probs.cols());
  double total = 0.0;
  for_each_path(T, V, [&](const std::vector<int>& path) {
    if (collapse(path) != target) return;
    double lp = 0.0;
    for (int t = 0; t < T; ++t) lp += log_probs(t, path[static_cast<std::size_t>(t)]);
    total += std::exp(lp);
  });
  return total;
}

/// Every label sequence of length 0..max_len over symbols [1, V).
inline std::vector<std::vector<int>> all_labelings(int V, int max_len) {
  std::vector<std::vector<int>> out{{}};
  for (int len = 1; len <= max_len; ++len) {
    if (V < 2) break;
    std::vector<int> seq(static_cast<std::size_t>(len), 1);
    while (true) {
      out.push_back(seq);
      int i = len - 1;
      while (i >= 0 && seq[static_cast<std::size_t>(i)] == V - 1) seq[static_cast<std::size_t>(i--)] = 1;
      if (i < 0) break;
      ++seq[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// BLEU, keyed on space-joined n-gram strings.

inline std::map<std::string, int> ngrams(const std::vector<std::string>& words, std::size_t n) {
  std::map<std::string, int> out;
  if (words.size() < n) return out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) key += (k ? " " : "") + words[i + k];
    ++out[key];
  }
  return out;
}

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> w;
  std::string x;
  while (in >> x) w.push_back(x);
  return w;
}

/// Corpus BLEU as computed by sacreBLEU's default settings (4-gram, "exp"
/// smoothing, closest-length brevity penalty for a single reference).
inline double reference_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  long correct[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  long sys_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = words(hyps[i]);
    const auto r = words(refs[i]);
    sys_len += static_cast<long>(h.size());
    ref_len += static_cast<long>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hc = ngrams(h, n);
      const auto rc = ngrams(r, n);
      for (const auto& [g, c] : hc) {
        total[n - 1] += c;
        const auto it = rc.find(g);
        if (it != rc.end()) correct[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (correct[0] + correct[1] + correct[2] + correct[3] == 0) return 0.0;
  double precisions[4] = {0, 0, 0, 0};
  double smooth = 1.0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0) break;
    if (correct[n] == 0) {
      smooth *= 2.0;
      precisions[n] = 100.0 / (smooth * static_cast<double>(total[n]));
    } else {
      precisions[n] = 100.0 * static_cast<double>(correct[n]) / static_cast<double>(total[n]);
    }
  }
  double log_sum = 0.0;
  for (double p : precisions) log_sum += p > 0.0 ? std::log(p) : -9999999999.0;
  const double bp = sys_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(std::max(sys_len, 1L))) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

// ---------------------------------------------------------------------------
// Statistics

/// Kolmogorov-Smirnov statistic of a sample against U(0,1).
inline double ks_uniform_statistic(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = std::clamp(xs[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Large-sample KS critical value at alpha = 0.01.
inline double ks_critical_001(std::size_t n) { return 1.6276 / std::sqrt(static_cast<double>(n)); }

/// Normal-approximation 99% interval for a binomial proportion.
inline bool within_binomial_99(double observed_fraction, double p, std::size_t n) {
  const double half = 2.5758 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  return std::abs(observed_fraction - p) <= half;
}

// ---------------------------------------------------------------------------
// PCA via SVD of the centred data.

struct Pca {
  Mat points;
  Mat components;  // dims x d
  std::vector<double> variances;
};

inline Pca pca_svd(const Mat& x, int dims) {
  Eigen::RowVectorXd mean = x.colwise().mean();
  Mat c = x.rowwise() - mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(c), Eigen::ComputeThinV);
  Pca out;
  out.components.resize(dims, x.cols());
  for (int k = 0; k < dims; ++k) {
    Eigen::VectorXd v = svd.matrixV().col(k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.row(k) = v.transpose();
    const double s = svd.singularValues()(k);
    out.variances.push_back(s * s / static_cast<double>(x.rows() - 1));
  }
  out.points = c * out.components.transpose();
  return out;
}

}  // namespace oracle
