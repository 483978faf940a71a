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

// Adam with an inverse-square-root learning-rate schedule.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "salign/autograd.hpp"
#include "salign/error.hpp"

namespace salign {

/// Linear warmup to `peak`, then decay proportional to 1/sqrt(step).
/// Steps are 1-based.
inline double inverse_sqrt_lr(int step, double peak, int warmup) {
  if (step < 1) step = 1;
  if (warmup < 1) return peak / std::sqrt(static_cast<double>(step));
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

class Adam {
 public:
  using Filter = std::function<bool(const Parameter&)>;

  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// One update of every parameter accepted by `filter` (all when empty),
  /// using its accumulated gradient. Returns the pre-clip gradient norm of
  /// the updated set.
  double step(std::vector<Parameter>& params, double lr, const Filter& filter = {}) {
    if (state_.size() != params.size()) {
      state_.assign(params.size(), {});
    }
    double sq = 0.0;
    for (const auto& p : params)
      if (!filter || filter(p)) sq += p.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DivergenceError("optimizer: non-finite gradient norm");
    const double clip = opts_.clip_norm > 0.0 && norm > opts_.clip_norm ? opts_.clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = params[i];
      if (filter && !filter(p)) continue;
      State& s = state_[i];
      if (s.m.size() == 0) {
        s.m = Matrix::Zero(p.value.rows(), p.value.cols());
        s.v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      ++s.t;
      const Matrix g = p.grad * clip;
      s.m = opts_.beta1 * s.m + (1.0 - opts_.beta1) * g;
      s.v = opts_.beta2 * s.v + (1.0 - opts_.beta2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(opts_.beta1, s.t);
      const double c2 = 1.0 - std::pow(opts_.beta2, s.t);
      p.value.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + opts_.eps);
    }
    return norm;
  }

  const AdamOptions& options() const { return opts_; }

 private:
  struct State {
    Matrix m, v;
    int t = 0;
  };
  AdamOptions opts_;
  std::vector<State> state_;
};

}  // namespace salign
