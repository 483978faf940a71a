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

// Checkpoint container.
//
// Layout (all integers little-endian):
//   8 bytes   magic "SALIGNCK"
//   u32       format version (1)
//   u64       config fingerprint (FNV-1a of ModelConfig::canonical())
//   u32 + N   canonical model config string
//   u32       parameter count
//   per parameter, in ModelParams order:
//     u32 + N name, u32 rows, u32 cols, rows*cols float32 row-major

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "salign/error.hpp"
#include "salign/network.hpp"

namespace salign {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'L', 'I', 'G', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IngestionError("checkpoint truncated while reading " + what);
  return v;
}
inline std::string get_string(std::istream& in, const std::string& what) {
  auto n = get<std::uint32_t>(in, what);
  if (n > (1u << 20)) throw IngestionError("checkpoint: implausible string length for " + what);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw IngestionError("checkpoint truncated while reading " + what);
  return s;
}
}  // namespace detail

/// Parses ModelConfig::canonical() back into a config (dropout stays default).
inline ModelConfig parse_model_canonical(const std::string& canonical) {
  ModelConfig cfg;
  std::istringstream ss(canonical);
  std::string item;
  while (std::getline(ss, item, ';')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw IngestionError("checkpoint: malformed config entry '" + item + "'");
    const std::string k = item.substr(0, eq);
    const int v = std::stoi(item.substr(eq + 1));
    if (k == "vocab") cfg.vocab_size = v;
    else if (k == "d") cfg.d_model = v;
    else if (k == "feat") cfg.d_feat = v;
    else if (k == "heads") cfg.heads = v;
    else if (k == "ffn") cfg.ffn_dim = v;
    else if (k == "aenc") cfg.aenc_layers = v;
    else if (k == "tenc") cfg.tenc_layers = v;
    else if (k == "dec") cfg.dec_layers = v;
    else if (k == "sub") cfg.subsample_layers = v;
    else if (k == "disc_h") cfg.disc_hidden = v;
    else if (k == "disc_l") cfg.disc_layers = v;
    else if (k == "proj") cfg.input_projection = v != 0;
    else throw IngestionError("checkpoint: unknown config key '" + k + "'");
  }
  return cfg;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, params.config().fingerprint());
  detail::put_string(out, params.config().canonical());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.list().size()));
  for (const auto& p : params.list()) {
    detail::put_string(out, p.name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    std::vector<float> buf(static_cast<std::size_t>(p.value.size()));
    for (Index i = 0; i < p.value.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IngestionError("failed writing checkpoint " + path.string());
}

/// Loads a checkpoint. With `expected`, a fingerprint mismatch is rejected.
inline ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw IngestionError("not a checkpoint file: " + path.string());
  if (detail::get<std::uint32_t>(in, "version") != kCheckpointVersion) throw IngestionError("unsupported checkpoint version");
  const auto fp = detail::get<std::uint64_t>(in, "fingerprint");
  const std::string canonical = detail::get_string(in, "config");
  ModelConfig cfg = parse_model_canonical(canonical);
  if (cfg.fingerprint() != fp) throw IngestionError("checkpoint: stored config does not match its fingerprint");
  if (expected != nullptr) {
    if (expected->fingerprint() != fp)
      throw IncompatibleError("checkpoint " + path.string() + " was built for '" + canonical + "', expected '" +
                              expected->canonical() + "'");
    cfg.dropout = expected->dropout;
  }
  ModelParams reference(cfg, 0);
  ModelParams params;
  params.set_config(cfg);
  const auto n = detail::get<std::uint32_t>(in, "parameter count");
  if (n != reference.list().size()) throw IngestionError("checkpoint: parameter count differs from its config");
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = detail::get_string(in, "parameter name");
    const auto rows = detail::get<std::uint32_t>(in, name);
    const auto cols = detail::get<std::uint32_t>(in, name);
    const auto& ref = reference.list()[i];
    if (ref.name != name || ref.value.rows() != rows || ref.value.cols() != cols)
      throw IngestionError("checkpoint: parameter " + std::to_string(i) + " ('" + name + "') does not match the layout");
    std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw IngestionError("checkpoint truncated in '" + name + "'");
    Matrix m(rows, cols);
    for (std::size_t j = 0; j < buf.size(); ++j) m.data()[j] = buf[j];
    params.push(std::move(name), std::move(m));
  }
  return params;
}

/// A parameter snapshot with its validation metric (lower is better).
struct Snapshot {
  int step = 0;
  double metric = 0.0;
  ModelParams params;
};

/// Parameter-wise mean of the k snapshots with the lowest metric (ties go to
/// the earlier step).
inline ModelParams average_checkpoints(const std::vector<Snapshot>& snapshots, std::size_t k) {
  if (k == 0 || k > snapshots.size()) throw ConfigError("average_checkpoints: need 1 <= k <= number of checkpoints");
  const auto fp = snapshots.front().params.config().fingerprint();
  for (const auto& s : snapshots)
    if (s.params.config().fingerprint() != fp) throw IncompatibleError("average_checkpoints: config fingerprints differ");
  std::vector<std::size_t> order(snapshots.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (snapshots[a].metric != snapshots[b].metric) return snapshots[a].metric < snapshots[b].metric;
    return snapshots[a].step < snapshots[b].step;
  });
  // Running mean: exact for identical inputs and for symmetric pairs.
  ModelParams avg = snapshots[order[0]].params;
  for (std::size_t j = 1; j < k; ++j) {
    const auto& other = snapshots[order[j]].params.list();
    const double inv = 1.0 / static_cast<double>(j + 1);
    for (std::size_t i = 0; i < avg.list().size(); ++i)
      avg.list()[i].value += (other[i].value - avg.list()[i].value) * inv;
  }
  for (auto& p : avg.list()) p.zero_grad();
  return avg;
}

}  // namespace salign
