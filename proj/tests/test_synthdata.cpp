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

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include "salign/synthdata.hpp"
#include "test_util.hpp"

namespace salign {
namespace {

SynthSpec spec_with_seed(std::uint64_t seed) {
  SynthSpec s;
  s.seed = seed;
  return s;
}

TEST(Generate, DeterministicUnderSeed) {
  const auto a = generate_corpus(spec_with_seed(7), 100);
  const auto b = generate_corpus(spec_with_seed(7), 100);
  EXPECT_EQ(a, b);
  const auto c = generate_corpus(spec_with_seed(8), 100);
  EXPECT_FALSE(a == c);
}

TEST(Generate, IndexRangesAreSlicesOfOneStream) {
  const auto spec = spec_with_seed(3);
  const auto all = generate_corpus(spec, 12);
  const auto tail = generate_corpus(spec, 5, 7);
  for (std::size_t i = 0; i < tail.size(); ++i) EXPECT_EQ(tail[i], all[7 + i]);
}

TEST(Generate, IdentityTranslation) {
  SynthSpec s = spec_with_seed(4);
  s.translation.kind = TranslationKind::kIdentity;
  for (const auto& t : generate_corpus(s, 50)) EXPECT_EQ(t.tgt_tokens, t.src_tokens);
}

TEST(Generate, PermuteTranslationRule) {
  const SynthSpec s = spec_with_seed(5);
  const auto map = make_word_map(s);
  std::vector<int> sorted(map.begin() + kFirstContentToken, map.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], static_cast<int>(i) + kFirstContentToken);
  for (const auto& t : generate_corpus(s, 50)) {
    const std::size_t L = t.src_tokens.size();
    ASSERT_EQ(t.tgt_tokens.size(), L);
    for (std::size_t i = 0; i < L; ++i)
      EXPECT_EQ(t.tgt_tokens[i], map[static_cast<std::size_t>(t.src_tokens[(i + 1) % L])]);
  }
}

TEST(Generate, TripleInvariants) {
  const SynthSpec s = spec_with_seed(6);
  for (const auto& t : generate_corpus(s, 200)) {
    EXPECT_GE(t.frames.rows(), static_cast<Index>(t.src_tokens.size()));
    EXPECT_TRUE(t.frames.allFinite());
    EXPECT_EQ(t.frames.cols(), s.d_feat);
    for (int x : t.src_tokens) EXPECT_TRUE(x >= kFirstContentToken && x < s.vocab_size);
    for (int x : t.tgt_tokens) EXPECT_TRUE(x >= kFirstContentToken && x < s.vocab_size);
  }
}

TEST(Generate, LengthRatioMatchesExpectation) {
  SynthSpec s = spec_with_seed(9);
  s.min_frames_per_token = 2;
  s.max_frames_per_token = 4;
  s.blank_insert_rate = 0.2;
  s.d_feat = 2;
  double ratio = 0.0;
  const auto corpus = generate_corpus(s, 10000);
  for (const auto& t : corpus) ratio += static_cast<double>(t.frames.rows()) / static_cast<double>(t.src_tokens.size());
  ratio /= static_cast<double>(corpus.size());
  EXPECT_GE(ratio, 3.4);
  EXPECT_LE(ratio, 3.8);
}

TEST(Generate, DefaultGapProperty) {
  std::vector<double> ratios;
  for (const auto& t : generate_corpus(spec_with_seed(10), 500))
    ratios.push_back(static_cast<double>(t.frames.rows()) / static_cast<double>(t.src_tokens.size()));
  std::nth_element(ratios.begin(), ratios.begin() + 250, ratios.end());
  EXPECT_GT(ratios[250], 3.0);
}

TEST(Generate, InvalidSpec) {
  SynthSpec s;
  s.vocab_size = 4;
  EXPECT_THROW(generate_corpus(s, 1), ConfigError);
  s = SynthSpec{};
  s.min_len = 5;
  s.max_len = 3;
  EXPECT_THROW(generate_corpus(s, 1), ConfigError);
  EXPECT_THROW(generate_corpus(SynthSpec{}, 0), ConfigError);
}

// ---------------------------------------------------------------------------
// Rendering

TEST(Render, DegenerateRenderingIsThePrototypes) {
  SynthSpec s = spec_with_seed(11);
  s.noise_std = 0.0;
  s.blank_insert_rate = 0.0;
  s.min_frames_per_token = s.max_frames_per_token = 1;
  const Matrix protos = make_prototypes(s);
  Rng rng(1);
  const Tokens src{4, 9, 4, 30};
  const Matrix f = render_speech(src, s, protos, rng);
  ASSERT_EQ(f.rows(), 4);
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(f.row(i), protos.row(src[static_cast<std::size_t>(i)]));
}

TEST(Render, FixedRepeatCount) {
  SynthSpec s = spec_with_seed(12);
  s.noise_std = 0.0;
  s.blank_insert_rate = 0.0;
  s.min_frames_per_token = s.max_frames_per_token = 3;
  const Matrix protos = make_prototypes(s);
  Rng rng(2);
  const Tokens src{5, 6, 7};
  const Matrix f = render_speech(src, s, protos, rng);
  ASSERT_EQ(f.rows(), 9);
  for (Index i = 0; i < 9; ++i) EXPECT_EQ(f.row(i), protos.row(src[static_cast<std::size_t>(i / 3)]));
}

TEST(Render, BlankFramesAreZeroPrototype) {
  SynthSpec s = spec_with_seed(13);
  s.noise_std = 0.0;
  s.blank_insert_rate = 1.0;
  s.min_frames_per_token = s.max_frames_per_token = 2;
  const Matrix protos = make_prototypes(s);
  Rng rng(3);
  const Matrix f = render_speech(Tokens{5, 6}, s, protos, rng);
  ASSERT_EQ(f.rows(), 8);
  EXPECT_EQ(f.row(0).norm(), 0.0);
  EXPECT_EQ(f.row(1).norm(), 0.0);
  EXPECT_EQ(f.row(2), protos.row(5));
}

TEST(Render, NearestPrototypeRecoversFrames) {
  // Re-render with the corpus RNG stream and classify every frame.
  const SynthSpec s = spec_with_seed(14);
  const Matrix protos = make_prototypes(s);
  std::size_t correct = 0, total = 0;
  for (const auto& t : generate_corpus(s, 200)) {
    for (Index r = 0; r < t.frames.rows(); ++r) {
      Index best = 0;
      double best_d = 1e300;
      for (Index k = 0; k < protos.rows(); ++k) {
        if (k != kBlankId && k < kFirstContentToken) continue;
        const double d = (t.frames.row(r) - protos.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      if (best == kBlankId) continue;
      ++total;
      correct += std::find(t.src_tokens.begin(), t.src_tokens.end(), static_cast<int>(best)) != t.src_tokens.end();
    }
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.95);
}

TEST(Render, RejectsReservedTokens) {
  const SynthSpec s;
  const Matrix protos = make_prototypes(s);
  Rng rng(1);
  EXPECT_THROW(render_speech(Tokens{kBlankId}, s, protos, rng), ConfigError);
}

// ---------------------------------------------------------------------------
// Manifests

TEST(Manifest, RoundTrip) {
  const auto dir = testing::scratch_dir("manifest_rt");
  const auto corpus = generate_corpus(spec_with_seed(15), 20);
  const Vocabulary vocab = Vocabulary::synthetic(40);
  vocab.save(dir / "vocab.txt");
  write_manifest(dir / "train", corpus, vocab);
  const Vocabulary loaded_vocab = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(loaded_vocab.size(), 40);
  const auto loaded = load_manifest(dir / "train" / "manifest.tsv", loaded_vocab);
  ASSERT_EQ(loaded.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_EQ(loaded[i], corpus[i]);
}

TEST(Manifest, VocabularyReservedIds) {
  const Vocabulary v = Vocabulary::synthetic(8);
  EXPECT_EQ(v.find("<blank>").value_or(-1), kBlankId);
  EXPECT_EQ(v.find("<pad>").value_or(-1), kPadId);
  EXPECT_EQ(v.find("<bos>").value_or(-1), kBosId);
  EXPECT_EQ(v.find("<eos>").value_or(-1), kEosId);
}

TEST(Manifest, EmptyManifestIsEmptyDataset) {
  const auto dir = testing::scratch_dir("manifest_empty");
  std::ofstream(dir / "manifest.tsv") << kManifestHeader << "\n";
  EXPECT_TRUE(load_manifest(dir / "manifest.tsv", Vocabulary::synthetic(10)).empty());
}

TEST(Manifest, FrameCountMismatchNamesTheRow) {
  const auto dir = testing::scratch_dir("manifest_bad");
  const Vocabulary vocab = Vocabulary::synthetic(40);
  write_manifest(dir, generate_corpus(spec_with_seed(16), 2), vocab);
  std::ifstream in(dir / "manifest.tsv");
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  auto fields = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : s) {
      if (c == '\t') f.push_back(cur), cur.clear();
      else cur += c;
    }
    f.push_back(cur);
    return f;
  };
  auto f = fields(row2);
  f[2] = std::to_string(std::stoi(f[2]) + 1);
  std::ofstream(dir / "manifest.tsv") << header << "\n" << row1 << "\n" << f[0] << "\t" << f[1] << "\t" << f[2] << "\t"
                                      << f[3] << "\t" << f[4] << "\n";
  try {
    load_manifest(dir / "manifest.tsv", vocab);
    FAIL() << "expected an ingestion error";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, MalformedInputs) {
  const auto dir = testing::scratch_dir("manifest_malformed");
  const Vocabulary vocab = Vocabulary::synthetic(10);
  EXPECT_THROW(load_manifest(dir / "nope.tsv", vocab), IngestionError);
  std::ofstream(dir / "a.tsv") << "wrong header\n";
  EXPECT_THROW(load_manifest(dir / "a.tsv", vocab), IngestionError);
  std::ofstream(dir / "b.tsv") << kManifestHeader << "\nonly\ttwo\n";
  EXPECT_THROW(load_manifest(dir / "b.tsv", vocab), IngestionError);
  write_frames(dir / "f.bin", Matrix::Zero(3, 2));
  std::ofstream(dir / "c.tsv") << kManifestHeader << "\nu1\tf.bin\t3\tw4 zzz\tw4\n";
  EXPECT_THROW(load_manifest(dir / "c.tsv", vocab), IngestionError);
  std::ofstream(dir / "d.tsv") << kManifestHeader << "\nu1\tf.bin\t3\tw4\tw4\nu1\tf.bin\t3\tw4\tw4\n";
  EXPECT_THROW(load_manifest(dir / "d.tsv", vocab), IngestionError);
}

// ---------------------------------------------------------------------------
// Batching

TEST(Batching, SingleExample) {
  const auto corpus = generate_corpus(spec_with_seed(17), 1);
  const auto batches = make_batches(corpus, 1000, 1);
  ASSERT_EQ(batches.size(), 1u);
  for (bool m : batches[0].frame_masks[0]) EXPECT_TRUE(m);
  for (bool m : batches[0].src_masks[0]) EXPECT_TRUE(m);
}

TEST(Batching, PartitionAndBudget) {
  const auto corpus = generate_corpus(spec_with_seed(18), 300);
  const std::size_t budget = 400;
  const auto batches = make_batches(corpus, budget, 3);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_LE(b.padded_frames(), budget);
    for (std::size_t i = 0; i < b.size(); ++i) {
      seen.push_back(b.indices[i]);
      const auto& t = corpus[b.indices[i]];
      EXPECT_EQ(count_valid(b.frame_masks[i]), static_cast<std::size_t>(t.frames.rows()));
      EXPECT_EQ(b.frames[i].topRows(t.frames.rows()), t.frames);
      EXPECT_EQ(count_valid(b.src_masks[i]), t.src_tokens.size());
      EXPECT_EQ(count_valid(b.tgt_masks[i]), t.tgt_tokens.size());
    }
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(seen, all);
}

TEST(Batching, DeterministicGivenSeed) {
  const auto corpus = generate_corpus(spec_with_seed(19), 100);
  const auto a = make_batches(corpus, 300, 5), b = make_batches(corpus, 300, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].indices, b[i].indices);
}

TEST(Batching, OversizedExample) {
  const auto corpus = generate_corpus(spec_with_seed(20), 10);
  EXPECT_THROW(make_batches(corpus, 5, 1), ConfigError);
  EXPECT_THROW(make_text_batches(corpus, 2, 1), ConfigError);
}

}  // namespace
}  // namespace salign
