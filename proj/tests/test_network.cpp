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

#include <cmath>
#include <limits>

#include "salign/checkpoint.hpp"
#include "salign/network.hpp"
#include "salign/objectives.hpp"
#include "test_util.hpp"

namespace salign {
namespace {

using testing::check_input_gradients;
using testing::check_param_gradients;
using testing::random_matrix;
using testing::tiny_config;

std::vector<std::string> names_with_prefix(const ModelParams& p, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& x : p.list())
    if (x.name.rfind(prefix, 0) == 0) out.push_back(x.name);
  return out;
}

Matrix acoustic_value(ModelParams& params, const Matrix& frames, const Mask& mask) {
  ag::NoGradGuard ng;
  Binding w(params);
  return acoustic_encode(frames, mask, w).reps.value();
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t expected_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model), f = static_cast<std::size_t>(c.ffn_dim);
  const std::size_t V = static_cast<std::size_t>(c.vocab_size), H = static_cast<std::size_t>(c.disc_hidden);
  const std::size_t lin_dd = d * d + d, norm = 2 * d, ffn = (d * f + f) + (f * d + d);
  const std::size_t enc_layer = 2 * norm + 4 * lin_dd + ffn;
  const std::size_t dec_layer = 3 * norm + 8 * lin_dd + ffn;
  std::size_t n = V * d;
  std::size_t c_in = static_cast<std::size_t>(c.d_feat);
  if (c.input_projection) n += c_in * d + d, c_in = d;
  for (int i = 0; i < c.subsample_layers; ++i) n += 3 * c_in * d + d, c_in = d;
  n += static_cast<std::size_t>(c.aenc_layers) * enc_layer + norm;
  n += d * V + V;
  n += static_cast<std::size_t>(c.tenc_layers) * enc_layer + norm;
  n += static_cast<std::size_t>(c.dec_layers) * dec_layer + norm;
  n += d * H + H + static_cast<std::size_t>(c.disc_layers - 1) * (H * H + H) + H + 1;
  return n;
}

TEST(Params, CountIsAFunctionOfConfig) {
  const ModelConfig toy;
  EXPECT_EQ(ModelParams(toy, 1).count(), expected_count(toy));
  EXPECT_EQ(ModelParams(tiny_config(), 1).count(), expected_count(tiny_config()));
  ModelConfig wide = toy;
  wide.d_model = 512;
  wide.heads = 8;
  wide.ffn_dim = 2048;
  wide.aenc_layers = wide.tenc_layers = wide.dec_layers = 6;
  wide.disc_hidden = 512;
  wide.input_projection = true;
  EXPECT_EQ(ModelParams(wide, 1).count(), expected_count(wide));
  EXPECT_EQ(ModelParams(toy, 1).count(), ModelParams(toy, 99).count());
}

TEST(Params, DiscriminatorShape) {
  ModelParams p(ModelConfig{}, 1);
  EXPECT_EQ(p.at("disc.out.weight").value.cols(), 1);
  EXPECT_EQ(names_with_prefix(p, "disc.fc").size(), 6u);  // three hidden layers
  EXPECT_TRUE(p.all_finite());
}

TEST(Params, GroupsCoverEveryParameter) {
  ModelParams p(tiny_config(), 1);
  for (const auto& x : p.list()) EXPECT_NO_THROW(group_of(x.name)) << x.name;
  EXPECT_THROW(group_of("mystery.weight"), ConfigError);
}

TEST(Params, DeterministicInit) {
  ModelParams a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_EQ(a.at("embed.weight").value, b.at("embed.weight").value);
  EXPECT_NE(a.at("embed.weight").value, c.at("embed.weight").value);
}

TEST(Params, InvalidConfig) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(ModelParams(c, 1), ConfigError);
  c = tiny_config();
  c.vocab_size = 4;
  EXPECT_THROW(ModelParams(c, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Acoustic encoder

TEST(AcousticEncoder, SubsamplesByFour) {
  ModelParams p(tiny_config(), 1);
  Rng rng(1);
  EXPECT_EQ(acoustic_value(p, random_matrix(8, 6, rng), Mask(8, true)).rows(), 2);
  EXPECT_EQ(acoustic_value(p, random_matrix(9, 6, rng), Mask(9, true)).rows(), 3);
  EXPECT_EQ(acoustic_value(p, random_matrix(1, 6, rng), Mask(1, true)).rows(), 1);
}

TEST(AcousticEncoder, PaddingInvariant) {
  ModelParams p(tiny_config(), 2);
  Rng rng(2);
  const Matrix frames = random_matrix(13, 6, rng);
  const Matrix base = acoustic_value(p, frames, Mask(13, true));
  Matrix padded = Matrix::Zero(18, 6);
  padded.topRows(13) = frames;
  Mask m(18, false);
  std::fill(m.begin(), m.begin() + 13, true);
  const Matrix out = acoustic_value(p, padded, m);
  EXPECT_EQ(out.topRows(base.rows()), base);
}

TEST(AcousticEncoder, NaNPaddingNeverRead) {
  ModelParams p(tiny_config(), 3);
  Rng rng(3);
  const Matrix frames = random_matrix(10, 6, rng);
  const Matrix base = acoustic_value(p, frames, Mask(10, true));
  Matrix poisoned = Matrix::Constant(16, 6, std::numeric_limits<double>::quiet_NaN());
  poisoned.topRows(10) = frames;
  Mask m(16, false);
  std::fill(m.begin(), m.begin() + 10, true);
  const Matrix out = acoustic_value(p, poisoned, m);
  EXPECT_EQ(out.topRows(base.rows()), base);
  EXPECT_TRUE(out.allFinite());
}

TEST(AcousticEncoder, EmptyInput) {
  ModelParams p(tiny_config(), 1);
  Binding w(p);
  EXPECT_THROW(acoustic_encode(Matrix(0, 6), Mask{}, w), EmptyInputError);
  EXPECT_THROW(acoustic_encode(Matrix::Zero(4, 6), Mask(4, false), w), EmptyInputError);
  EXPECT_THROW(acoustic_encode(Matrix::Zero(4, 5), Mask(4, true), w), ShapeError);
}

TEST(AcousticEncoder, DropoutOnlyInTraining) {
  ModelParams p(tiny_config(), 4);
  Rng data(4);
  const Matrix frames = random_matrix(12, 6, data);
  ag::NoGradGuard ng;
  Binding w(p);
  const Matrix e1 = acoustic_encode(frames, Mask(12, true), w).reps.value();
  const Matrix e2 = acoustic_encode(frames, Mask(12, true), w).reps.value();
  EXPECT_EQ(e1, e2);
  Rng r1(7), r2(7);
  const Matrix t1 = acoustic_encode(frames, Mask(12, true), w, {true, &r1}).reps.value();
  const Matrix t2 = acoustic_encode(frames, Mask(12, true), w, {true, &r2}).reps.value();
  EXPECT_EQ(t1, t2);
  EXPECT_NE(t1, e1);
}

TEST(AcousticEncoder, GradientWrtFrames) {
  ModelParams p(tiny_config(), 5);
  Rng rng(5);
  const Matrix probe = random_matrix(3, 8, rng);
  Mask m(11, true);
  m[9] = m[10] = false;
  const double err = check_input_gradients({random_matrix(11, 6, rng)}, [&](const std::vector<ag::Var>& x) {
    Binding w(p);
    return ag::sum(ag::mul(acoustic_encode(x[0], m, w).reps, ag::constant(probe)));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(AcousticEncoder, GradientWrtParameters) {
  ModelParams p(tiny_config(), 6);
  Rng rng(6);
  const Matrix frames = random_matrix(10, 6, rng);
  const Matrix probe = random_matrix(3, 8, rng);
  const double err = check_param_gradients(p, names_with_prefix(p, "aenc."), [&](Binding& w) {
    return ag::sum(ag::mul(acoustic_encode(frames, Mask(10, true), w).reps, ag::constant(probe)));
  });
  EXPECT_LT(err, 1e-4);
}

TEST(AcousticEncoder, CtcHeadGradient) {
  ModelParams p(tiny_config(), 7);
  Rng rng(7);
  const Matrix frames = random_matrix(10, 6, rng);
  const std::vector<int> target{4, 5};
  const double err = check_param_gradients(p, {"ctc.weight", "ctc.bias", "aenc.ln.gain"}, [&](Binding& w) {
    auto a = acoustic_encode(frames, Mask(10, true), w);
    return ctc_loss(ctc_log_probs(a, w), target, 3);
  });
  EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// Textual encoder

TEST(TextualEncoder, MtPathLengthIsTokenCount) {
  ModelParams p(tiny_config(), 1);
  Binding w(p);
  const Tokens src{4, 5, 6, 7, 8};
  EXPECT_EQ(textual_encode(embed_text(src, Mask(5, true), w), w).reps.rows(), 5);
}

TEST(TextualEncoder, OneInstanceServesBothPaths) {
  ModelParams p(tiny_config(), 2);
  Rng rng(2);
  const Matrix frames = random_matrix(12, 6, rng);
  const Tokens src{4, 5, 6};
  auto tenc_grad_norm = [&](bool speech, bool text) {
    p.zero_grad();
    Binding w(p);
    std::vector<std::pair<ag::Var, double>> terms;
    if (speech) terms.emplace_back(ag::sum(textual_encode(acoustic_encode(frames, Mask(12, true), w), w).reps), 1.0);
    if (text) terms.emplace_back(ag::sum(textual_encode(embed_text(src, Mask(3, true), w), w).reps), 1.0);
    ag::backward(ag::weighted_sum(terms));
    return p.at("tenc.layers.0.ffn.fc1.weight").grad;
  };
  const Matrix gs = tenc_grad_norm(true, false), gt = tenc_grad_norm(false, true), both = tenc_grad_norm(true, true);
  EXPECT_GT(gs.norm(), 0.0);
  EXPECT_GT(gt.norm(), 0.0);
  EXPECT_LT((both - gs - gt).norm(), 1e-12 * (1.0 + both.norm()));
}

TEST(TextualEncoder, PaddingInvariantAndShapeChecked) {
  ModelParams p(tiny_config(), 3);
  ag::NoGradGuard ng;
  Binding w(p);
  const Tokens src{4, 5, 6}, padded{4, 5, 6, kPadId, kPadId};
  const Matrix a = textual_encode(embed_text(src, Mask(3, true), w), w).reps.value();
  const Matrix b = textual_encode(embed_text(padded, Mask{true, true, true, false, false}, w), w).reps.value();
  EXPECT_EQ(b.topRows(3), a);
  EXPECT_EQ(b.bottomRows(2), Matrix::Zero(2, 8));
  EXPECT_THROW(textual_encode({ag::constant(Matrix::Zero(3, 5)), Mask(3, true)}, w), ShapeError);
}

TEST(TextualEncoder, GradientWrtInputAndParameters) {
  ModelParams p(tiny_config(), 4);
  Rng rng(4);
  const Matrix probe = random_matrix(5, 8, rng);
  const Mask m{true, true, true, true, false};
  EXPECT_LT(check_input_gradients({random_matrix(5, 8, rng)},
                                  [&](const std::vector<ag::Var>& x) {
                                    Binding w(p);
                                    return ag::sum(ag::mul(textual_encode({x[0], m}, w).reps, ag::constant(probe)));
                                  }),
            1e-4);
  const Tokens src{4, 9, 6, 7};
  EXPECT_LT(check_param_gradients(p, names_with_prefix(p, "tenc."),
                                  [&](Binding& w) {
                                    auto t = textual_encode(embed_text(src, Mask(4, true), w), w);
                                    return ag::sum(ag::mul(t.reps, ag::constant(probe.topRows(4))));
                                  }),
            1e-4);
}

// ---------------------------------------------------------------------------
// Decoder

TEST(Decoder, Causal) {
  ModelParams p(tiny_config(), 5);
  Rng rng(5);
  ag::NoGradGuard ng;
  Binding w(p);
  const EncoderOutput enc{ag::constant(random_matrix(4, 8, rng)), Mask(4, true)};
  const Tokens prev{kBosId, 4, 5, 6, 7};
  const Matrix base = decoder_forward(enc, prev, w).value();
  for (std::size_t j = 1; j < prev.size(); ++j) {
    Tokens changed = prev;
    changed[j] = 9;
    const Matrix out = decoder_forward(enc, changed, w).value();
    EXPECT_EQ(out.topRows(static_cast<Index>(j)), base.topRows(static_cast<Index>(j)));
    EXPECT_NE(out.row(static_cast<Index>(j)), base.row(static_cast<Index>(j)));
  }
}

TEST(Decoder, DependsOnEncoderOutput) {
  ModelParams p(tiny_config(), 6);
  Rng rng(6);
  ag::NoGradGuard ng;
  Binding w(p);
  const Tokens prev{kBosId, 4};
  const Matrix a = decoder_forward({ag::constant(random_matrix(3, 8, rng)), Mask(3, true)}, prev, w).value();
  const Matrix b = decoder_forward({ag::constant(random_matrix(3, 8, rng)), Mask(3, true)}, prev, w).value();
  EXPECT_GT((a - b).norm(), 1e-6);
  EXPECT_EQ(a.cols(), 10);
}

TEST(Decoder, MaskedMemoryIgnored) {
  ModelParams p(tiny_config(), 7);
  Rng rng(7);
  ag::NoGradGuard ng;
  Binding w(p);
  const Matrix mem = random_matrix(3, 8, rng);
  Matrix poisoned = Matrix::Constant(5, 8, std::numeric_limits<double>::quiet_NaN());
  poisoned.topRows(3) = mem;
  const Tokens prev{kBosId, 4, 5};
  const Matrix a = decoder_forward({ag::constant(mem), Mask(3, true)}, prev, w).value();
  const Matrix b = decoder_forward({ag::constant(poisoned), Mask{true, true, true, false, false}}, prev, w).value();
  EXPECT_EQ(a, b);
}

TEST(Decoder, Errors) {
  ModelParams p(tiny_config(), 1);
  Binding w(p);
  const EncoderOutput enc{ag::constant(Matrix::Zero(2, 8)), Mask(2, true)};
  EXPECT_THROW(decoder_forward(enc, Tokens{}, w), ShapeError);
  EXPECT_THROW(decoder_forward({ag::constant(Matrix::Zero(2, 8)), Mask(2, false)}, Tokens{kBosId}, w), EmptyInputError);
}

TEST(Decoder, GradientOnTwoTokenInstance) {
  ModelParams p(tiny_config(), 8);
  Rng rng(8);
  const Matrix probe = random_matrix(2, 10, rng);
  const Tokens prev{kBosId, 4};
  EXPECT_LT(check_input_gradients({random_matrix(3, 8, rng)},
                                  [&](const std::vector<ag::Var>& x) {
                                    Binding w(p);
                                    return ag::sum(ag::mul(decoder_forward({x[0], Mask(3, true)}, prev, w), ag::constant(probe)));
                                  }),
            1e-4);
  const Matrix mem = random_matrix(3, 8, rng);
  auto names = names_with_prefix(p, "dec.");
  names.push_back("embed.weight");
  EXPECT_LT(check_param_gradients(p, names,
                                  [&](Binding& w) {
                                    return ag::sum(ag::mul(decoder_forward({ag::constant(mem), Mask(3, true)}, prev, w),
                                                           ag::constant(probe)));
                                  }),
            1e-4);
}

TEST(Decoder, OutputProjectionTiedToEmbedding) {
  ModelParams p(tiny_config(), 9);
  EXPECT_FALSE(p.has("dec.out.weight"));
  Rng rng(9);
  const Matrix mem = random_matrix(3, 8, rng);
  const Tokens prev{kBosId};
  ag::NoGradGuard ng;
  Matrix before;
  {
    Binding w(p);
    before = decoder_forward({ag::constant(mem), Mask(3, true)}, prev, w).value();
  }
  p.at("embed.weight").value.row(7) *= 2.0;
  Binding w(p);
  const Matrix after = decoder_forward({ag::constant(mem), Mask(3, true)}, prev, w).value();
  EXPECT_NE(before(0, 7), after(0, 7));
}

// ---------------------------------------------------------------------------
// Discriminator

TEST(Discriminator, ZeroParametersGiveOneHalf) {
  ModelParams p(tiny_config(), 1);
  for (auto& x : p.list())
    if (is_discriminator(x.name)) x.value.setZero();
  Binding w(p);
  Rng rng(1);
  EXPECT_EQ(discriminate({ag::constant(random_matrix(4, 8, rng)), Mask(4, true)}, w).item(), 0.5);
}

TEST(Discriminator, MaskedRowsIgnored) {
  ModelParams p(tiny_config(), 2);
  Rng rng(2);
  Binding w(p);
  const Matrix h = random_matrix(3, 8, rng);
  Matrix longer = Matrix::Constant(6, 8, std::numeric_limits<double>::quiet_NaN());
  longer.topRows(3) = h;
  const double a = discriminate({ag::constant(h), Mask(3, true)}, w).item();
  const double b = discriminate({ag::constant(longer), Mask{true, true, true, false, false, false}}, w).item();
  EXPECT_EQ(a, b);
  EXPECT_GT(a, 0.0);
  EXPECT_LT(a, 1.0);
  EXPECT_THROW(discriminate({ag::constant(h), Mask(3, false)}, w), EmptyInputError);
}

TEST(Discriminator, HandComputedOneLayer) {
  ModelConfig c = tiny_config();
  c.d_model = 2;
  c.heads = 1;
  c.disc_hidden = 1;
  c.disc_layers = 1;
  ModelParams p(c, 1);
  p.at("disc.fc0.weight").value << 0.5, -1.0;
  p.at("disc.fc0.bias").value << 0.25;
  p.at("disc.out.weight").value << 2.0;
  p.at("disc.out.bias").value << -0.5;
  Matrix h(2, 2);
  h << 1.0, 2.0, 3.0, -2.0;  // mean (2, 0)
  const double z = 0.5 * 2.0 - 1.0 * 0.0 + 0.25;
  const double g = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
  const double expected = 1.0 / (1.0 + std::exp(-(2.0 * g - 0.5)));
  Binding w(p);
  EXPECT_NEAR(discriminate({ag::constant(h), Mask(2, true)}, w).item(), expected, 1e-12);
}

TEST(Discriminator, Gradients) {
  ModelParams p(tiny_config(), 3);
  Rng rng(3);
  EXPECT_LT(check_input_gradients({random_matrix(4, 8, rng)},
                                  [&](const std::vector<ag::Var>& x) {
                                    Binding w(p);
                                    return ag::sum(discriminate_pooled(x[0], w));
                                  }),
            1e-4);
  const Matrix pooled = random_matrix(4, 8, rng);
  EXPECT_LT(check_param_gradients(p, names_with_prefix(p, "disc."),
                                  [&](Binding& w) { return ag::sum(discriminate_pooled(ag::constant(pooled), w)); }),
            1e-4);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsFloat32) {
  ModelParams p(tiny_config(), 4);
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", p);
  const ModelConfig cfg = tiny_config();
  ModelParams q = load_checkpoint(dir / "a.ckpt", &cfg);
  ASSERT_EQ(q.list().size(), p.list().size());
  for (std::size_t i = 0; i < p.list().size(); ++i) {
    EXPECT_EQ(q.list()[i].name, p.list()[i].name);
    EXPECT_EQ(q.list()[i].value, p.list()[i].value.cast<float>().cast<double>());
  }
  save_checkpoint(dir / "b.ckpt", q);
  EXPECT_EQ(load_checkpoint(dir / "b.ckpt").list()[0].value, q.list()[0].value);
}

TEST(Checkpoint, RejectsOtherConfigs) {
  ModelParams p(tiny_config(), 4);
  const auto dir = testing::scratch_dir("ckpt_bad");
  save_checkpoint(dir / "a.ckpt", p);
  ModelConfig other = tiny_config();
  other.ffn_dim = 32;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", &other), IncompatibleError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IngestionError);
}

}  // namespace
}  // namespace salign
