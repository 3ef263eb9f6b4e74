#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>

#include "tslformer/error.hpp"
#include "tslformer/model.hpp"

using namespace tslformer;
using ad::Tensor;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_dim = 6;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_layers = 2;
  c.ffn_dim = 16;
  c.num_classes = 3;
  c.max_seq_len = 5;
  return c;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::Io;
}

ClipTensor random_clip(std::size_t n_data, std::size_t F, std::size_t t_data, Rng& rng) {
  std::vector<std::vector<float>> frames(n_data, std::vector<float>(F));
  for (auto& f : frames) {
    for (auto& v : f) v = static_cast<float>(rng.uniform());
  }
  return build_clip_tensor(frames, F, t_data);
}

}  // namespace

TEST(Config, DefaultsAndValidation) {
  ModelConfig c;
  EXPECT_EQ(c.input_dim, 144);
  EXPECT_EQ(c.hidden_dim, 512);
  EXPECT_EQ(c.num_heads, 4);
  EXPECT_EQ(c.num_layers, 2);
  EXPECT_EQ(c.ffn_dim, 2048);
  EXPECT_DOUBLE_EQ(c.dropout_p, 0.2);
  EXPECT_EQ(c.num_classes, 226);
  EXPECT_EQ(c.max_seq_len, 17);
  EXPECT_NO_THROW(c.validate());
  c.num_heads = 3;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::BadConfig);
}

TEST(Init, DeterministicGlorotAndUnitGains) {
  ModelConfig c;
  auto a = init_params<float>(c, 7);
  auto b = init_params<float>(c, 7);
  auto na = a.named();
  auto nb = b.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    ASSERT_EQ(na[i].first, nb[i].first);
    auto va = na[i].second.values();
    auto vb = nb[i].second.values();
    for (std::size_t j = 0; j < va.size(); ++j) {
      ASSERT_EQ(std::bit_cast<std::uint32_t>(va[j]), std::bit_cast<std::uint32_t>(vb[j]));
    }
  }

  const double bound = std::sqrt(6.0 / (144 + 512));
  EXPECT_NEAR(bound, 0.09563, 1e-5);
  double largest = 0;
  for (float v : a.embed_weight.values()) largest = std::max(largest, std::abs(static_cast<double>(v)));
  EXPECT_LE(largest, bound);
  EXPECT_GT(largest, 0.9 * bound);  // actually spread over the range

  for (auto& [name, t] : na) {
    if (name.ends_with(".gain")) {
      for (float v : t.values()) ASSERT_EQ(v, 1.0f) << name;
    }
    if (name.ends_with(".bias")) {
      for (float v : t.values()) ASSERT_EQ(v, 0.0f) << name;
    }
  }
}

TEST(Init, ParameterCountMatchesShapes) {
  ModelConfig c;
  auto p = init_params<float>(c, 1);
  std::size_t expected = 0;
  for (auto& [name, shape] : parameter_shapes(c)) expected += ad::numel(shape);
  EXPECT_EQ(p.parameter_count(), expected);
  // embed + 2 layers + final norm + classifier, counted by hand
  const std::size_t layer = 4 * (512 * 512 + 512) + (512 * 2048 + 2048) + (2048 * 512 + 512) + 4 * 512;
  EXPECT_EQ(expected, (144 * 512 + 512) + 2 * layer + 2 * 512 + (512 * 226 + 226));
}

TEST(PositionalEncoding, KnownValues) {
  auto pe = positional_encoding(17, 512);
  ASSERT_EQ(pe.size(), 17u * 512);
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(pe[2 * i], 0.0);
    EXPECT_EQ(pe[2 * i + 1], 1.0);
  }
  EXPECT_NEAR(pe[512], std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe[512], 0.84147098, 1e-8);
  // PE(pos, 2i+1) = cos(pos / 10000^(2i/d))
  EXPECT_NEAR(pe[3 * 512 + 5], std::cos(3.0 / std::pow(10000.0, 4.0 / 512)), 1e-12);
  for (double v : pe) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(code_of([] { positional_encoding(4, 7); }), ErrorCode::OddDimension);
}

TEST(Attention, SingleFrameAttendsToItself) {
  auto c = tiny();
  auto p = init_params<double>(c, 3);
  Rng rng(4);
  std::vector<double> xv(8);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto x = Tensor<double>::constant({1, 1, 8}, xv);
  std::vector<std::uint8_t> mask = {1};
  Tensor<double> weights;
  auto out = multi_head_attention(x, mask, p.layers[0], 2, &weights);
  for (double w : weights.values()) EXPECT_DOUBLE_EQ(w, 1.0);
  // Output projection of the value vector.
  const auto& L = p.layers[0];
  std::vector<double> value(8), expected(8);
  for (std::size_t j = 0; j < 8; ++j) {
    value[j] = L.value_bias.values()[j];
    for (std::size_t i = 0; i < 8; ++i) value[j] += xv[i] * L.value_weight.values()[i * 8 + j];
  }
  for (std::size_t j = 0; j < 8; ++j) {
    expected[j] = L.output_bias.values()[j];
    for (std::size_t i = 0; i < 8; ++i) expected[j] += value[i] * L.output_weight.values()[i * 8 + j];
  }
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.values()[j], expected[j], 1e-12);
}

TEST(Attention, IdenticalFramesSplitEvenlyAndMaskedColumnsAreZero) {
  auto c = tiny();
  auto p = init_params<double>(c, 5);
  std::vector<double> row = {0.1, -0.3, 0.2, 0.7, -0.5, 0.4, 0.0, 0.9};
  std::vector<double> twice(row);
  twice.insert(twice.end(), row.begin(), row.end());
  std::vector<std::uint8_t> both = {1, 1};
  Tensor<double> w;
  multi_head_attention(Tensor<double>::constant({1, 2, 8}, twice), both, p.layers[0], 2, &w);
  for (double v : w.values()) EXPECT_NEAR(v, 0.5, 1e-15);

  Rng rng(6);
  std::vector<double> three(24);
  for (auto& v : three) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> mask = {1, 1, 0};
  multi_head_attention(Tensor<double>::constant({1, 3, 8}, three), mask, p.layers[0], 2, &w);
  ASSERT_EQ(w.shape(), (ad::Shape{2, 3, 3}));
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t q = 0; q < 3; ++q) {
      const double* r = w.values().data() + (h * 3 + q) * 3;
      EXPECT_EQ(r[2], 0.0);
      EXPECT_NEAR(r[0] + r[1], 1.0, 1e-12);
    }
  }
}

TEST(EncoderLayer, ZeroWeightsReduceToDoubleLayerNorm) {
  auto c = tiny();
  auto p = init_params<double>(c, 8);
  auto& L = p.layers[0];
  for (auto* t : {&L.query_weight, &L.key_weight, &L.value_weight, &L.output_weight, &L.ffn_in_weight,
                  &L.ffn_out_weight}) {
    for (auto& v : t->mutable_values()) v = 0;
  }
  Rng rng(9);
  std::vector<double> xv(2 * 3 * 8);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto x = Tensor<double>::constant({2, 3, 8}, xv);
  std::vector<std::uint8_t> mask(6, 1);
  auto out = encoder_layer(x, mask, L, c, Mode::Eval, rng);
  ASSERT_EQ(out.shape(), x.shape());

  auto ln = [&](std::vector<double> v) {
    for (std::size_t r = 0; r < 6; ++r) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < 8; ++j) mean += v[r * 8 + j];
      mean /= 8;
      for (std::size_t j = 0; j < 8; ++j) var += std::pow(v[r * 8 + j] - mean, 2);
      var /= 8;
      for (std::size_t j = 0; j < 8; ++j) v[r * 8 + j] = (v[r * 8 + j] - mean) / std::sqrt(var + c.layer_norm_eps);
    }
    return v;
  };
  auto expected = ln(ln(xv));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.values()[i], expected[i], 1e-9);
}

TEST(EncoderLayer, GradientOfOutputSum) {
  auto c = tiny();
  auto p = init_params<double>(c, 10);
  Rng jitter(11);
  for (auto& [name, t] : p.named()) {
    for (auto& v : t.mutable_values()) v += 0.1 * jitter.normal();
  }
  Rng rng(12);
  std::vector<double> xv(2 * 4 * 8);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto x = Tensor<double>::constant({2, 4, 8}, xv);
  std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 1, 0, 0};
  auto weights = Tensor<double>::constant({2, 4, 8}, [&] {
    std::vector<double> w(64);
    for (auto& v : w) v = rng.uniform(-1, 1);
    return w;
  }());
  auto loss_of = [&] {
    Rng unused(0);
    return ad::sum(ad::mul(encoder_layer(x, mask, p.layers[0], c, Mode::Eval, unused), weights));
  };
  auto grads = ad::backward(loss_of());
  double worst = 0;
  for (auto& [name, t] : p.named()) {
    if (!name.starts_with("layers.0.")) continue;
    auto analytic = grads.of(t);
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + 1e-5;
      const double up = loss_of().item();
      values[i] = orig - 1e-5;
      const double down = loss_of().item();
      values[i] = orig;
      const double fd = (up - down) / 2e-5;
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6}));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Forward, ShapeDeterminismAndErrors) {
  ModelConfig c;
  auto p = init_params<float>(c, 13);
  Rng rng(14);
  std::vector<ClipTensor> clips = {random_clip(16, 144, 16, rng), random_clip(5, 144, 16, rng)};
  auto batch = make_batch<float>(std::span<const ClipTensor>(clips));
  Rng r1(0), r2(0);
  auto a = forward(batch, p, c, Mode::Eval, r1);
  auto b = forward(batch, p, c, Mode::Eval, r2);
  EXPECT_EQ(a.shape(), (ad::Shape{2, 226}));
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(std::bit_cast<std::uint32_t>(a.values()[i]), std::bit_cast<std::uint32_t>(b.values()[i]));
  }

  auto narrow = Tensor<float>::constant({1, 17, 143}, std::vector<float>(17 * 143));
  std::vector<std::uint8_t> mask(17, 1);
  EXPECT_EQ(code_of([&] { forward(narrow, mask, p, c, Mode::Eval, r1); }), ErrorCode::ShapeMismatch);

  auto clip = random_clip(17, 144, 18, rng);  // 17 DATA + EOS exceeds 17
  EXPECT_EQ(code_of([&] { clip_logits(clip, p, c); }), ErrorCode::SequenceTooLong);
}

TEST(Forward, PadExtensionLeavesLogitsUnchanged) {
  ModelConfig c;
  auto p = init_params<float>(c, 15);
  Rng rng(16);
  for (std::size_t n : {1u, 5u, 16u}) {
    auto clip = random_clip(n, 144, 16, rng);
    auto base = clip_logits(clip, p, c);
    auto longer = clip_logits(clip.padded(4), p, c);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], longer[i], 1e-5);
  }
}

TEST(Forward, ReversingFramesChangesLogits) {
  ModelConfig c;
  auto p = init_params<float>(c, 17);
  Rng rng(18);
  std::vector<std::vector<float>> frames(16, std::vector<float>(144));
  for (auto& f : frames) {
    for (auto& v : f) v = static_cast<float>(rng.uniform());
  }
  auto forward_order = clip_logits(build_clip_tensor(frames, 144, 16), p, c);
  std::reverse(frames.begin(), frames.end());
  auto reversed = clip_logits(build_clip_tensor(frames, 144, 16), p, c);
  double diff = 0;
  for (std::size_t i = 0; i < reversed.size(); ++i) diff = std::max(diff, double(std::abs(reversed[i] - forward_order[i])));
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, TrainModeDropoutDependsOnSeed) {
  auto c = tiny();
  auto p = init_params<float>(c, 19);
  Rng rng(20);
  std::vector<ClipTensor> clips = {random_clip(4, 6, 4, rng)};
  auto batch = make_batch<float>(std::span<const ClipTensor>(clips));
  Rng a(1), b(1), d(2);
  auto x = forward(batch, p, c, Mode::Train, a);
  auto y = forward(batch, p, c, Mode::Train, b);
  auto z = forward(batch, p, c, Mode::Train, d);
  EXPECT_EQ(std::vector<float>(x.values().begin(), x.values().end()),
            std::vector<float>(y.values().begin(), y.values().end()));
  EXPECT_NE(std::vector<float>(x.values().begin(), x.values().end()),
            std::vector<float>(z.values().begin(), z.values().end()));
}

TEST(Batch, PadsToLongestAndCarriesLabels) {
  Rng rng(21);
  std::vector<ClipTensor> clips = {random_clip(3, 6, 4, rng), random_clip(3, 6, 4, rng).padded(2)};
  clips[0].label_index = 1;
  clips[1].label_index = 2;
  auto batch = make_batch<double>(std::span<const ClipTensor>(clips));
  EXPECT_EQ(batch.features.shape(), (ad::Shape{2, 7, 6}));
  EXPECT_EQ(batch.mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0}));
  EXPECT_EQ(batch.labels, (std::vector<int>{1, 2}));
}

TEST(TopK, TieBreakAndKnownProbability) {
  std::vector<float> uniform(4, 0.0f);
  auto one = predict_topk(uniform, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].index, 0);
  EXPECT_NEAR(one[0].probability, 0.25, 1e-12);

  std::vector<float> peaked = {0, 10, 0};
  auto two = predict_topk(peaked, 2);
  EXPECT_EQ(two[0].index, 1);
  const double expected = std::exp(10.0) / (std::exp(10.0) + 2);
  EXPECT_NEAR(two[0].probability, expected, 1e-9);
  EXPECT_NEAR(two[0].probability, 0.9999092, 1e-7);
  EXPECT_EQ(two[1].index, 0);

  Rng rng(22);
  std::vector<float> logits(10);
  for (auto& v : logits) v = static_cast<float>(rng.normal());
  auto all = predict_topk(logits, 10);
  double total = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    total += all[i].probability;
    if (i) EXPECT_LE(all[i].probability, all[i - 1].probability);
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_EQ(argmax(logits), all[0].index);
  EXPECT_EQ(code_of([&] { predict_topk(logits, 0); }), ErrorCode::BadK);
  EXPECT_EQ(code_of([&] { predict_topk(logits, 11); }), ErrorCode::BadK);
}

TEST(Params, CastAndRebuildFromNames) {
  auto c = tiny();
  auto p = init_params<float>(c, 23);
  auto d = p.cast<double>();
  auto named = p.named();
  std::vector<std::pair<std::string, std::vector<float>>> raw;
  for (auto& [name, t] : named) raw.emplace_back(name, std::vector<float>(t.values().begin(), t.values().end()));
  auto rebuilt = params_from_named<float>(c, raw);
  auto rn = rebuilt.named();
  auto dn = d.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    EXPECT_EQ(rn[i].first, named[i].first);
    for (std::size_t j = 0; j < named[i].second.size(); ++j) {
      EXPECT_EQ(rn[i].second.values()[j], named[i].second.values()[j]);
      EXPECT_EQ(static_cast<float>(dn[i].second.values()[j]), named[i].second.values()[j]);
    }
  }
  auto copy = p.clone();
  copy.embed_weight.mutable_values()[0] += 1.0f;
  EXPECT_NE(copy.embed_weight.values()[0], p.embed_weight.values()[0]);
}
