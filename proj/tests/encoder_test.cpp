#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "countlab/encoder.hpp"
#include "oracles.hpp"

using namespace countlab;

namespace {

ModelDims small_dims(int vocab = 12) { return {vocab, 6, 7, 5, 8, 8}; }

Raster random_raster(Rng& rng, int h = 8, int w = 8) {
  Raster r{h, w, std::vector<double>(static_cast<std::size_t>(h * w), 0.0)};
  for (double& v : r.pixels) v = rng.bernoulli(0.3) ? rng.uniform01() : 0.0;
  return r;
}

double norm(const Embedding& e) {
  double s = 0.0;
  for (double x : e) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Vocabulary, UnknownIsZeroAndWordsSorted) {
  const Vocabulary v({"zebra", "apple", "apple", "mango"});
  EXPECT_EQ(v.size(), 4);
  EXPECT_EQ(v.word(0), "<unk>");
  EXPECT_EQ(v.word(1), "apple");
  EXPECT_EQ(v.lookup("mango"), 2);
  EXPECT_EQ(v.lookup("kiwi"), Vocabulary::kUnknown);
  EXPECT_EQ(v.encode("Apple, ZEBRA kiwi!"), (std::vector<int>{1, 3, 0}));
}

TEST(Vocabulary, DefaultCoversNumbersAndClasses) {
  const auto v = default_vocabulary();
  for (auto w : kNumberSpellings) EXPECT_NE(v.lookup(w), Vocabulary::kUnknown) << w;
  for (const auto& c : default_class_names()) EXPECT_NE(v.lookup(c.plural), Vocabulary::kUnknown) << c.plural;
}

TEST(InitParams, ScalesAndLogitScale) {
  const ModelDims d{20, 16, 32, 8, 32, 32};
  const Params p = init_params(d, 3);
  const ParamLayout L(d);
  EXPECT_EQ(p.values.size(), L.total);
  EXPECT_DOUBLE_EQ(p.logit_scale(), std::log(1.0 / 0.07));
  auto max_abs = [&](std::size_t a, std::size_t b) {
    double m = 0.0;
    for (std::size_t i = a; i < b; ++i) m = std::max(m, std::abs(p.values[i]));
    return m;
  };
  EXPECT_LE(max_abs(L.text_embedding, L.text_w1), 1.0);
  EXPECT_LE(max_abs(L.text_w1, L.text_b1), 1.0 / std::sqrt(16.0));
  EXPECT_LE(max_abs(L.image_w1, L.image_b1), 1.0 / std::sqrt(1024.0));
  EXPECT_GT(max_abs(L.image_w1, L.image_b1), 0.9 / std::sqrt(1024.0));
  EXPECT_EQ(max_abs(L.text_b1, L.text_w2), 0.0);
  EXPECT_EQ(max_abs(L.image_b2, L.logit_scale), 0.0);
  EXPECT_EQ(p, init_params(d, 3));
  EXPECT_THROW(init_params(ModelDims{0, 1, 1, 1, 1, 1}, 1), UsageError);
}

TEST(Encoders, UnitNormOutputs) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Params p = init_params(small_dims(), rng.next_u64());
    std::vector<int> tokens;
    for (int k = 0; k < 1 + static_cast<int>(rng.below(6)); ++k) tokens.push_back(static_cast<int>(rng.below(12)));
    EXPECT_NEAR(norm(encode_text(p, tokens)), 1.0, 1e-9);
    EXPECT_NEAR(norm(encode_image(p, random_raster(rng))), 1.0, 1e-9);
  }
}

TEST(Encoders, TextIsPermutationInvariant) {
  const Params p = init_params(small_dims(), 5);
  const std::vector<int> a = {1, 4, 4, 9, 2};
  std::vector<int> b = {9, 2, 4, 1, 4};
  const auto ea = encode_text(p, a);
  const auto eb = encode_text(p, b);
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_NEAR(ea[i], eb[i], 1e-15);
}

TEST(Encoders, NumberRowsDistinguishCaptions) {
  const Vocabulary vocab = default_vocabulary();
  const ModelDims d{vocab.size(), 8, 16, 8, 4, 4};
  Params p = init_params(d, 11);
  const auto five = encode_text(p, vocab.encode("a photo of five discs"));
  const auto six = encode_text(p, vocab.encode("a photo of six discs"));
  EXPECT_GT(std::abs(1.0 - similarity(five, six)), 1e-9);
  // Identical number rows make the captions indistinguishable.
  const ParamLayout L(d);
  const std::size_t r5 = L.text_embedding + static_cast<std::size_t>(vocab.lookup("five")) * 8;
  const std::size_t r6 = L.text_embedding + static_cast<std::size_t>(vocab.lookup("six")) * 8;
  std::copy_n(p.values.begin() + static_cast<std::ptrdiff_t>(r5), 8, p.values.begin() + static_cast<std::ptrdiff_t>(r6));
  EXPECT_EQ(encode_text(p, vocab.encode("a photo of five discs")), encode_text(p, vocab.encode("a photo of six discs")));
}

TEST(Encoders, ErrorsOnBadInput) {
  const Params p = init_params(small_dims(), 1);
  EXPECT_THROW(encode_text(p, std::vector<int>{}), UsageError);
  EXPECT_THROW(encode_text(p, std::vector<int>{99}), UsageError);
  EXPECT_THROW(encode_image(p, Raster{4, 4, std::vector<double>(16, 0.0)}), UsageError);
}

TEST(Encoders, ZeroRasterWithZeroBiasesHitsTheGuard) {
  const Params p = init_params(small_dims(), 1);
  const auto t = trace_image(p, Raster{8, 8, std::vector<double>(64, 0.0)});
  EXPECT_TRUE(t.degenerate);
  EXPECT_EQ(t.embedding[0], 1.0);
  EXPECT_NEAR(norm(t.embedding), 1.0, 1e-15);
}

TEST(Encoders, OneGlyphChangesTheEmbedding) {
  Rng rng(8);
  SceneConfig cfg;
  int distinct = 0;
  for (int t = 0; t < 100; ++t) {
    const Params p = init_params(ModelDims{4, 4, 16, 8, 32, 32}, rng.next_u64());
    SceneSpec s = sample_scene({0, 1, 2}, cfg, "g", rng.next_u64());
    const auto a = encode_image(p, render(s));
    s.placements.pop_back();
    const auto b = encode_image(p, render(s));
    if (a != b) ++distinct;
  }
  EXPECT_EQ(distinct, 100);
}

TEST(Similarity, BasicCases) {
  const std::vector<double> u = {0.6, 0.8, 0.0};
  const std::vector<double> neg = {-0.6, -0.8, 0.0};
  EXPECT_DOUBLE_EQ(similarity(u, u), 1.0);
  EXPECT_DOUBLE_EQ(similarity(u, neg), -1.0);
  EXPECT_EQ(similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(4);
  std::vector<double> theta(50);
  for (double& x : theta) x = 2.0 * rng.uniform01() - 1.0;
  const std::vector<double> grad = theta;
  auto loss = [](const std::vector<double>& t) {
    double s = 0.0;
    for (double x : t) s += 0.5 * x * x;
    return s;
  };
  const auto saved = theta;
  const auto r = grad_check(theta, grad, loss, 50, 1e-5, 1e-8, rng);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_EQ(theta, saved);
}

TEST(GradCheck, CorruptedCoordinateFails) {
  Rng rng(4);
  std::vector<double> theta(20);
  for (double& x : theta) x = 1.0 + rng.uniform01();
  std::vector<double> grad = theta;
  grad[7] *= 2.0;
  auto loss = [](const std::vector<double>& t) {
    double s = 0.0;
    for (double x : t) s += 0.5 * x * x;
    return s;
  };
  const auto r = grad_check(theta, grad, loss, 20, 1e-5, 1e-4, rng);
  EXPECT_FALSE(r.passed);
  int failing = 0;
  for (const auto& p : r.probes) {
    if (!p.passed) {
      ++failing;
      EXPECT_EQ(p.coordinate, 7u);
    }
  }
  EXPECT_EQ(failing, 1);
}

TEST(GradCheck, TowersMatchFiniteDifferences) {
  // Loss = c . text_embedding + d . image_embedding for fixed c, d.
  Rng rng(17);
  const ModelDims d = small_dims();
  Params p = init_params(d, 23);
  const ParamLayout L(d);
  for (std::size_t i = L.text_b1; i < L.text_w2; ++i) p.values[i] = 0.1 * (rng.uniform01() - 0.5);
  const std::vector<int> tokens = {3, 5, 5, 11};
  const Raster img = random_raster(rng);
  const auto c = countlab::testing::random_unit(rng, 5);
  const auto e = countlab::testing::random_unit(rng, 5);
  auto loss = [&](const Params& q) { return similarity(c, encode_text(q, tokens)) + similarity(e, encode_image(q, img)); };
  std::vector<double> grad(p.values.size(), 0.0);
  backprop_text(p, trace_text(p, tokens), tokens, c, grad);
  backprop_image(p, trace_image(p, img), e, grad);
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (grad[i] != 0.0) nonzero.push_back(i);
  ASSERT_GE(nonzero.size(), 100u);
  const auto r = grad_check(p, grad, loss, 100, 1e-5, 1e-4, rng, nonzero);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const Params p = init_params(small_dims(), 9);
  const std::string bytes = serialize_params(p);
  EXPECT_EQ(bytes.substr(0, 4), "CNTP");
  EXPECT_EQ(bytes.size(), 4 + 4 + 24 + 8 + 8 * p.values.size());
  EXPECT_EQ(deserialize_params(bytes), p);
  EXPECT_THROW(deserialize_params(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(deserialize_params("XXXX" + bytes.substr(4)), DataError);
  EXPECT_THROW(deserialize_params(bytes + "x"), DataError);

  const auto dir = countlab::testing::scratch_dir("ckpt");
  save_params(dir / "m.ckpt", p);
  EXPECT_EQ(load_params(dir / "m.ckpt"), p);
  EXPECT_THROW(load_params(dir / "missing.ckpt"), DataError);
}
