#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "countlab/training.hpp"
#include "oracles.hpp"

using namespace countlab;
using countlab::testing::random_unit;

namespace {

struct Fixture {
  Vocabulary vocab = default_vocabulary();
  std::vector<GeneralExample> general;
  std::vector<CountingExample> counting;

  Fixture(std::size_t n_general, std::size_t n_counting, std::uint64_t seed, int side = 8) {
    SceneConfig cfg;
    cfg.height = cfg.width = side;
    cfg.glyph_size = 1;
    const auto names = default_class_names();
    for (std::size_t i = 0; i < n_general + n_counting; ++i) {
      const auto s = sample_scene({0, 1, 2, 3, 4}, cfg, "s" + std::to_string(i), item_seed(seed, i));
      Rng rng(item_seed(seed + 1, i));
      if (i < n_general) {
        const auto caption = caption_for_scene(s, names, rng, CaptionMode::no_number);
        general.push_back({s.id, render(s), vocab.encode(caption)});
      } else {
        const auto caption = caption_for_scene(s, names, rng, CaptionMode::true_count);
        counting.push_back({s.id, render(s), CaptionRecord::make(s.id, caption), vocab.encode(caption)});
      }
    }
  }

  ModelDims dims(int side = 8) const { return {vocab.size(), 6, 8, 5, side, side}; }
};

std::vector<Embedding> units(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Embedding> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(random_unit(rng, d));
  return v;
}

}  // namespace

TEST(ClipLoss, SingletonIsZero) {
  Rng rng(1);
  const auto a = units(rng, 1, 4), b = units(rng, 1, 4);
  EXPECT_EQ(clip_loss(a, b, 2.0), 0.0);
}

TEST(ClipLoss, AllEqualLogitsGiveLn2) {
  const std::vector<Embedding> img = {{1, 0}, {1, 0}};
  const std::vector<Embedding> txt = {{0.6, 0.8}, {0.6, 0.8}};
  EXPECT_NEAR(clip_loss(img, txt, 0.7), std::log(2.0), 1e-15);
}

TEST(ClipLoss, MatchesOracle) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(16);
    // 2 exp(tau) stays inside the long-double exponent range of the naive oracle.
    const double tau = -10.0 + 18.5 * rng.uniform01();
    const auto img = units(rng, n, d), txt = units(rng, n, d);
    const double got = clip_loss(img, txt, tau);
    EXPECT_NEAR(got, static_cast<double>(countlab::testing::clip_oracle(img, txt, tau)), 1e-10);
    EXPECT_GE(got, 0.0);
  }
}

TEST(ClipLoss, FiniteForExtremeScales) {
  Rng rng(3);
  const auto img = units(rng, 8, 4), txt = units(rng, 8, 4);
  for (double tau : {-10.0, 10.0, 30.0}) EXPECT_TRUE(std::isfinite(clip_loss(img, txt, tau)));
  EXPECT_THROW(clip_loss({}, {}, 0.0), UsageError);
}

TEST(CountLoss, ClosedForms) {
  const std::vector<Embedding> img = {{1, 0}};
  EXPECT_NEAR(count_loss(img, std::vector<Embedding>{{0.5, 0.5}}, std::vector<Embedding>{{0.5, -0.5}}), std::log(2.0),
              1e-15);
  // s_pos - s_neg = 2
  EXPECT_NEAR(count_loss(img, std::vector<Embedding>{{1, 0}}, std::vector<Embedding>{{-1, 0}}), 0.126928011042973,
              1e-12);
  EXPECT_THROW(count_loss({}, {}, {}), UsageError);
}

TEST(CountLoss, MatchesOracle) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(16);
    const auto img = units(rng, n, d), txt = units(rng, n, d), cf = units(rng, n, d);
    const double got = count_loss(img, txt, cf);
    EXPECT_NEAR(got, static_cast<double>(countlab::testing::count_oracle(img, txt, cf)), 1e-10);
    EXPECT_GE(got, 0.0);
  }
}

TEST(EmbeddingGradients, MatchFiniteDifferences) {
  Rng rng(5);
  const std::size_t n = 4, d = 6;
  auto img = units(rng, n, d), txt = units(rng, n, d), cf = units(rng, n, d);
  const double tau = 1.3;
  EmbeddingGrads g;
  clip_loss(img, txt, tau, &g);
  const double h = 1e-6;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double saved = img[i][k];
      img[i][k] = saved + h;
      const double up = clip_loss(img, txt, tau);
      img[i][k] = saved - h;
      const double down = clip_loss(img, txt, tau);
      img[i][k] = saved;
      EXPECT_NEAR(g.d_image[i][k], (up - down) / (2 * h), 1e-7);
    }
  }
  const double up = clip_loss(img, txt, tau + h), down = clip_loss(img, txt, tau - h);
  EXPECT_NEAR(g.d_logit_scale, (up - down) / (2 * h), 1e-7);

  EmbeddingGrads c;
  count_loss(img, txt, cf, &c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double saved = cf[i][k];
      cf[i][k] = saved + h;
      const double u = count_loss(img, txt, cf);
      cf[i][k] = saved - h;
      const double l = count_loss(img, txt, cf);
      cf[i][k] = saved;
      EXPECT_NEAR(c.d_counterfactual[i][k], (u - l) / (2 * h), 1e-7);
    }
  }
}

TEST(EffectiveLambda, WarmupRamp) {
  EXPECT_EQ(effective_lambda(0, 1.0, 100), 0.0);
  EXPECT_EQ(effective_lambda(100, 2.5, 100), 2.5);
  EXPECT_EQ(effective_lambda(50, 1.0, 100), 0.5);
  EXPECT_EQ(effective_lambda(500, 1.0, 100), 1.0);
  EXPECT_EQ(effective_lambda(0, 3.0, 0), 3.0);
  double prev = -1.0;
  for (int s = 0; s < 300; ++s) {
    const double v = effective_lambda(s, 1.7, 200);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(BatchSplit, RoundedFraction) {
  EXPECT_EQ(TrainConfig::counting_batch_size(32, 1.0 / 32.0, 1.0), 1);
  EXPECT_EQ(TrainConfig::counting_batch_size(64, 1.0 / 8.0, 1.0), 8);
  EXPECT_EQ(TrainConfig::counting_batch_size(16, 1.0 / 64.0, 1.0), 1);
  EXPECT_EQ(TrainConfig::counting_batch_size(16, 1.0 / 64.0, 0.0), 0);
  EXPECT_EQ(TrainConfig::counting_batch_size(64, 1.0 / 4.0, 0.0), 16);
}

TEST(LearningRate, CosineShape) {
  TrainConfig cfg;
  cfg.total_steps = 100;
  cfg.base_lr = 0.01;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 0), 0.01);
  EXPECT_NEAR(learning_rate(cfg, 50), 0.005, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 100), 0.0, 1e-15);
  cfg.lr_schedule = LrSchedule::constant;
  EXPECT_EQ(learning_rate(cfg, 70), 0.01);
}

TEST(ComposeBatch, SizesAndCounterfactuals) {
  Fixture f(40, 20, 1);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.counting_fraction = 0.25;
  Rng rng(3);
  const Batch b = compose_batch(f.general, f.counting, cfg, f.vocab, rng);
  EXPECT_EQ(b.general.size(), 12u);
  ASSERT_EQ(b.counting.size(), 4u);
  for (const auto& t : b.counting) {
    ASSERT_EQ(t.caption_tokens.size(), t.counterfactual_tokens.size());
    int diffs = 0;
    for (std::size_t i = 0; i < t.caption_tokens.size(); ++i) diffs += t.caption_tokens[i] != t.counterfactual_tokens[i];
    EXPECT_EQ(diffs, 1);
  }
  Rng a(7), b2(7);
  const Batch x = compose_batch(f.general, f.counting, cfg, f.vocab, a);
  const Batch y = compose_batch(f.general, f.counting, cfg, f.vocab, b2);
  for (std::size_t i = 0; i < x.counting.size(); ++i) {
    EXPECT_EQ(x.counting[i].scene_id, y.counting[i].scene_id);
    EXPECT_EQ(x.counting[i].counterfactual_tokens, y.counting[i].counterfactual_tokens);
  }
}

TEST(ComposeBatch, NearUniformCountingFrequency) {
  Fixture f(60, 50, 2);
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.counting_fraction = 1.0 / 8.0;
  std::map<std::string, int> freq;
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    for (const auto& t : compose_batch(f.general, f.counting, cfg, f.vocab, rng).counting) ++freq[t.scene_id];
  }
  ASSERT_EQ(freq.size(), 50u);
  const double expected = 10000.0 * 8 / 50;
  for (const auto& [id, n] : freq) EXPECT_NEAR(n, expected, 0.2 * expected) << id;
}

TEST(ComposeBatch, InsufficientPools) {
  Fixture f(5, 20, 3);
  TrainConfig cfg;
  cfg.batch_size = 16;
  Rng rng(1);
  EXPECT_THROW(compose_batch(f.general, f.counting, cfg, f.vocab, rng), DataError);
  Fixture g(40, 1, 3);
  cfg.counting_fraction = 0.25;
  EXPECT_THROW(compose_batch(g.general, g.counting, cfg, g.vocab, rng), DataError);
}

TEST(CombinedLoss, AdditivityAndLambdaZero) {
  Fixture f(20, 10, 4);
  const Params p = init_params(f.dims(), 5);
  TrainConfig cfg;
  cfg.batch_size = 12;
  cfg.counting_fraction = 0.25;
  Rng rng(6);
  const Batch b = compose_batch(f.general, f.counting, cfg, f.vocab, rng);
  const auto r = combined_loss(b.general, b.counting, p, 30, 1.0, 100);
  EXPECT_NEAR(r.report.l_total - (r.report.l_clip + r.report.effective_lambda * r.report.l_count), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.report.effective_lambda, 0.3);

  const auto z = combined_loss(b.general, b.counting, p, 30, 0.0, 100);
  EXPECT_EQ(z.report.l_total, z.report.l_clip);
  EXPECT_GT(z.report.l_count, 0.0);
  // Gradient of lambda = 0 equals the gradient of L_clip alone.
  std::vector<ImageTextPair> pairs(b.general.begin(), b.general.end());
  for (const auto& t : b.counting) pairs.push_back({t.raster, t.caption_tokens});
  const auto clip_only = combined_loss(pairs, {}, p, 30, 0.0, 100);
  EXPECT_EQ(clip_only.report.l_clip, z.report.l_clip);
  EXPECT_EQ(clip_only.grad, z.grad);
}

TEST(CombinedLoss, EmptyCountingBatchWithWeightIsUsageError) {
  Fixture f(8, 0, 5);
  const Params p = init_params(f.dims(), 5);
  std::vector<ImageTextPair> pairs;
  for (const auto& g : f.general) pairs.push_back({&g.raster, g.tokens});
  EXPECT_THROW(combined_loss(pairs, {}, p, 0, 1.0, 10), UsageError);
  EXPECT_NO_THROW(combined_loss(pairs, {}, p, 0, 0.0, 10));
}

TEST(CombinedLoss, GradientsPassGradCheck) {
  Fixture f(20, 10, 6);
  Params p = init_params(f.dims(), 7);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.counting_fraction = 0.5;
  Rng rng(8);
  const Batch b = compose_batch(f.general, f.counting, cfg, f.vocab, rng);
  for (auto [lambda, step] : {std::pair{0.0, 0L}, std::pair{1.0, 200L}, std::pair{1.0, 50L}}) {
    const auto r = combined_loss(b.general, b.counting, p, step, lambda, 100);
    std::vector<std::size_t> nonzero;
    for (std::size_t i = 0; i < r.grad.size(); ++i)
      if (r.grad[i] != 0.0) nonzero.push_back(i);
    auto loss = [&](const Params& q) {
      return combined_loss(b.general, b.counting, q, step, lambda, 100, false).report.l_total;
    };
    const auto report = grad_check(p, r.grad, loss, 100, 1e-5, 1e-4, rng, nonzero);
    EXPECT_TRUE(report.passed) << "lambda " << lambda << " step " << step << " max " << report.max_relative_error;
  }
}

TEST(Train, ZeroStepsLeavesParams) {
  Fixture f(20, 10, 7);
  TrainState s;
  s.params = init_params(f.dims(), 1);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.total_steps = 0;
  cfg.warmup_steps = 0;
  const auto r = train(cfg, f.general, f.counting, f.vocab, s);
  EXPECT_EQ(r.state.params, s.params);
  EXPECT_TRUE(r.log.empty());
}

TEST(Train, DeterministicAndResumable) {
  Fixture f(40, 20, 8);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.counting_fraction = 0.25;
  cfg.total_steps = 12;
  cfg.warmup_steps = 4;
  cfg.base_lr = 0.01;
  cfg.seed = 99;
  TrainState init;
  init.params = init_params(f.dims(), 2);

  const auto full = train(cfg, f.general, f.counting, f.vocab, init);
  EXPECT_EQ(full.log.size(), 12u);
  EXPECT_EQ(full.state.params, train(cfg, f.general, f.counting, f.vocab, init).state.params);
  EXPECT_NE(full.state.params, init.params);

  TrainState mid;
  TrainHooks hooks;
  hooks.checkpoint_every = 7;
  hooks.on_checkpoint = [&](const TrainState& s) {
    if (s.next_step == 7) mid = s;
  };
  train(cfg, f.general, f.counting, f.vocab, init, hooks);
  ASSERT_EQ(mid.next_step, 7);
  // Through the byte formats, as a resumed process would see them.
  TrainState restored;
  restored.params = deserialize_params(serialize_params(mid.params));
  restored.optimizer = deserialize_optimizer(serialize_optimizer(mid.optimizer));
  restored.next_step = restored.optimizer.steps_taken;
  const auto resumed = train(cfg, f.general, f.counting, f.vocab, restored);
  ASSERT_EQ(resumed.log.size(), 5u);
  EXPECT_EQ(resumed.log.front().loss, full.log[7].loss);
  EXPECT_EQ(resumed.state.params, full.state.params);
}

TEST(Train, LambdaZeroLogsUnweightedCountLoss) {
  Fixture f(40, 20, 9);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.total_steps = 3;
  cfg.warmup_steps = 0;
  cfg.loss_weight = 0.0;
  TrainState init;
  init.params = init_params(f.dims(), 3);
  const auto r = train(cfg, f.general, f.counting, f.vocab, init);
  for (const auto& s : r.log) {
    EXPECT_EQ(s.loss.effective_lambda, 0.0);
    EXPECT_GT(s.loss.l_count, 0.0);
    EXPECT_EQ(s.loss.l_total, s.loss.l_clip);
  }
  const std::string csv = format_metrics(r.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,l_clip,l_count,l_total,effective_lambda,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Train, DivergenceGuard) {
  Fixture f(40, 20, 10);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.total_steps = 2;
  cfg.warmup_steps = 0;
  TrainState init;
  init.params = init_params(f.dims(), 3);
  init.params.values[init.params.layout().text_b2] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(cfg, f.general, f.counting, f.vocab, init), DivergenceError);
}

TEST(Optimizer, StateRoundTrip) {
  OptimizerState s{{1.0, -2.5}, {0.25, 3.0}, 42};
  EXPECT_EQ(deserialize_optimizer(serialize_optimizer(s)), s);
  EXPECT_THROW(deserialize_optimizer("CNTX"), DataError);
}

TEST(Optimizer, SgdStep) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  Params p(ModelDims{1, 1, 1, 1, 1, 1});
  const std::vector<double> g(p.values.size(), 2.0);
  OptimizerState s;
  apply_update(cfg, 0.1, g, p, s);
  for (double v : p.values) EXPECT_DOUBLE_EQ(v, -0.2);
}
