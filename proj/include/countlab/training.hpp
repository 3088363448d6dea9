#pragma once

// Contrastive and counting losses, the combined objective with a linearly
// warmed-up counting weight, batch composition and the optimization loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/encoder.hpp"
#include "countlab/errors.hpp"
#include "countlab/rng.hpp"
#include "countlab/synthetic_scenes.hpp"

namespace countlab {

namespace detail {

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Gradients of a loss with respect to its embedding inputs.
struct EmbeddingGrads {
  std::vector<Embedding> d_image;
  std::vector<Embedding> d_text;
  std::vector<Embedding> d_counterfactual;
  double d_logit_scale = 0.0;
};

/// Symmetric InfoNCE over logits exp(tau) * (image_i . text_j), matched pairs
/// on the diagonal: half the mean row cross-entropy plus half the mean column
/// cross-entropy. Fills `grads` (d_image, d_text, d_logit_scale) when given.
inline double clip_loss(std::span<const Embedding> images, std::span<const Embedding> texts, double log_scale,
                        EmbeddingGrads* grads = nullptr) {
  const std::size_t n = images.size();
  if (n == 0) throw UsageError("clip_loss: empty batch");
  if (texts.size() != n) throw UsageError("clip_loss: image and text counts differ");
  const double scale = std::exp(log_scale);
  std::vector<double> logits(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) logits[i * n + j] = scale * similarity(images[i], texts[j]);
  }
  std::vector<double> row_lse(n), col_lse(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = logits[i * n];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[i * n + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(logits[i * n + j] - m);
    row_lse[i] = m + std::log(acc);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double m = logits[j];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, logits[i * n + j]);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::exp(logits[i * n + j] - m);
    col_lse[j] = m + std::log(acc);
  }
  double rows = 0.0, cols = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    rows += row_lse[i] - logits[i * n + i];
    cols += col_lse[i] - logits[i * n + i];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double loss = 0.5 * inv_n * (rows + cols);

  if (grads != nullptr) {
    const std::size_t d = images[0].size();
    grads->d_image.assign(n, Embedding(d, 0.0));
    grads->d_text.assign(n, Embedding(d, 0.0));
    grads->d_logit_scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double s = logits[i * n + j];
        const double target = i == j ? 1.0 : 0.0;
        const double g = 0.5 * inv_n * ((std::exp(s - row_lse[i]) - target) + (std::exp(s - col_lse[j]) - target));
        grads->d_logit_scale += g * s;
        const double gs = g * scale;
        for (std::size_t k = 0; k < d; ++k) {
          grads->d_image[i][k] += gs * texts[j][k];
          grads->d_text[j][k] += gs * images[i][k];
        }
      }
    }
  }
  return loss;
}

/// Mean over triplets of -log softmax between the image's raw dot product
/// with its true caption and with its counterfactual caption, evaluated as
/// softplus(s_neg - s_pos). No temperature. Fills `grads` (d_image, d_text,
/// d_counterfactual) when given.
inline double count_loss(std::span<const Embedding> images, std::span<const Embedding> texts,
                         std::span<const Embedding> counterfactuals, EmbeddingGrads* grads = nullptr) {
  const std::size_t n = images.size();
  if (n == 0) throw UsageError("count_loss: empty batch");
  if (texts.size() != n || counterfactuals.size() != n) throw UsageError("count_loss: triplet lists differ in length");
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  if (grads != nullptr) {
    const std::size_t d = images[0].size();
    grads->d_image.assign(n, Embedding(d, 0.0));
    grads->d_text.assign(n, Embedding(d, 0.0));
    grads->d_counterfactual.assign(n, Embedding(d, 0.0));
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double margin = similarity(images[k], texts[k]) - similarity(images[k], counterfactuals[k]);
    loss += detail::softplus(-margin);
    if (grads != nullptr) {
      const double g = -detail::sigmoid(-margin) * inv_n;
      for (std::size_t i = 0; i < images[k].size(); ++i) {
        grads->d_image[k][i] = g * (texts[k][i] - counterfactuals[k][i]);
        grads->d_text[k][i] = g * images[k][i];
        grads->d_counterfactual[k][i] = -g * images[k][i];
      }
    }
  }
  return loss * inv_n;
}

/// Linear ramp lambda * min(1, step / warmup); lambda when warmup is 0.
inline double effective_lambda(std::int64_t step, double lambda, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return lambda;
  return lambda * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

enum class LrSchedule { cosine, constant };
enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  int batch_size = 64;
  double counting_fraction = 1.0 / 8.0;
  double loss_weight = 1.0;
  std::int64_t warmup_steps = 1000;
  std::int64_t total_steps = 5000;
  double base_lr = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.0;  // sgd only
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(counting_fraction > 0.0 && counting_fraction < 1.0)) throw ConfigError("train.counting_fraction must be in (0,1)");
    if (!(loss_weight >= 0.0) || !std::isfinite(loss_weight)) throw ConfigError("train.loss_weight must be >= 0");
    if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
    if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError("train.warmup_steps must be in [0, total_steps]");
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be > 0");
  }

  /// round-half-up(p * B), at least 1 when the counting loss is weighted.
  static int counting_batch_size(int batch, double fraction, double lambda) {
    int m = static_cast<int>(std::floor(fraction * batch + 0.5));
    if (lambda > 0.0) m = std::max(m, 1);
    return std::min(m, batch);
  }

  int counting_batch_size() const { return counting_batch_size(batch_size, counting_fraction, loss_weight); }
};

/// Learning rate at step t in [0, T).
inline double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.lr_schedule == LrSchedule::constant || cfg.total_steps <= 0) return cfg.base_lr;
  return cfg.base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.total_steps)));
}

/// A general (image, caption) example.
struct GeneralExample {
  std::string id;
  Raster raster;
  std::vector<int> tokens;
};

/// A counting-set example; `caption` retains the text for counterfactuals.
struct CountingExample {
  std::string id;
  Raster raster;
  CaptionRecord caption;
  std::vector<int> tokens;
};

struct ImageTextPair {
  const Raster* raster = nullptr;
  std::span<const int> tokens;
};

/// (image, true caption, counterfactual caption); the token lists differ in
/// exactly the number position.
struct CountingTriplet {
  std::string scene_id;
  const Raster* raster = nullptr;
  std::span<const int> caption_tokens;
  std::vector<int> counterfactual_tokens;
};

struct Batch {
  std::vector<ImageTextPair> general;
  std::vector<CountingTriplet> counting;
};

/// B - m general pairs and m counting triplets, each drawn without
/// replacement; counterfactuals are redrawn on every call.
inline Batch compose_batch(std::span<const GeneralExample> general_pool, std::span<const CountingExample> counting_set,
                           const TrainConfig& cfg, const Vocabulary& vocab, Rng& rng) {
  const int m = cfg.counting_batch_size();
  const int g = cfg.batch_size - m;
  if (general_pool.size() < static_cast<std::size_t>(g)) {
    throw DataError("insufficient general pool: need " + std::to_string(g) + ", have " +
                    std::to_string(general_pool.size()));
  }
  if (counting_set.size() < static_cast<std::size_t>(m)) {
    throw DataError("insufficient counting set: need " + std::to_string(m) + ", have " +
                    std::to_string(counting_set.size()));
  }
  Batch batch;
  for (std::size_t i : rng.sample_without_replacement(general_pool.size(), static_cast<std::size_t>(g))) {
    batch.general.push_back({&general_pool[i].raster, general_pool[i].tokens});
  }
  for (std::size_t i : rng.sample_without_replacement(counting_set.size(), static_cast<std::size_t>(m))) {
    const CountingExample& ex = counting_set[i];
    const CounterfactualCaption cf = make_counterfactual(ex.caption, rng);
    batch.counting.push_back({ex.id, &ex.raster, ex.tokens, vocab.encode(cf.text)});
  }
  return batch;
}

struct LossReport {
  std::int64_t step = 0;
  double l_clip = 0.0;
  double l_count = 0.0;
  double l_total = 0.0;
  double effective_lambda = 0.0;

  bool operator==(const LossReport&) const = default;
};

struct LossResult {
  LossReport report;
  std::vector<double> grad;  // same layout as Params::values
};

/// L = L_clip + effective_lambda * L_count with exact parameter gradients.
/// L_clip runs over general pairs plus the counting pairs with their true
/// captions; counterfactuals enter only L_count.
inline LossResult combined_loss(std::span<const ImageTextPair> general, std::span<const CountingTriplet> counting,
                                const Params& params, std::int64_t step, double lambda, std::int64_t warmup_steps,
                                bool want_grad = true) {
  if (lambda > 0.0 && counting.empty()) throw UsageError("combined_loss: counting batch is empty while lambda > 0");
  const std::size_t n_general = general.size();
  const std::size_t n = n_general + counting.size();
  if (n == 0) throw UsageError("combined_loss: empty batch");

  std::vector<TowerTrace> image_traces, text_traces, cf_traces;
  std::vector<std::span<const int>> text_tokens;
  image_traces.reserve(n);
  text_traces.reserve(n);
  for (const auto& pair : general) {
    image_traces.push_back(trace_image(params, *pair.raster));
    text_traces.push_back(trace_text(params, pair.tokens));
    text_tokens.push_back(pair.tokens);
  }
  for (const auto& t : counting) {
    image_traces.push_back(trace_image(params, *t.raster));
    text_traces.push_back(trace_text(params, t.caption_tokens));
    text_tokens.push_back(t.caption_tokens);
    cf_traces.push_back(trace_text(params, t.counterfactual_tokens));
  }
  std::vector<Embedding> images, texts, cfs;
  for (const auto& t : image_traces) images.push_back(t.embedding);
  for (const auto& t : text_traces) texts.push_back(t.embedding);
  for (const auto& t : cf_traces) cfs.push_back(t.embedding);

  LossResult out;
  out.report.step = step;
  out.report.effective_lambda = effective_lambda(step, lambda, warmup_steps);
  EmbeddingGrads clip_g, count_g;
  out.report.l_clip = clip_loss(images, texts, params.logit_scale(), want_grad ? &clip_g : nullptr);
  const std::span<const Embedding> count_images(images.data() + n_general, counting.size());
  const std::span<const Embedding> count_texts(texts.data() + n_general, counting.size());
  const bool weighted = out.report.effective_lambda != 0.0;
  if (!counting.empty()) {
    out.report.l_count = count_loss(count_images, count_texts, cfs, want_grad && weighted ? &count_g : nullptr);
  }
  out.report.l_total = out.report.l_clip + out.report.effective_lambda * out.report.l_count;
  if (!want_grad) return out;

  const double w = out.report.effective_lambda;
  if (weighted) {
    for (std::size_t k = 0; k < counting.size(); ++k) {
      auto& di = clip_g.d_image[n_general + k];
      auto& dt = clip_g.d_text[n_general + k];
      for (std::size_t i = 0; i < di.size(); ++i) {
        di[i] += w * count_g.d_image[k][i];
        dt[i] += w * count_g.d_text[k][i];
      }
    }
  }
  out.grad.assign(params.values.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    backprop_image(params, image_traces[i], clip_g.d_image[i], out.grad);
    backprop_text(params, text_traces[i], text_tokens[i], clip_g.d_text[i], out.grad);
  }
  if (weighted) {
    for (std::size_t k = 0; k < counting.size(); ++k) {
      Embedding d = count_g.d_counterfactual[k];
      for (double& x : d) x *= w;
      backprop_text(params, cf_traces[k], counting[k].counterfactual_tokens, d, out.grad);
    }
  }
  out.grad[params.layout().logit_scale] += clip_g.d_logit_scale;
  return out;
}

/// First/second moment estimates; `steps_taken` counts applied updates.
struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t steps_taken = 0;

  bool operator==(const OptimizerState&) const = default;
};

inline void apply_update(const TrainConfig& cfg, double lr, std::span<const double> grad, Params& params,
                         OptimizerState& state) {
  const std::size_t n = params.values.size();
  if (state.first_moment.size() != n) state.first_moment.assign(n, 0.0);
  if (state.second_moment.size() != n) state.second_moment.assign(n, 0.0);
  ++state.steps_taken;
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < n; ++i) {
      state.first_moment[i] = cfg.momentum * state.first_moment[i] + grad[i];
      params.values[i] -= lr * state.first_moment[i];
    }
    return;
  }
  const double t = static_cast<double>(state.steps_taken);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    params.values[i] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps);
  }
}

// Optimizer sidecar (little-endian): magic "CNTO", u32 version, u64 n,
// i64 steps_taken, f64 x n first moments, f64 x n second moments.

inline std::string serialize_optimizer(const OptimizerState& s) {
  std::string out = "CNTO";
  detail::put_le(out, std::uint32_t{1});
  detail::put_le(out, static_cast<std::uint64_t>(s.first_moment.size()));
  detail::put_le(out, static_cast<std::uint64_t>(s.steps_taken));
  for (double v : s.first_moment) detail::put_le(out, v);
  for (double v : s.second_moment) detail::put_le(out, v);
  return out;
}

inline OptimizerState deserialize_optimizer(std::string_view bytes) {
  if (bytes.substr(0, 4) != "CNTO") throw DataError("not a countlab optimizer state (bad magic)");
  std::size_t at = 4;
  if (detail::get_le<std::uint32_t>(bytes, at) != 1) throw DataError("unsupported optimizer state version");
  const auto n = detail::get_le<std::uint64_t>(bytes, at);
  OptimizerState s;
  s.steps_taken = static_cast<std::int64_t>(detail::get_le<std::uint64_t>(bytes, at));
  if (bytes.size() != at + 16 * n) throw DataError("optimizer state size mismatch");
  s.first_moment.resize(n);
  s.second_moment.resize(n);
  for (auto& v : s.first_moment) v = detail::get_le<double>(bytes, at);
  for (auto& v : s.second_moment) v = detail::get_le<double>(bytes, at);
  return s;
}

struct TrainState {
  Params params;
  OptimizerState optimizer;
  std::int64_t next_step = 0;
};

struct StepLog {
  LossReport loss;
  double lr = 0.0;
};

struct TrainHooks {
  std::int64_t eval_every = 0;
  std::function<void(std::int64_t step, const Params&)> on_eval;
  std::int64_t checkpoint_every = 0;
  std::function<void(const TrainState&)> on_checkpoint;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  TrainState state;
  std::vector<StepLog> log;
};

/// Runs steps [state.next_step, total_steps). Each step draws its batch from
/// an rng seeded by (cfg.seed, step), so a resumed run matches an
/// uninterrupted one.
inline TrainResult train(const TrainConfig& cfg, std::span<const GeneralExample> general,
                         std::span<const CountingExample> counting, const Vocabulary& vocab, TrainState state,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  TrainResult result;
  for (std::int64_t t = state.next_step; t < cfg.total_steps; ++t) {
    Rng rng(item_seed(cfg.seed, static_cast<std::uint64_t>(t)));
    const Batch batch = compose_batch(general, counting, cfg, vocab, rng);
    LossResult loss = combined_loss(batch.general, batch.counting, state.params, t, cfg.loss_weight, cfg.warmup_steps);
    if (!std::isfinite(loss.report.l_total)) {
      throw DivergenceError("non-finite loss at step " + std::to_string(t));
    }
    const double lr = learning_rate(cfg, t);
    apply_update(cfg, lr, loss.grad, state.params, state.optimizer);
    state.next_step = t + 1;
    result.log.push_back({loss.report, lr});
    if (hooks.on_step) hooks.on_step(result.log.back());
    if (hooks.on_eval && hooks.eval_every > 0 && (t + 1) % hooks.eval_every == 0) hooks.on_eval(t + 1, state.params);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (t + 1) % hooks.checkpoint_every == 0) {
      hooks.on_checkpoint(state);
    }
  }
  result.state = std::move(state);
  return result;
}

inline std::string format_metrics(const std::vector<StepLog>& log) {
  std::string out = "step,l_clip,l_count,l_total,effective_lambda,lr\n";
  for (const auto& s : log) {
    out += std::to_string(s.loss.step) + "," + format_double(s.loss.l_clip) + "," + format_double(s.loss.l_count) +
           "," + format_double(s.loss.l_total) + "," + format_double(s.loss.effective_lambda) + "," +
           format_double(s.lr) + "\n";
  }
  return out;
}

}  // namespace countlab
