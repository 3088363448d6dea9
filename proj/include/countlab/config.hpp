#pragma once

// Run configuration: one JSON document covering every pipeline stage.
// Unknown keys are rejected with their full path.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "countlab/caption_numerics.hpp"
#include "countlab/errors.hpp"
#include "countlab/records.hpp"
#include "countlab/rng.hpp"
#include "countlab/synthetic_scenes.hpp"
#include "countlab/training.hpp"

namespace countlab {

struct GenerateConfig {
  std::size_t n_scenes = 20000;
  double bench_fraction = 0.1;
  SceneConfig scene;
  std::map<CaptionMode, double> mode_weights = {
      {CaptionMode::true_count, 0.35},      {CaptionMode::wrong_count, 0.15},     {CaptionMode::digit_distractor, 0.1},
      {CaptionMode::non_count_number, 0.1}, {CaptionMode::amount_modifier, 0.05}, {CaptionMode::multiple_numbers, 0.05},
      {CaptionMode::no_number, 0.2}};
};

struct CurateConfig {
  std::size_t cap_low = 2000;
  std::string split = "train";
  DetectorNoise noise;
  AmountModifierRule modifiers;
};

struct BenchConfig {
  std::size_t quota = 5;
  std::string split = "bench";
  std::string annotation_file;  // ids dropped before quota sampling
};

struct ModelConfig {
  int token_dim = 32;
  int hidden = 64;
  int embed_dim = 32;
};

struct TrainRunConfig {
  TrainConfig train;
  ModelConfig model;
  std::string general_split = "train";
  bool general_excludes_counting = true;  // counting records enter only through the p fraction
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 0;  // progress lines on stderr; 0 disables
  std::string resume_from;
};

struct EvalConfig {
  std::size_t k = 5;
  std::string retrieve_split;  // empty: every record of the pool file
};

struct SweepConfig {
  std::vector<double> p_values = {1.0 / 32.0, 1.0 / 8.0, 1.0 / 4.0};
  std::vector<double> lambda_values = {0.1, 1.0, 5.0, 10.0};
  double p_row_lambda = 1.0;        // lambda held fixed while p varies
  double lambda_row_p = 1.0 / 8.0;  // p held fixed while lambda varies
  std::int64_t total_steps = 0;     // 0: use train.total_steps
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "countlab_out";
  GenerateConfig generate;
  CurateConfig curate;
  BenchConfig bench;
  TrainRunConfig train;
  EvalConfig eval;
  SweepConfig sweep;

  /// Seed of a named stage, derived from the global seed.
  std::uint64_t seed_for(std::string_view stage) const { return stage_seed(seed, stage); }

  void validate() const {
    if (!(generate.bench_fraction >= 0.0 && generate.bench_fraction <= 1.0)) {
      throw ConfigError("generate.bench_fraction must be in [0,1]");
    }
    const auto& s = generate.scene;
    if (s.num_classes < 1 || s.num_classes > kGlyphShapes) throw ConfigError("generate.num_classes must be in [1,5]");
    if (s.count_min < 2 || s.count_max > 10 || s.count_min > s.count_max) {
      throw ConfigError("generate.count_min/count_max must satisfy 2 <= min <= max <= 10");
    }
    if (!(s.count_decay > 0.0)) throw ConfigError("generate.count_decay must be > 0");
    if (s.glyph_size < 1 || s.height < s.glyph_size || s.width < s.glyph_size) {
      throw ConfigError("generate.glyph_size must fit the canvas");
    }
    if (!(s.distractor_prob >= 0.0 && s.distractor_prob <= 1.0)) {
      throw ConfigError("generate.distractor_prob must be in [0,1]");
    }
    double total = 0.0;
    for (const auto& [mode, w] : generate.mode_weights) {
      if (!(w >= 0.0)) throw ConfigError("generate.mode_weights." + to_string(mode) + " must be >= 0");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("generate.mode_weights must have a positive entry");
    if (!(curate.noise.miss_rate >= 0.0 && curate.noise.miss_rate <= 1.0)) {
      throw ConfigError("curate.miss_rate must be in [0,1]");
    }
    if (!(curate.noise.false_positive_rate >= 0.0)) throw ConfigError("curate.false_positive_rate must be >= 0");
    if (bench.quota < 1) throw ConfigError("bench.quota must be >= 1");
    if (train.model.token_dim < 1 || train.model.hidden < 1 || train.model.embed_dim < 1) {
      throw ConfigError("train model dimensions must be positive");
    }
    train.train.validate();
    if (eval.k < 1) throw ConfigError("eval.k must be >= 1");
    for (double p : sweep.p_values) {
      if (!(p > 0.0 && p < 1.0)) throw ConfigError("sweep.p_values entries must be in (0,1)");
    }
    for (double l : sweep.lambda_values) {
      if (!(l >= 0.0)) throw ConfigError("sweep.lambda_values entries must be >= 0");
    }
  }
};

namespace detail {

/// Reads known keys from one JSON object and reports the rest as errors.
class ConfigSection {
 public:
  ConfigSection(const nlohmann::json& j, std::string path) : json_(j), path_(std::move(path)) {
    if (!json_.is_object()) throw ConfigError(label() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    used_.insert(key);
    if (!json_.contains(key)) return;
    try {
      out = json_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(label(key) + " has the wrong type");
    }
  }

  bool has(const char* key) const { return json_.contains(key); }

  ConfigSection child(const char* key) {
    used_.insert(key);
    return ConfigSection(json_.contains(key) ? json_.at(key) : empty(), label(key));
  }

  void finish() const {
    for (const auto& [key, value] : json_.items()) {
      if (!used_.contains(key)) throw ConfigError("unknown config key: " + label(key));
    }
  }

  const nlohmann::json& raw(const char* key) const { return json_.at(key); }
  std::string label(std::string_view key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

 private:
  static const nlohmann::json& empty() {
    static const nlohmann::json e = nlohmann::json::object();
    return e;
  }

  const nlohmann::json& json_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& root) {
  RunConfig c;
  detail::ConfigSection top(root, "");
  top.read("seed", c.seed);
  top.read("out_dir", c.out_dir);

  {
    auto s = top.child("generate");
    auto& g = c.generate;
    s.read("n_scenes", g.n_scenes);
    s.read("bench_fraction", g.bench_fraction);
    s.read("num_classes", g.scene.num_classes);
    s.read("count_min", g.scene.count_min);
    s.read("count_max", g.scene.count_max);
    s.read("count_decay", g.scene.count_decay);
    s.read("grid_base", g.scene.grid_base);
    s.read("grid_slope", g.scene.grid_slope);
    s.read("height", g.scene.height);
    s.read("width", g.scene.width);
    s.read("glyph_size", g.scene.glyph_size);
    s.read("distractor_prob", g.scene.distractor_prob);
    s.read("max_distractor_count", g.scene.max_distractor_count);
    auto modes = s.child("mode_weights");
    for (CaptionMode m : kCaptionModes) {
      const std::string name = to_string(m);
      modes.read(name.c_str(), g.mode_weights[m]);
    }
    modes.finish();
    s.finish();
  }
  {
    auto s = top.child("curate");
    s.read("cap_low", c.curate.cap_low);
    s.read("split", c.curate.split);
    s.read("miss_rate", c.curate.noise.miss_rate);
    s.read("false_positive_rate", c.curate.noise.false_positive_rate);
    s.read("amount_modifiers", c.curate.modifiers.words);
    s.read("modifier_window", c.curate.modifiers.window);
    s.finish();
  }
  {
    auto s = top.child("bench");
    s.read("quota", c.bench.quota);
    s.read("split", c.bench.split);
    s.read("annotation_file", c.bench.annotation_file);
    s.finish();
  }
  {
    auto s = top.child("train");
    auto& t = c.train.train;
    s.read("batch_size", t.batch_size);
    s.read("counting_fraction", t.counting_fraction);
    s.read("loss_weight", t.loss_weight);
    s.read("warmup_steps", t.warmup_steps);
    s.read("total_steps", t.total_steps);
    s.read("base_lr", t.base_lr);
    std::string schedule = t.lr_schedule == LrSchedule::cosine ? "cosine" : "constant";
    s.read("lr_schedule", schedule);
    if (schedule == "cosine") t.lr_schedule = LrSchedule::cosine;
    else if (schedule == "constant") t.lr_schedule = LrSchedule::constant;
    else throw ConfigError("train.lr_schedule must be \"cosine\" or \"constant\"");
    std::string optimizer = t.optimizer == OptimizerKind::adam ? "adam" : "sgd";
    s.read("optimizer", optimizer);
    if (optimizer == "adam") t.optimizer = OptimizerKind::adam;
    else if (optimizer == "sgd") t.optimizer = OptimizerKind::sgd;
    else throw ConfigError("train.optimizer must be \"adam\" or \"sgd\"");
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("adam_eps", t.adam_eps);
    s.read("momentum", t.momentum);
    s.read("token_dim", c.train.model.token_dim);
    s.read("hidden", c.train.model.hidden);
    s.read("embed_dim", c.train.model.embed_dim);
    s.read("general_split", c.train.general_split);
    s.read("general_excludes_counting", c.train.general_excludes_counting);
    s.read("checkpoint_every", c.train.checkpoint_every);
    s.read("log_every", c.train.log_every);
    s.read("resume_from", c.train.resume_from);
    s.finish();
  }
  {
    auto s = top.child("eval");
    s.read("k", c.eval.k);
    s.read("retrieve_split", c.eval.retrieve_split);
    s.finish();
  }
  {
    auto s = top.child("sweep");
    s.read("p_values", c.sweep.p_values);
    s.read("lambda_values", c.sweep.lambda_values);
    s.read("p_row_lambda", c.sweep.p_row_lambda);
    s.read("lambda_row_p", c.sweep.lambda_row_p);
    s.read("total_steps", c.sweep.total_steps);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j);
}

}  // namespace countlab
