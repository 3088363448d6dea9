#pragma once

// Experiment orchestration behind the command-line tool. Each stage has an
// in-memory form (used by tests and the sweep) and a file-based `cmd_*`
// wrapper that reads and writes the record/CSV/checkpoint formats.
//
// Per-stage seeds come from RunConfig::seed_for(stage) with stage names
// "generate", "detect", "balance", "bench", "init", "train".

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/config.hpp"
#include "countlab/curation.hpp"
#include "countlab/encoder.hpp"
#include "countlab/errors.hpp"
#include "countlab/evaluation.hpp"
#include "countlab/records.hpp"
#include "countlab/rng.hpp"
#include "countlab/synthetic_scenes.hpp"
#include "countlab/training.hpp"

namespace countlab {

namespace files {
inline constexpr const char* kPool = "pool.jsonl";
inline constexpr const char* kCountingSet = "counting_set.jsonl";
inline constexpr const char* kRejections = "rejections.csv";
inline constexpr const char* kCurationStats = "curation_stats.csv";
inline constexpr const char* kBenchmark = "benchmark.jsonl";
inline constexpr const char* kBenchQuota = "bench_quota.csv";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kRetrieval = "retrieval.csv";
inline constexpr const char* kSweep = "sweep.csv";
}  // namespace files

inline std::string scene_id_for(std::size_t index) {
  std::string digits = std::to_string(index);
  return "s" + std::string(digits.size() < 6 ? 6 - digits.size() : 0, '0') + digits;
}

// --- generate ---------------------------------------------------------------

struct GenerateSummary {
  std::map<CaptionMode, std::size_t> per_mode;
  std::map<std::string, std::size_t> per_split;
};

/// One record per scene: split tag, caption in a randomly drawn mode, scene.
/// The mode is stored in flags["mode"].
inline std::vector<DatasetRecord> generate_pool(const RunConfig& cfg, GenerateSummary* summary = nullptr) {
  const auto& g = cfg.generate;
  const std::uint64_t base = cfg.seed_for("generate");
  const auto names = default_class_names();
  std::vector<int> classes;
  for (int c = 0; c < g.scene.num_classes; ++c) classes.push_back(c);
  std::vector<CaptionMode> modes;
  std::vector<double> weights;
  for (const auto& [mode, w] : g.mode_weights) {
    modes.push_back(mode);
    weights.push_back(w);
  }
  std::vector<DatasetRecord> out;
  out.reserve(g.n_scenes);
  for (std::size_t i = 0; i < g.n_scenes; ++i) {
    const std::uint64_t scene_seed = item_seed(base, i);
    DatasetRecord r;
    r.id = scene_id_for(i);
    r.scene = sample_scene(classes, g.scene, r.id, scene_seed);
    Rng rng(item_seed(scene_seed, 1));
    r.split = rng.bernoulli(g.bench_fraction) ? cfg.bench.split : cfg.curate.split;
    const CaptionMode mode = modes[rng.weighted(weights)];
    r.caption = caption_for_scene(r.scene, names, rng, mode);
    r.flags["mode"] = to_string(mode);
    if (summary != nullptr) {
      ++summary->per_mode[mode];
      ++summary->per_split[r.split];
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline GenerateSummary cmd_generate(const RunConfig& cfg) {
  GenerateSummary summary;
  const auto records = generate_pool(cfg, &summary);
  write_records(std::filesystem::path(cfg.out_dir) / files::kPool, records);
  return summary;
}

// --- curate -----------------------------------------------------------------

struct Rejection {
  std::size_t line = 0;
  std::string id;
  RejectReason reason;
};

struct CurationOutput {
  CountingSet counting_set;
  NumberHistogram available;
  std::vector<Rejection> rejections;
};

inline DetectorNoise detector_noise(const RunConfig& cfg) {
  DetectorNoise n = cfg.curate.noise;
  n.seed = cfg.seed_for("detect");
  return n;
}

/// Filters records of the curate split, in input order, then balances.
inline std::vector<CountedRecord> filter_pool(const RunConfig& cfg, const std::vector<NumberedRecord>& pool,
                                              const std::string& split, std::vector<Rejection>* rejections) {
  const DetectorNoise noise = detector_noise(cfg);
  std::vector<CountedRecord> accepted;
  for (const auto& [line, rec] : pool) {
    if (rec.split != split) continue;
    const CurationDecision d =
        filter_record(rec.id, rec.scene, rec.caption, noise, cfg.curate.modifiers, cfg.generate.scene.num_classes);
    if (d.accepted()) {
      accepted.push_back({rec, *d.number});
    } else if (rejections != nullptr) {
      rejections->push_back({line, rec.id, *d.reject_reason});
    }
  }
  return accepted;
}

inline std::vector<NumberedRecord> number_records(const std::vector<DatasetRecord>& records) {
  std::vector<NumberedRecord> out;
  out.reserve(records.size());
  // line 1 is the header
  for (std::size_t i = 0; i < records.size(); ++i) out.push_back({i + 2, records[i]});
  return out;
}

inline CurationOutput curate_pool(const RunConfig& cfg, const std::vector<NumberedRecord>& pool) {
  CurationOutput out;
  const auto accepted = filter_pool(cfg, pool, cfg.curate.split, &out.rejections);
  out.available = dataset_stats(accepted);
  Rng rng(cfg.seed_for("balance"));
  out.counting_set = balance(accepted, cfg.curate.cap_low, rng);
  return out;
}

inline std::string format_curation_stats(const NumberHistogram& available, const NumberHistogram& selected) {
  std::string out = "number,available,selected\n";
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    out += std::to_string(value_of(number_from_slot(s))) + "," + std::to_string(available.counts[s]) + "," +
           std::to_string(selected.counts[s]) + "\n";
  }
  return out;
}

inline std::vector<DatasetRecord> records_of(const std::vector<CountedRecord>& counted) {
  std::vector<DatasetRecord> out;
  out.reserve(counted.size());
  for (const auto& c : counted) {
    DatasetRecord r = c.record;
    r.flags["number"] = std::string(spelling_of(c.number));
    out.push_back(std::move(r));
  }
  return out;
}

inline CurationOutput cmd_curate(const RunConfig& cfg, const std::filesystem::path& pool_file) {
  const auto pool = read_numbered_records(pool_file);
  CurationOutput out = curate_pool(cfg, pool);
  const std::filesystem::path dir(cfg.out_dir);
  write_records(dir / files::kCountingSet, records_of(out.counting_set.records));
  std::string log = "line,id,reason\n";
  for (const auto& r : out.rejections) log += std::to_string(r.line) + "," + r.id + "," + to_string(r.reason) + "\n";
  write_file_atomic(dir / files::kRejections, log);
  write_file_atomic(dir / files::kCurationStats, format_curation_stats(out.available, out.counting_set.per_number_counts));
  return out;
}

// --- bench ------------------------------------------------------------------

inline Benchmark bench_from_pool(const RunConfig& cfg, const std::vector<NumberedRecord>& pool,
                                 std::unordered_set<std::string> exclusion) {
  const auto candidates = filter_pool(cfg, pool, cfg.bench.split, nullptr);
  if (!cfg.bench.annotation_file.empty()) {
    for (const auto& id : read_id_list(cfg.bench.annotation_file)) exclusion.insert(id);
  }
  Rng rng(cfg.seed_for("bench"));
  return build_benchmark(candidates, cfg.bench.quota, exclusion, rng);
}

/// Ids from a record file (detected by its header line) or a plain id list.
inline std::unordered_set<std::string> read_exclusion_ids(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open exclusion file: " + path.string());
  std::string first;
  std::getline(in, first);
  if (first == kRecordHeader) {
    std::unordered_set<std::string> ids;
    for (const auto& r : read_records(path)) ids.insert(r.id);
    return ids;
  }
  return read_id_list(path);
}

inline Benchmark cmd_bench(const RunConfig& cfg, const std::filesystem::path& pool_file,
                           const std::optional<std::filesystem::path>& exclusion_file) {
  const auto pool = read_numbered_records(pool_file);
  std::unordered_set<std::string> exclusion;
  if (exclusion_file) exclusion = read_exclusion_ids(*exclusion_file);
  Benchmark bench = bench_from_pool(cfg, pool, std::move(exclusion));
  const std::filesystem::path dir(cfg.out_dir);
  write_records(dir / files::kBenchmark, records_of(bench.records));
  const NumberHistogram h = dataset_stats(bench.records);
  std::string quota = "number,quota,selected\n";
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    quota += std::to_string(value_of(number_from_slot(s))) + "," + std::to_string(bench.quota) + "," +
             std::to_string(h.counts[s]) + "\n";
  }
  write_file_atomic(dir / files::kBenchQuota, quota);
  return bench;
}

// --- train ------------------------------------------------------------------

inline ModelDims model_dims(const RunConfig& cfg, const Vocabulary& vocab) {
  return {vocab.size(), cfg.train.model.token_dim, cfg.train.model.hidden, cfg.train.model.embed_dim,
          cfg.generate.scene.height, cfg.generate.scene.width};
}

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t = cfg.train.train;
  t.seed = cfg.seed_for("train");
  return t;
}

/// Records of `split` (all when empty) minus the ids in `exclude`.
inline std::vector<GeneralExample> general_examples(const std::vector<DatasetRecord>& records, const std::string& split,
                                                    const Vocabulary& vocab,
                                                    const std::unordered_set<std::string>& exclude = {}) {
  std::vector<GeneralExample> out;
  for (const auto& r : records) {
    if (!split.empty() && r.split != split) continue;
    if (exclude.contains(r.id)) continue;
    auto tokens = vocab.encode(r.caption);
    if (tokens.empty()) continue;
    out.push_back({r.id, render(r.scene), std::move(tokens)});
  }
  return out;
}

inline std::vector<CountingExample> counting_examples(const std::vector<DatasetRecord>& records,
                                                      const Vocabulary& vocab) {
  std::vector<CountingExample> out;
  for (const auto& r : records) {
    CaptionRecord cap = CaptionRecord::make(r.id, r.caption);
    if (!is_counting_candidate(cap)) {
      throw DataError("counting record " + r.id + " is not a counting caption: \"" + r.caption + "\"");
    }
    out.push_back({r.id, render(r.scene), std::move(cap), vocab.encode(r.caption)});
  }
  return out;
}

/// Counting-set ids to keep out of the general pool, per the run config.
inline std::unordered_set<std::string> general_exclusions(const RunConfig& cfg,
                                                          const std::vector<CountingExample>& counting) {
  std::unordered_set<std::string> ids;
  if (cfg.train.general_excludes_counting) {
    for (const auto& c : counting) ids.insert(c.id);
  }
  return ids;
}

inline std::vector<BenchmarkItem> benchmark_items(const std::vector<DatasetRecord>& records) {
  std::vector<BenchmarkItem> out;
  for (const auto& r : records) out.push_back({r.id, render(r.scene), CaptionRecord::make(r.id, r.caption)});
  return out;
}

inline TrainState initial_state(const RunConfig& cfg, const Vocabulary& vocab) {
  TrainState s;
  s.params = init_params(model_dims(cfg, vocab), cfg.seed_for("init"));
  return s;
}

inline std::filesystem::path optimizer_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".opt";
}

inline void save_train_state(const std::filesystem::path& checkpoint, const TrainState& s) {
  save_params(checkpoint, s.params);
  write_file_atomic(optimizer_path(checkpoint), serialize_optimizer(s.optimizer));
}

/// Params plus optimizer sidecar; resumes at the sidecar's step count.
inline TrainState load_train_state(const std::filesystem::path& checkpoint) {
  TrainState s;
  s.params = load_params(checkpoint);
  try {
    s.optimizer = deserialize_optimizer(read_file(optimizer_path(checkpoint)));
  } catch (const DataError& e) {
    throw DataError(optimizer_path(checkpoint).string() + ": " + e.what());
  }
  if (s.optimizer.first_moment.size() != s.params.values.size()) {
    throw DataError("optimizer state does not match checkpoint " + checkpoint.string());
  }
  s.next_step = s.optimizer.steps_taken;
  return s;
}

inline TrainHooks progress_hooks(const RunConfig& cfg) {
  TrainHooks hooks;
  if (cfg.train.log_every > 0) {
    const std::int64_t every = cfg.train.log_every;
    hooks.on_step = [every](const StepLog& s) {
      if ((s.loss.step + 1) % every == 0) {
        std::cerr << "step " << s.loss.step + 1 << " l_clip=" << s.loss.l_clip << " l_count=" << s.loss.l_count
                  << " lambda=" << s.loss.effective_lambda << " lr=" << s.lr << "\n";
      }
    };
  }
  return hooks;
}

inline TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& counting_file,
                             const std::filesystem::path& general_file) {
  const Vocabulary vocab = default_vocabulary();
  const auto counting = counting_examples(read_records(counting_file), vocab);
  const auto general =
      general_examples(read_records(general_file), cfg.train.general_split, vocab, general_exclusions(cfg, counting));
  TrainState state = cfg.train.resume_from.empty() ? initial_state(cfg, vocab) : load_train_state(cfg.train.resume_from);
  if (state.params.dims != model_dims(cfg, vocab)) throw DataError("checkpoint dimensions do not match the config");
  const std::filesystem::path dir(cfg.out_dir);
  TrainHooks hooks = progress_hooks(cfg);
  hooks.checkpoint_every = cfg.train.checkpoint_every;
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_train_state(dir / ("step" + std::to_string(s.next_step) + ".ckpt"), s);
  };
  TrainResult result = train(train_config(cfg), general, counting, vocab, std::move(state), hooks);
  save_train_state(dir / files::kCheckpoint, result.state);
  write_file_atomic(dir / files::kMetrics, format_metrics(result.log));
  return result;
}

// --- eval / retrieve ---------------------------------------------------------

inline Params load_model_for(const RunConfig& cfg, const Vocabulary& vocab, const std::filesystem::path& checkpoint) {
  Params p = load_params(checkpoint);
  const ModelDims want = model_dims(cfg, vocab);
  if (p.dims.vocab != want.vocab || p.dims.height != want.height || p.dims.width != want.width) {
    throw DataError(checkpoint.string() + ": checkpoint vocabulary or raster size does not match the config");
  }
  return p;
}

inline EvalReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                           const std::filesystem::path& benchmark_file) {
  const Vocabulary vocab = default_vocabulary();
  const Params params = load_model_for(cfg, vocab, checkpoint);
  const auto items = benchmark_items(read_records(benchmark_file));
  EvalReport report = zero_shot_count(params, vocab, items);
  emit_report(report, cfg.out_dir);
  return report;
}

struct RetrievalOutput {
  RetrievalResult result;
  double precision = 0.0;
};

inline RetrievalOutput cmd_retrieve(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                    const std::filesystem::path& pool_file, const std::string& caption,
                                    std::size_t k) {
  const Vocabulary vocab = default_vocabulary();
  const Params params = load_model_for(cfg, vocab, checkpoint);
  std::vector<PoolImage> pool;
  std::unordered_map<std::string, int> dominant;
  for (const auto& r : read_records(pool_file)) {
    if (!cfg.eval.retrieve_split.empty() && r.split != cfg.eval.retrieve_split) continue;
    dominant[r.scene.id] = dominant_class(r.scene.counts).second;
    pool.push_back({r.scene.id, render(r.scene)});
  }
  RetrievalOutput out;
  out.result = retrieve_topk(params, vocab, pool, caption, k);
  const auto lookup = [&](const std::string& id) { return dominant.at(id); };
  if (is_counting_candidate(CaptionRecord::make("query", caption))) {
    out.precision = retrieval_count_precision(out.result, lookup);
  }
  write_file_atomic(std::filesystem::path(cfg.out_dir) / files::kRetrieval, format_retrieval_csv(out.result, lookup));
  return out;
}

// --- sweep ------------------------------------------------------------------

struct SweepCell {
  std::string ablation;  // "p" or "lambda"
  double p = 0.0;
  double lambda = 0.0;
  EvalReport report;
};

/// One training run per cell of the p row (lambda fixed) and the lambda row
/// (p fixed), each evaluated on the benchmark.
inline std::vector<SweepCell> run_sweep(const RunConfig& cfg, std::span<const GeneralExample> general,
                                        std::span<const CountingExample> counting,
                                        std::span<const BenchmarkItem> bench, const Vocabulary& vocab) {
  std::vector<std::pair<std::string, std::pair<double, double>>> cells;
  for (double p : cfg.sweep.p_values) cells.push_back({"p", {p, cfg.sweep.p_row_lambda}});
  for (double l : cfg.sweep.lambda_values) cells.push_back({"lambda", {cfg.sweep.lambda_row_p, l}});
  std::vector<SweepCell> out;
  for (const auto& [name, pl] : cells) {
    TrainConfig t = train_config(cfg);
    t.counting_fraction = pl.first;
    t.loss_weight = pl.second;
    if (cfg.sweep.total_steps > 0) t.total_steps = cfg.sweep.total_steps;
    t.warmup_steps = std::min(t.warmup_steps, t.total_steps);
    TrainResult r = train(t, general, counting, vocab, initial_state(cfg, vocab), progress_hooks(cfg));
    out.push_back({name, pl.first, pl.second, zero_shot_count(r.state.params, vocab, bench)});
  }
  return out;
}

inline std::string format_sweep_csv(const std::vector<SweepCell>& cells) {
  std::string out = "ablation,p,lambda,accuracy,mean_deviation\n";
  for (const auto& c : cells) {
    out += c.ablation + "," + format_double(c.p) + "," + format_double(c.lambda) + "," + format_double(c.report.accuracy) +
           "," + format_double(c.report.mean_deviation) + "\n";
  }
  return out;
}

inline std::vector<SweepCell> cmd_sweep(const RunConfig& cfg, const std::filesystem::path& counting_file,
                                        const std::filesystem::path& general_file,
                                        const std::filesystem::path& benchmark_file) {
  const Vocabulary vocab = default_vocabulary();
  const auto counting = counting_examples(read_records(counting_file), vocab);
  const auto general =
      general_examples(read_records(general_file), cfg.train.general_split, vocab, general_exclusions(cfg, counting));
  const auto bench = benchmark_items(read_records(benchmark_file));
  auto cells = run_sweep(cfg, general, counting, bench, vocab);
  write_file_atomic(std::filesystem::path(cfg.out_dir) / files::kSweep, format_sweep_csv(cells));
  return cells;
}

/// generate -> curate -> bench -> train -> eval, all files under out_dir.
inline EvalReport cmd_pipeline(const RunConfig& cfg) {
  const std::filesystem::path dir(cfg.out_dir);
  cmd_generate(cfg);
  cmd_curate(cfg, dir / files::kPool);
  cmd_bench(cfg, dir / files::kPool, dir / files::kCountingSet);
  cmd_train(cfg, dir / files::kCountingSet, dir / files::kPool);
  return cmd_eval(cfg, dir / files::kCheckpoint, dir / files::kBenchmark);
}

}  // namespace countlab
