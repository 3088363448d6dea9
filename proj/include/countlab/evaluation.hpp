#pragma once

// Nine-way zero-shot counting and count-based top-k retrieval.

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/encoder.hpp"
#include "countlab/errors.hpp"
#include "countlab/records.hpp"
#include "countlab/synthetic_scenes.hpp"

namespace countlab {

using ConfusionMatrix = std::array<std::array<std::size_t, kNumberCount>, kNumberCount>;

/// Rows of `confusion` are true values 2..10, columns predicted values.
struct EvalReport {
  double accuracy = 0.0;  // percent
  double mean_deviation = 0.0;
  ConfusionMatrix confusion{};
  std::array<double, kNumberCount> per_number_accuracy{};  // percent; 0 for absent numbers
  std::size_t n_records = 0;

  bool operator==(const EvalReport&) const = default;
};

/// Similarities of one image against its nine caption variants (index = value - 2).
struct ScoredRecord {
  NumberWord truth;
  std::array<double, kNumberCount> scores;
};

/// Argmax over variant scores; ties go to the lowest number.
inline NumberWord predict_number(const std::array<double, kNumberCount>& scores) {
  std::size_t best = 0;
  for (std::size_t s = 1; s < kNumberCount; ++s) {
    if (scores[s] > scores[best]) best = s;
  }
  return number_from_slot(best);
}

inline EvalReport aggregate_predictions(std::span<const std::pair<NumberWord, NumberWord>> truth_and_prediction) {
  if (truth_and_prediction.empty()) throw DataError("evaluation needs at least one record");
  EvalReport r;
  std::size_t correct = 0;
  std::size_t deviation = 0;
  for (const auto& [truth, pred] : truth_and_prediction) {
    ++r.confusion[slot_of(truth)][slot_of(pred)];
    if (truth == pred) ++correct;
    deviation += static_cast<std::size_t>(std::abs(value_of(truth) - value_of(pred)));
  }
  r.n_records = truth_and_prediction.size();
  const double total = static_cast<double>(r.n_records);
  r.accuracy = 100.0 * static_cast<double>(correct) / total;
  r.mean_deviation = static_cast<double>(deviation) / total;
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    std::size_t row = 0;
    for (std::size_t c : r.confusion[s]) row += c;
    r.per_number_accuracy[s] = row == 0 ? 0.0 : 100.0 * static_cast<double>(r.confusion[s][s]) / static_cast<double>(row);
  }
  return r;
}

inline EvalReport aggregate_scores(std::span<const ScoredRecord> records) {
  std::vector<std::pair<NumberWord, NumberWord>> pairs;
  pairs.reserve(records.size());
  for (const auto& r : records) pairs.emplace_back(r.truth, predict_number(r.scores));
  return aggregate_predictions(pairs);
}

/// A benchmark entry ready for encoding.
struct BenchmarkItem {
  std::string id;
  Raster raster;
  CaptionRecord caption;
};

/// Scores every item against its nine number variants and predicts the
/// best-matching number.
inline std::vector<ScoredRecord> score_benchmark(const Params& params, const Vocabulary& vocab,
                                                 std::span<const BenchmarkItem> items) {
  std::vector<ScoredRecord> scored;
  scored.reserve(items.size());
  for (const auto& item : items) {
    if (!is_counting_candidate(item.caption)) {
      throw DataError("benchmark record " + item.id + " is not a counting caption: \"" + item.caption.text + "\"");
    }
    const Embedding image = encode_image(params, item.raster);
    const auto variants = enumerate_caption_variants(item.caption);
    ScoredRecord rec{item.caption.occurrences.front().number, {}};
    for (std::size_t s = 0; s < kNumberCount; ++s) {
      const auto tokens = vocab.encode(variants[s]);
      rec.scores[s] = similarity(image, encode_text(params, tokens));
    }
    scored.push_back(rec);
  }
  return scored;
}

inline EvalReport zero_shot_count(const Params& params, const Vocabulary& vocab, std::span<const BenchmarkItem> items) {
  return aggregate_scores(score_benchmark(params, vocab, items));
}

struct RankedScene {
  std::string scene_id;
  double similarity = 0.0;

  bool operator==(const RankedScene&) const = default;
};

/// `ranked` is sorted by similarity descending, then scene id ascending.
struct RetrievalResult {
  std::string caption;
  std::vector<RankedScene> ranked;
  std::size_t k = 0;
};

inline bool ranks_before(const RankedScene& a, const RankedScene& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.scene_id < b.scene_id;
}

/// Keeps the first min(k, n) entries of the ranking order.
inline RetrievalResult select_topk(std::string caption, std::vector<RankedScene> scored, std::size_t k) {
  if (k < 1) throw UsageError("retrieve: k must be >= 1");
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), ranks_before);
  scored.resize(keep);
  return {std::move(caption), std::move(scored), k};
}

struct PoolImage {
  std::string scene_id;
  Raster raster;
};

inline RetrievalResult retrieve_topk(const Params& params, const Vocabulary& vocab, std::span<const PoolImage> pool,
                                     const std::string& caption, std::size_t k) {
  if (pool.empty()) throw UsageError("retrieve: empty image pool");
  const auto tokens = vocab.encode(caption);
  const Embedding text = encode_text(params, tokens);
  std::vector<RankedScene> scored;
  scored.reserve(pool.size());
  for (const auto& img : pool) scored.push_back({img.scene_id, similarity(text, encode_image(params, img.raster))});
  return select_topk(caption, std::move(scored), k);
}

/// Fraction of retrieved scenes whose dominant-class count equals the
/// caption's spelled number.
inline double retrieval_count_precision(const RetrievalResult& result,
                                        const std::function<int(const std::string&)>& dominant_count_of) {
  const CaptionRecord rec = CaptionRecord::make("query", result.caption);
  if (!is_counting_candidate(rec)) throw UsageError("retrieval caption is not a counting caption: " + result.caption);
  if (result.ranked.empty()) return 0.0;
  const int wanted = value_of(rec.occurrences.front().number);
  std::size_t hits = 0;
  for (const auto& r : result.ranked) {
    if (dominant_count_of(r.scene_id) == wanted) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(result.ranked.size());
}

inline std::string format_summary_csv(const EvalReport& r) {
  return "accuracy,mean_deviation,n_records\n" + format_double(r.accuracy) + "," + format_double(r.mean_deviation) +
         "," + std::to_string(r.n_records) + "\n";
}

inline std::string format_confusion_csv(const EvalReport& r) {
  std::string out = "true\\predicted";
  for (int v = kMinNumber; v <= kMaxNumber; ++v) out += "," + std::to_string(v);
  out += "\n";
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    out += std::to_string(value_of(number_from_slot(s)));
    for (std::size_t c : r.confusion[s]) out += "," + std::to_string(c);
    out += "\n";
  }
  return out;
}

inline std::string format_per_number_csv(const EvalReport& r) {
  std::string out = "number,n_records,correct,accuracy\n";
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    std::size_t row = 0;
    for (std::size_t c : r.confusion[s]) row += c;
    out += std::to_string(value_of(number_from_slot(s))) + "," + std::to_string(row) + "," +
           std::to_string(r.confusion[s][s]) + "," + format_double(r.per_number_accuracy[s]) + "\n";
  }
  return out;
}

/// Writes summary.csv, confusion.csv and per_number.csv into `out_dir`.
inline void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  if (report.n_records < 1) throw DataError("emit_report: report has no records");
  write_file_atomic(out_dir / "summary.csv", format_summary_csv(report));
  write_file_atomic(out_dir / "confusion.csv", format_confusion_csv(report));
  write_file_atomic(out_dir / "per_number.csv", format_per_number_csv(report));
}

/// rank,scene_id,similarity[,dominant_count,match]
inline std::string format_retrieval_csv(const RetrievalResult& result,
                                        const std::function<int(const std::string&)>& dominant_count_of = {}) {
  std::optional<int> wanted;
  if (dominant_count_of) {
    const CaptionRecord rec = CaptionRecord::make("query", result.caption);
    if (is_counting_candidate(rec)) wanted = value_of(rec.occurrences.front().number);
  }
  std::string out = "rank,scene_id,similarity";
  if (dominant_count_of) out += ",dominant_count,match";
  out += "\n";
  for (std::size_t i = 0; i < result.ranked.size(); ++i) {
    const auto& r = result.ranked[i];
    out += std::to_string(i + 1) + "," + r.scene_id + "," + format_double(r.similarity);
    if (dominant_count_of) {
      const int count = dominant_count_of(r.scene_id);
      out += "," + std::to_string(count) + "," + (wanted && *wanted == count ? "1" : "0");
    }
    out += "\n";
  }
  return out;
}

}  // namespace countlab
