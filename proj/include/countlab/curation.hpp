#pragma once

// Counting-set filter, number balancing and held-out benchmark construction.

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/errors.hpp"
#include "countlab/records.hpp"
#include "countlab/rng.hpp"
#include "countlab/synthetic_scenes.hpp"

namespace countlab {

enum class RejectReason {
  no_spelled_number,
  multiple_numbers,
  amount_modifier,
  count_mismatch,
};

inline std::string to_string(RejectReason r) {
  switch (r) {
    case RejectReason::no_spelled_number: return "no_spelled_number";
    case RejectReason::multiple_numbers: return "multiple_numbers";
    case RejectReason::amount_modifier: return "amount_modifier";
    case RejectReason::count_mismatch: return "count_mismatch";
  }
  return "unknown";
}

struct CurationDecision {
  std::string record_id;
  std::optional<NumberWord> number;         // set iff accepted
  std::optional<RejectReason> reject_reason;  // set iff rejected

  bool accepted() const { return number.has_value(); }
};

/// Accepts a caption when it is a counting candidate and its number equals
/// the detected count of the maximally-detected class. The reject reason is
/// the first failing stage.
inline CurationDecision filter_record(const std::string& record_id, const SceneSpec& scene, const std::string& caption,
                                      const DetectorNoise& noise, const AmountModifierRule& rule = {},
                                      int num_classes = kGlyphShapes) {
  const CaptionRecord rec = CaptionRecord::make(record_id, caption);
  switch (classify_candidacy(rec, rule)) {
    case Candidacy::no_spelled_number: return {record_id, std::nullopt, RejectReason::no_spelled_number};
    case Candidacy::multiple_numbers: return {record_id, std::nullopt, RejectReason::multiple_numbers};
    case Candidacy::amount_modifier: return {record_id, std::nullopt, RejectReason::amount_modifier};
    case Candidacy::candidate: break;
  }
  const NumberWord stated = rec.occurrences.front().number;
  const DetectionResult det = detect(scene, noise, num_classes);
  if (det.max_count != value_of(stated)) return {record_id, std::nullopt, RejectReason::count_mismatch};
  return {record_id, stated, std::nullopt};
}

/// A record that passed the filter, with its caption's number.
struct CountedRecord {
  DatasetRecord record;
  NumberWord number;
};

struct NumberHistogram {
  std::array<std::size_t, kNumberCount> counts{};
  std::size_t total = 0;

  std::size_t operator[](NumberWord n) const { return counts[slot_of(n)]; }
  bool operator==(const NumberHistogram&) const = default;
};

inline NumberHistogram dataset_stats(const std::vector<CountedRecord>& records) {
  NumberHistogram h;
  for (const auto& r : records) {
    ++h.counts[slot_of(r.number)];
    ++h.total;
  }
  return h;
}

struct CountingSet {
  std::vector<CountedRecord> records;
  NumberHistogram per_number_counts;
};

struct Benchmark {
  std::vector<CountedRecord> records;
  std::size_t quota = 0;
};

namespace detail {

/// Records grouped by number, each group sorted by id.
inline std::array<std::vector<const CountedRecord*>, kNumberCount> group_by_number(
    const std::vector<CountedRecord>& records) {
  std::array<std::vector<const CountedRecord*>, kNumberCount> groups;
  for (const auto& r : records) groups[slot_of(r.number)].push_back(&r);
  for (auto& g : groups) {
    std::sort(g.begin(), g.end(), [](const auto* a, const auto* b) { return a->record.id < b->record.id; });
  }
  return groups;
}

inline std::vector<CountedRecord> sample_sorted(const std::vector<const CountedRecord*>& group, std::size_t k,
                                                Rng& rng) {
  auto picks = rng.sample_without_replacement(group.size(), k);
  std::sort(picks.begin(), picks.end());
  std::vector<CountedRecord> out;
  out.reserve(picks.size());
  for (std::size_t i : picks) out.push_back(*group[i]);
  return out;
}

}  // namespace detail

/// Values 2..6 are sampled without replacement down to `cap_low` each;
/// values 7..10 are kept in full. Output is grouped by number, id-ordered.
inline CountingSet balance(const std::vector<CountedRecord>& accepted, std::size_t cap_low, Rng& rng) {
  const auto groups = detail::group_by_number(accepted);
  CountingSet set;
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    const bool capped = value_of(number_from_slot(s)) <= 6;
    const std::size_t k = capped ? std::min(cap_low, groups[s].size()) : groups[s].size();
    auto chosen = detail::sample_sorted(groups[s], k, rng);
    set.records.insert(set.records.end(), std::make_move_iterator(chosen.begin()),
                       std::make_move_iterator(chosen.end()));
  }
  set.per_number_counts = dataset_stats(set.records);
  return set;
}

/// Exactly `quota` records per number, drawn uniformly without replacement
/// from `pool` minus `exclusion_ids`.
inline Benchmark build_benchmark(const std::vector<CountedRecord>& pool, std::size_t quota,
                                 const std::unordered_set<std::string>& exclusion_ids, Rng& rng) {
  std::vector<CountedRecord> eligible;
  for (const auto& r : pool) {
    if (!exclusion_ids.contains(r.record.id)) eligible.push_back(r);
  }
  const auto groups = detail::group_by_number(eligible);
  std::string deficient;
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    if (groups[s].size() < quota) {
      if (!deficient.empty()) deficient += ", ";
      deficient += std::string(kNumberSpellings[s]) + " (" + std::to_string(groups[s].size()) + "/" +
                   std::to_string(quota) + ")";
    }
  }
  if (!deficient.empty()) throw DataError("insufficient benchmark pool for: " + deficient);
  Benchmark bench;
  bench.quota = quota;
  for (std::size_t s = 0; s < kNumberCount; ++s) {
    auto chosen = detail::sample_sorted(groups[s], quota, rng);
    bench.records.insert(bench.records.end(), std::make_move_iterator(chosen.begin()),
                         std::make_move_iterator(chosen.end()));
  }
  return bench;
}

}  // namespace countlab
