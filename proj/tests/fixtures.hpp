#pragma once

// Small end-to-end run configuration shared by the pipeline tests and the
// acceptance binary.

#include <string>

#include <json.hpp>

#include "countlab/config.hpp"

namespace countlab::testing {

/// About 1000 scenes, mostly true-count captions, a tiny model and 20 steps.
inline nlohmann::json small_run_json(const std::string& out_dir) {
  return {
      {"seed", 11},
      {"out_dir", out_dir},
      {"generate",
       {{"n_scenes", 1000},
        {"bench_fraction", 0.3},
        {"mode_weights", {{"true_count", 0.7}, {"wrong_count", 0.1}, {"no_number", 0.2}}}}},
      {"curate", {{"cap_low", 20}}},
      {"bench", {{"quota", 3}}},
      {"train",
       {{"batch_size", 16},
        {"total_steps", 20},
        {"warmup_steps", 5},
        {"token_dim", 8},
        {"hidden", 16},
        {"embed_dim", 8}}},
      {"eval", {{"k", 4}}},
      {"sweep", {{"total_steps", 4}}},
  };
}

inline RunConfig small_run_config(const std::string& out_dir) { return parse_run_config(small_run_json(out_dir)); }

}  // namespace countlab::testing
