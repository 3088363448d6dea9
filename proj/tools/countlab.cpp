// countlab: command-line front end for the counting-set pipeline.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "countlab/pipeline.hpp"

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

countlab::RunConfig resolve_config(const GlobalOptions& g) {
  countlab::RunConfig cfg =
      g.config_path.empty() ? countlab::parse_run_config(nlohmann::json::object()) : countlab::load_run_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  return cfg;
}

void print_eval(const countlab::EvalReport& r) {
  std::cout << "accuracy " << countlab::format_fixed(r.accuracy, 2) << "  mean_deviation "
            << countlab::format_fixed(r.mean_deviation, 3) << "  records " << r.n_records << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"countlab: curate counting captions, train with a counterfactual counting loss, evaluate counting"};
  app.require_subcommand(1);
  GlobalOptions g;
  auto add_globals = [&g](CLI::App* cmd) {
    cmd->add_option("--config", g.config_path, "run configuration (JSON)");
    cmd->add_option("--seed", g.seed, "global seed, overrides the config");
    cmd->add_option("--out", g.out_dir, "output directory, overrides the config");
  };

  auto* generate = app.add_subcommand("generate", "write a synthetic scene/caption pool");
  add_globals(generate);

  std::string pool_file, counting_file, general_file, benchmark_file, checkpoint, caption;
  std::optional<std::string> exclusion_file;
  std::optional<std::size_t> k;

  auto* curate = app.add_subcommand("curate", "filter and balance a pool into a counting set");
  add_globals(curate);
  curate->add_option("--pool", pool_file, "pool record file")->required();

  auto* bench = app.add_subcommand("bench", "build a held-out counting benchmark");
  add_globals(bench);
  bench->add_option("--pool", pool_file, "pool record file")->required();
  bench->add_option("--exclude", exclusion_file, "record file or id list to keep out of the benchmark");

  auto* train = app.add_subcommand("train", "train the dual encoder");
  add_globals(train);
  train->add_option("--counting", counting_file, "counting-set record file")->required();
  train->add_option("--general", general_file, "general pool record file")->required();

  auto* eval = app.add_subcommand("eval", "zero-shot counting evaluation");
  add_globals(eval);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--benchmark", benchmark_file, "benchmark record file")->required();

  auto* retrieve = app.add_subcommand("retrieve", "top-k image retrieval for a caption");
  add_globals(retrieve);
  retrieve->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  retrieve->add_option("--pool", pool_file, "record file of candidate scenes")->required();
  retrieve->add_option("--caption", caption, "query caption, e.g. \"a photo of six discs\"")->required();
  retrieve->add_option("-k", k, "number of results (default: eval.k)");

  auto* sweep = app.add_subcommand("sweep", "p and lambda ablation grid");
  add_globals(sweep);
  sweep->add_option("--counting", counting_file, "counting-set record file")->required();
  sweep->add_option("--general", general_file, "general pool record file")->required();
  sweep->add_option("--benchmark", benchmark_file, "benchmark record file")->required();

  auto* pipeline = app.add_subcommand("pipeline", "generate, curate, bench, train and eval in one go");
  add_globals(pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(countlab::ExitCode::usage);
  }

  try {
    const countlab::RunConfig cfg = resolve_config(g);
    if (generate->parsed()) {
      const auto s = countlab::cmd_generate(cfg);
      for (const auto& [mode, n] : s.per_mode) std::cout << countlab::to_string(mode) << " " << n << "\n";
      for (const auto& [split, n] : s.per_split) std::cout << "split " << split << " " << n << "\n";
    } else if (curate->parsed()) {
      const auto out = countlab::cmd_curate(cfg, pool_file);
      std::cout << "counting set " << out.counting_set.records.size() << " records, " << out.rejections.size()
                << " rejected\n";
    } else if (bench->parsed()) {
      std::optional<std::filesystem::path> excl;
      if (exclusion_file) excl = *exclusion_file;
      const auto b = countlab::cmd_bench(cfg, pool_file, excl);
      std::cout << "benchmark " << b.records.size() << " records (" << b.quota << " per number)\n";
    } else if (train->parsed()) {
      const auto r = countlab::cmd_train(cfg, counting_file, general_file);
      if (!r.log.empty()) {
        const auto& last = r.log.back().loss;
        std::cout << "step " << last.step << " l_clip " << last.l_clip << " l_count " << last.l_count << "\n";
      }
    } else if (eval->parsed()) {
      print_eval(countlab::cmd_eval(cfg, checkpoint, benchmark_file));
    } else if (retrieve->parsed()) {
      const auto out = countlab::cmd_retrieve(cfg, checkpoint, pool_file, caption, k.value_or(cfg.eval.k));
      for (const auto& r : out.result.ranked) std::cout << r.scene_id << " " << r.similarity << "\n";
      std::cout << "count precision " << countlab::format_fixed(out.precision, 3) << "\n";
    } else if (sweep->parsed()) {
      for (const auto& c : countlab::cmd_sweep(cfg, counting_file, general_file, benchmark_file)) {
        std::cout << c.ablation << " p=" << c.p << " lambda=" << c.lambda << " accuracy "
                  << countlab::format_fixed(c.report.accuracy, 2) << "\n";
      }
    } else if (pipeline->parsed()) {
      print_eval(countlab::cmd_pipeline(cfg));
    }
  } catch (const countlab::Error& e) {
    std::cerr << "countlab: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "countlab: " << e.what() << "\n";
    return static_cast<int>(countlab::ExitCode::data);
  }
  return 0;
}
