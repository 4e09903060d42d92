#include <torch/torch.h>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "privtranslate/errors.hpp"
#include "privtranslate/experiment.hpp"

namespace pt = privtranslate;

int main(int argc, char** argv) {
  CLI::App app{"privtranslate: face authentication in a visually private translated domain"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "runs";
  int64_t jobs = 0;
  int64_t seed = -1;
  app.add_option("--config", config_path, "JSON config file (merged over built-in defaults)");
  app.add_option("--set", overrides, "config override as KEY=VALUE (repeatable, dotted keys)");
  app.add_option("--out", out_dir, "output base directory (default: runs)")
      ->envname("PRIVTRANSLATE_OUT");
  app.add_option("--jobs", jobs, "worker threads for cross-validation");
  app.add_option("--seed", seed, "top-level seed (overrides config)");

  const std::map<std::string, std::pair<const char*, std::function<int(pt::RunContext&)>>> stages =
      {
          {"synth-data", {"render the synthetic datasets", pt::run_synth_data}},
          {"ingest", {"load datasets from image folders", pt::run_ingest}},
          {"train-gan", {"train the unpaired translation model", pt::run_train_gan}},
          {"translate", {"run datasets through the trained generator", pt::run_translate}},
          {"consistency", {"score within- vs cross-identity translation similarity",
                           pt::run_consistency}},
          {"train-classifiers", {"cross-validated per-identity authenticators",
                                 pt::run_train_classifiers}},
          {"evaluate", {"aggregate classifier metrics into the evaluation table",
                        pt::run_evaluate}},
          {"attack", {"inversion attack and re-identification benchmark", pt::run_attack}},
          {"report", {"compose the final report from stage outputs", pt::run_report}},
          {"pipeline", {"run every stage in order", pt::run_pipeline}},
      };
  for (const auto& [name, entry] : stages) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pt::kExitUsage;
  }

  torch::set_num_threads(1);

  pt::json config;
  try {
    config = config_path.empty() ? pt::default_config() : pt::load_config_file(config_path);
    for (const auto& kv : overrides) pt::apply_override(config, kv);
    if (seed >= 0) config["seed"] = seed;
    if (jobs >= 1) config["jobs"] = jobs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pt::kExitUsage;
  }

  const auto errors = pt::validate_config(config);
  if (!errors.empty()) {
    std::cerr << "invalid config:\n";
    for (const auto& msg : errors) std::cerr << "  " << msg << "\n";
    return pt::kExitUsage;
  }

  pt::RunContext ctx;
  ctx.config = config;
  ctx.run_dir = std::filesystem::path(out_dir) / config.at("experiment_id").get<std::string>();
  ctx.seed = config.at("seed").get<uint64_t>();
  ctx.jobs = config.at("jobs").get<int>();

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const int code = stages.at(stage).second(ctx);
    if (code == pt::kExitOk) {
      std::cout << stage << ": complete (" << ctx.run_dir.string() << ")\n";
    } else {
      std::cerr << stage << ": stopped with code " << code << " (" << ctx.run_dir.string()
                << ")\n";
    }
    return code;
  } catch (const pt::StageRefusedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pt::kExitUsage;
  } catch (const pt::InvalidConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pt::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << stage << " failed: " << e.what() << "\n";
    return pt::kExitRuntime;
  }
}
