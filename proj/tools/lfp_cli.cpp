#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lfp/config.hpp"
#include "lfp/pipeline.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned-feedback-pattern toolkit: toy RLHF, sparse autoencoders, probes and ablations"};
  app.set_version_flag("--version", "lfp 0.1.0");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  bool quiet = false;
  app.add_option("-c,--config", config_path, "Pipeline config file")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override run.seed");
  app.add_flag("--dry-run", dry_run, "Print the execution plan and exit without touching the filesystem");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages on stderr");
  app.require_subcommand(1, 1);

  const std::map<std::string, std::string> help = {
      {"finetune", "Pretrain the toy LM and PPO fine-tune it on the reward lexicon"},
      {"sample-activations", "Select layers by parameter divergence and record their MLP activations"},
      {"train-sae", "Train the two autoencoders per selected layer (and the optional l1 sweep)"},
      {"probe", "Fit linear and logistic probes on condensed contrastive activation deltas"},
      {"report", "Compute the JSON summary and CSVs from existing artifacts"},
      {"explain", "Describe high-similarity features with an external LLM (or the offline mock)"},
      {"ablate", "Compare mean reward with and without the top reward-correlated features"},
      {"export-formats", "Write the lexicon, contrastive JSONL and an example LFPA file"},
  };
  for (const auto& name : lfp::pipeline::command_names()) {
    app.add_subcommand(name, help.at(name))->fallthrough();
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  lfp::config::PipelineConfig cfg;
  try {
    cfg = lfp::config::load(config_path);
    if (seed) cfg.run.seed = *seed;
  } catch (const lfp::config::ConfigError& e) {
    std::cerr << config_path << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << config_path << ": invalid configuration: " << e.what() << '\n';
    return kExitConfig;
  }

  if (dry_run) {
    std::cout << "plan for '" << command << "' (seed " << cfg.run.seed << ", out_dir " << cfg.paths.out_dir.string()
              << "):\n";
    for (const auto& step : lfp::pipeline::plan(command, cfg)) std::cout << "  - " << step << '\n';
    return 0;
  }

  try {
    const lfp::pipeline::Context ctx(cfg, quiet ? nullptr : &std::clog);
    std::cout << lfp::pipeline::run(command, ctx).dump(2) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "lfp " << command << ": " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
