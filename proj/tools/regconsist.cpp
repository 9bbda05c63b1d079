// regconsist: command-line driver for the staged pipeline.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "regconsist/error.hpp"
#include "regconsist/io.hpp"
#include "regconsist/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = regconsist::pipeline;

namespace {

struct Common {
  std::string config_path;
  std::string workdir;
  bool force = false;
  int jobs = 1;
};

template <typename T, typename U>
void set_if(const std::optional<T>& v, U& out) {
  if (v) out = static_cast<U>(*v);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Experiment config (JSON)");
  cmd->add_option("--workdir", c.workdir, "Experiment directory (default: $REGCONSIST_WORKDIR)");
  cmd->add_flag("--force", c.force, "Re-run even when outputs are up to date");
  cmd->add_option("--jobs", c.jobs, "Worker thread cap")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RegConsist: region-consistent self-supervised pre-training pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pl::kToolVersion);

  Common common;
  // Per-stage overrides; applied on top of the config file.
  std::optional<std::uint64_t> world_seed, seed;
  std::optional<int> objects, stride, min_size, pairs, iters, ft_iters, probe_iters;
  std::optional<double> iou_low, iou_high, epsilon, scale, sigma, tau, lambda, lr, fraction;
  std::optional<std::string> out_dir, mode, source, strategy, init, ft_mode, report;
  std::string axis, values, seeds = "0,1,2";

  std::vector<std::pair<CLI::App*, std::string>> stages;
  auto stage_cmd = [&](const std::string& name, const std::string& help) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, common);
    stages.emplace_back(cmd, name);
    return cmd;
  };

  auto* genworld = stage_cmd("genworld", "Render the synthetic world (or register an external manifest)");
  genworld->add_option("--seed", world_seed, "World seed");
  genworld->add_option("--objects", objects, "Number of boxes in the room");
  genworld->add_option("--out", out_dir, "Write the manifest directory here instead of the workdir");

  auto* pair_select = stage_cmd("pair-select", "Select view pairs by co-visibility IoU");
  pair_select->add_option("--iou-low", iou_low);
  pair_select->add_option("--iou-high", iou_high);
  pair_select->add_option("--epsilon", epsilon, "Relative depth tolerance of the occlusion test");
  pair_select->add_option("--stride", stride, "Pixel stride for IoU estimation");

  auto* segment = stage_cmd("segment", "Estimate regions per frame");
  segment->add_option("--scale", scale);
  segment->add_option("--sigma", sigma);
  segment->add_option("--min-size", min_size);
  segment->add_option("--mode", mode, "Sigma interpretation: blur or raw");
  segment->add_option("--source", source, "segment or labels");

  auto* match = stage_cmd("match-regions", "Build region IoU tables and mutual-best matches");
  match->add_option("--tau", tau, "Region IoU threshold");

  auto* sample = stage_cmd("sample-pairs", "Write preview pixel-pair batches");
  sample->add_option("--strategy", strategy, "random-exact, balanced-exact, random-region or balanced-region");
  sample->add_option("--pairs", pairs, "Pixel pairs per batch");
  sample->add_option("--seed", seed);

  auto* pretrain = stage_cmd("pretrain", "Self-supervised pre-training with the pair loss");
  pretrain->add_option("--iters", iters);
  pretrain->add_option("--lambda", lambda);
  pretrain->add_option("--lr", lr);
  pretrain->add_option("--seed", seed);

  auto* finetune = stage_cmd("finetune", "Supervised fine-tuning with the focal loss");
  finetune->add_option("--init", init, "pretrained, random, or an encoder checkpoint path");
  finetune->add_option("--fraction", fraction, "Labeled fraction of frames");
  finetune->add_option("--seed", seed);
  finetune->add_option("--mode", ft_mode, "linear_probe or full");
  finetune->add_option("--iters", ft_iters);
  finetune->add_option("--probe-iters", probe_iters);

  auto* eval = stage_cmd("eval", "Evaluate mIoU on the held-out frames");
  eval->add_option("--report", report, "Also copy report.json here");

  auto* run_all = stage_cmd("run-all", "Run every stage in order");

  auto* ablate = app.add_subcommand("ablate", "Run the pipeline per axis value and seed");
  add_common(ablate, common);
  ablate->add_option("--axis", axis, "strategy, iou_band or fraction")->required();
  ablate->add_option("--values", values, "Comma-separated values; iou_band values look like 0.3:0.7");
  ablate->add_option("--seeds", seeds, "Comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    pl::ExperimentConfig config = common.config_path.empty() ? pl::default_config() : pl::load_config(common.config_path);
    set_if(world_seed, config.world.seed);
    set_if(objects, config.world.n_objects);
    set_if(iou_low, config.pairing.iou_low);
    set_if(iou_high, config.pairing.iou_high);
    set_if(epsilon, config.pairing.epsilon_rel);
    set_if(stride, config.pairing.stride);
    set_if(scale, config.segment.scale);
    set_if(sigma, config.segment.sigma);
    set_if(min_size, config.segment.min_size);
    if (mode) config.segment.mode = regconsist::regions::parse_sigma_mode(*mode);
    set_if(source, config.region_source);
    set_if(tau, config.tau_region);
    if (strategy) regconsist::sampling::parse_strategy(*strategy, config.sampling);
    set_if(pairs, config.sampling.pairs);
    set_if(iters, config.ssl.total_iters);
    set_if(lambda, config.ssl.lambda);
    set_if(lr, config.ssl.base_lr);
    set_if(init, config.supervise.init);
    set_if(fraction, config.supervise.fraction);
    set_if(ft_mode, config.supervise.mode);
    set_if(ft_iters, config.supervise.finetune.iters);
    set_if(probe_iters, config.supervise.probe_iters);
    if (seed) {
      if (sample->parsed()) config.sampling.seed = *seed;
      if (pretrain->parsed()) config.ssl.seed = *seed;
      if (finetune->parsed()) {
        config.supervise.finetune.seed = *seed;
        config.supervise.split_seed = *seed;
      }
    }

    pl::RunOptions options;
    if (!common.workdir.empty()) {
      options.workdir = common.workdir;
    } else if (const char* env = std::getenv("REGCONSIST_WORKDIR")) {
      options.workdir = env;
    } else {
      throw regconsist::ConfigError("no workdir: pass --workdir or set REGCONSIST_WORKDIR");
    }
    options.force = common.force;
    options.jobs = common.jobs;
    options.log = &std::cerr;

    if (genworld->parsed() && out_dir) {
      const fs::path manifest = regconsist::synthworld::write_world(config.world, *out_dir, options.jobs);
      std::cerr << "wrote " << manifest.string() << "\n";
      config.manifest = fs::absolute(manifest);
    }
    config.validate();

    if (ablate->parsed()) {
      std::vector<std::string> vals = split_list(values);
      if (vals.empty()) {
        if (axis == "strategy") {
          vals = regconsist::sampling::all_strategies();
        } else if (axis == "fraction") {
          vals = {"0.05", "0.10", "0.20", "0.30"};
        } else if (axis == "iou_band") {
          vals = {"0.3:0.7", "0.7:0.9"};
        }
      }
      std::vector<std::uint64_t> seed_list;
      for (const auto& s : split_list(seeds)) seed_list.push_back(std::stoull(s));
      const auto table = pl::run_ablation(config, axis, vals, seed_list, options);
      std::cout << table.to_csv();
      return 0;
    }
    if (run_all->parsed()) {
      pl::run_all(config, options);
      return 0;
    }
    for (const auto& [cmd, name] : stages) {
      if (!cmd->parsed()) continue;
      const auto result = pl::run_stage(name, config, options);
      std::cout << name << ": " << (result.up_to_date ? "up to date" : "done") << " (" << result.dir.string() << ")\n";
      if (name == "eval" && report) {
        regconsist::io::write_text(*report, regconsist::io::read_text(result.dir / "report.json"));
      }
    }
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: bad numeric value: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pl::exit_code_for(e);
  }
}
