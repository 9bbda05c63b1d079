#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "regconsist/geometry.hpp"
#include "regconsist/matching.hpp"
#include "regconsist/regions.hpp"
#include "regconsist/sampling.hpp"
#include "regconsist/ssl.hpp"
#include "regconsist/supervise.hpp"
#include "regconsist/synthworld.hpp"

namespace regconsist::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

struct SuperviseSection {
  std::string init = "pretrained";  // "random", or a path to an encoder checkpoint
  double fraction = 0.05;
  // Test ids come from the split at this fraction (defaults to `fraction`);
  // with nested splits this gives a common test set across fractions.
  std::optional<double> test_split_fraction;
  std::uint64_t split_seed = 0;
  std::string mode = "linear_probe";  // or "full"
  // Head-only warm start before full fine-tuning (mode "full" only).
  int probe_iters = 0;
  double probe_lr = 1.0;
  int num_classes = 0;  // 0: taken from the manifest's class names
  int overlays = 4;
  supervise::FinetuneConfig finetune;
};

struct ExperimentConfig {
  std::optional<std::filesystem::path> manifest;  // unset: generate a synthetic world
  synthworld::WorldOptions world;
  geometry::PairSelectionOptions pairing;
  std::string region_source = "segment";  // or "labels" (ground truth as regions)
  regions::SegmentParams segment;
  double tau_region = matching::kDefaultTauRegion;
  sampling::SamplingConfig sampling;
  int preview_batches = 4;
  sampling::AugmentParams augment;
  ssl::TrainConfig ssl;
  SuperviseSection supervise;

  // Throws ConfigError on unknown keys, wrong types or invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

ExperimentConfig default_config();
ExperimentConfig load_config(const std::filesystem::path& path);

const std::vector<std::string>& stage_names();
// Upstream stages that must have run before `stage` under `config`.
std::vector<std::string> stage_dependencies(const std::string& stage, const ExperimentConfig& config);

struct RunOptions {
  std::filesystem::path workdir;
  bool force = false;
  int jobs = 1;
  std::ostream* log = nullptr;
};

struct StageResult {
  std::string stage;
  std::filesystem::path dir;
  bool up_to_date = false;  // nothing was written
};

// Runs one stage into workdir/<stage>/ and writes provenance.json there.
// Throws DependencyError naming the stage to run first.
StageResult run_stage(const std::string& stage, const ExperimentConfig& config, const RunOptions& options);
std::vector<StageResult> run_all(const ExperimentConfig& config, const RunOptions& options);

struct AblationRow {
  std::string value;
  std::vector<double> miou;  // one per seed
  double mean = 0.0;
};

struct AblationTable {
  std::string axis;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  std::string to_csv() const;
};

// axis: "strategy" | "iou_band" (values "lo:hi") | "fraction". Each (value,
// seed) run lives in workdir/ablate/<axis>/<value>/seed<k>/ and links the
// stages upstream of the varied one from a shared base run.
AblationTable run_ablation(const ExperimentConfig& config, const std::string& axis,
                           const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
                           const RunOptions& options);

// Applies a seed to every seeded stage downstream of the dataset.
ExperimentConfig with_seed(ExperimentConfig config, std::uint64_t seed);

// Process exit code for an exception: 2 config, 3 dependency, 4 numerical, 1 other.
int exit_code_for(const std::exception& e);

}  // namespace regconsist::pipeline
