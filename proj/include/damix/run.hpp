#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "damix/config.hpp"
#include "damix/pipeline/trainer.hpp"

namespace damix {

enum class StageSelect { all, pretrain };

struct RunOptions {
  StageSelect stage = StageSelect::all;
  /// Root under which the run directory is created; empty keeps the run in
  /// memory only.
  std::filesystem::path out_root;
};

struct StageRecord {
  std::string name;
  std::string checkpoint;  // relative to the run directory
  double seconds = 0.0;
};

/// Index of one run directory. Paths are relative to `dir`.
struct RunManifest {
  std::filesystem::path dir;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string variant;
  std::string status = "ok";  // ok | failed
  std::string failed_stage;
  std::string diagnostic;
  std::vector<StageRecord> stages;
  std::map<std::string, std::string> reports;
  std::vector<std::string> pseudo_labels;

  bool ok() const { return status == "ok"; }
  /// Writes manifest.json; throws IoError if a referenced file is missing.
  void write() const;
  /// Throws IoError naming `path` when it is unreadable or malformed.
  static RunManifest read(const std::filesystem::path& path);
};

struct RunResult {
  RunManifest manifest;
  pipeline::TrainLog log;
};

/// `--out` wins, then DAMIX_OUT, then ./runs.
std::filesystem::path output_root(const std::optional<std::filesystem::path>& flag);

/// "bn", "dsbn+mdif", "rdsbn+mdif", ...
std::string variant_name(const pipeline::ModelConfig& model);
/// <config hash>-s<seed>
std::string run_dir_name(const ExperimentConfig& config);

/// Seeds of the independent random streams of one run.
struct RunSeeds {
  std::uint64_t data, init, pretrain, adapt;
  static RunSeeds from(std::uint64_t seed);
};

pipeline::SyntheticData make_data(const ExperimentConfig& config);

struct Pretrained {
  pipeline::ReidModel model;
  pipeline::TrainLog log;
  double seconds = 0.0;
};

/// Stage 1 on the sources of `data`.
Pretrained run_pretrain(const ExperimentConfig& config, const pipeline::SyntheticData& data);

/// Generate, pretrain, adapt, evaluate, and (with an output root) write
/// checkpoints, reports and the manifest. Stage aborts are recorded in the
/// manifest instead of thrown; ConfigError still propagates.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options);

/// Same as run_experiment but starting from an existing stage-1 result.
RunResult run_from_pretrained(const ExperimentConfig& config, const pipeline::SyntheticData& data,
                              const Pretrained& pretrained, const RunOptions& options);

/// The six normalization x fusion variants, seed-paired.
struct AblationRow {
  std::uint64_t seed = 0;
  std::string variant;
  double rank1 = 0.0;
  double mean_ap = 0.0;
  Tensor distance;  // domain mean distances, D x D
  std::vector<int> domains;
  bool ok = true;
};

std::vector<pipeline::ModelConfig> ablation_variants(const pipeline::ModelConfig& base);

/// Runs every variant for every seed; variants sharing a stage-1 procedure
/// (BN, or DSBN for both DSBN and RDSBN) reuse one pretrained model.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config, std::span<const std::uint64_t> seeds,
                                      const RunOptions& options);

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);

enum class ReportFormat { csv, json };

/// Per-epoch metrics of one manifest, or paired columns with deltas against
/// the first manifest when given several. Throws IoError listing missing
/// metric files.
std::string build_report(std::span<const RunManifest> manifests, ReportFormat format);

/// Shortest round-trip decimal text; the reports use it for byte stability.
std::string format_number(double v);

}  // namespace damix
