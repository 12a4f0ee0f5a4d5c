#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "damix/pipeline/model.hpp"
#include "damix/pipeline/synthetic.hpp"
#include "damix/pipeline/trainer.hpp"

namespace damix {

/// Sectioned key/value text:
///
///   # comment
///   seed = 3
///   [model]
///   norm = "rdsbn"
///   [pretrain]
///   milestones = [40, 70]
///
/// Values are numbers, true/false, quoted strings, or flat arrays of numbers.
/// Keys before the first section belong to section "".
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  /// Raw value text (strings unquoted).
  const std::string& raw(const std::string& section, const std::string& key) const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return values_; }

 private:
  std::string origin_;
  std::map<std::string, std::map<std::string, std::string>> values_;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  pipeline::SyntheticSpec data;
  pipeline::ModelConfig model;
  pipeline::StageConfig pretrain;
  pipeline::AdaptConfig adapt;
  bool per_sample_variance = false;

  /// Full-scale schedule: 80 pretrain epochs (decay at 40, 70), 40 adapt
  /// epochs, lr 3.5e-4, P=8, R=4.
  static ExperimentConfig defaults();
  /// Desk-scale schedule used by the ablation benchmark.
  static ExperimentConfig benchmark();

  /// Applies every key of `file` on top of `base`; unknown sections or keys
  /// and ill-typed values throw ConfigError.
  static ExperimentConfig from_file(const ConfigFile& file, ExperimentConfig base = defaults());

  void validate() const;
  /// Canonical text with every field, used for hashing and round-trips.
  std::string canonical() const;
  /// FNV-1a 64 of canonical() without the seed, as 16 hex digits.
  std::string hash() const;
};

std::uint64_t fnv1a64(const std::string& text);

}  // namespace damix
