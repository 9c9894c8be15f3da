#pragma once

// End-to-end workflow shared by the command-line tool and the acceptance
// suite: configuration, data preparation, and the pretrain / finetune /
// evaluate / experiment drivers.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nsbert/augment.hpp"
#include "nsbert/data.hpp"
#include "nsbert/evaluation.hpp"
#include "nsbert/model.hpp"
#include "nsbert/training.hpp"

namespace nsbert {

struct DataConfig {
  std::filesystem::path dir;  // empty selects synthetic data
  std::size_t synth_classes = 4;
  std::size_t synth_per_class = 500;
  std::uint64_t synth_seed = 1;
  SplitRatios ratios;
};

/// One experiment arm: attention variant plus augmentation, written
/// `ns`, `ns+fm`, `vanilla` or `vanilla+fm`.
struct Arm {
  std::string name;
  Variant variant = Variant::non_stationary;
  bool fm = false;
};

Arm parse_arm(const std::string& name);

struct ExperimentConfig {
  DataConfig data;
  bool fm = true;
  NormalizeMode normalize = NormalizeMode::dataset;
  ModelConfig model;  // seq_len and input_features follow the data
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::vector<std::string> arms = {"ns+fm", "ns", "vanilla+fm", "vanilla"};
  std::filesystem::path out = "runs";
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  void validate() const;
  /// Every setting as canonical key=value pairs (the config file keys).
  std::map<std::string, std::string> key_values() const;
  /// FNV-1a over the canonical key=value text, 16 hex digits.
  std::string hash() const;
  /// Copy with the arm's variant and augmentation applied.
  ExperimentConfig for_arm(const Arm& arm) const;
};

/// Flat `key=value` lines; `[section]` headers prefix the keys that follow
/// with `section.`; `#` starts a comment.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

/// Unknown keys and malformed values raise ConfigError.
ExperimentConfig parse_config(const std::map<std::string, std::string>& kv, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

struct PreparedData {
  std::vector<FeatureWindow> train, val, test;
  NormStats norm;  // empty under per-window normalization
  std::size_t num_classes = 0;
};

std::vector<Window> load_windows(const DataConfig& config);

/// Split (seeded), feature construction and normalization. With `fixed`, the
/// given dataset statistics are applied instead of refitting on train.
PreparedData prepare_data(std::span<const Window> windows, const ExperimentConfig& config,
                          const NormStats* fixed = nullptr);

/// Phase configs with seeds and threads derived from the master settings.
PretrainConfig pretrain_config(const ExperimentConfig& config);
FinetuneConfig finetune_config(const ExperimentConfig& config);
/// Model shape for prepared data.
ModelConfig model_config(const ExperimentConfig& config, const PreparedData& data);

/// Writes encoder.ckpt, curves.csv and summary.txt under config.out.
PhaseResult run_pretrain(const ExperimentConfig& config);
/// Writes classifier.ckpt, curves.csv and summary.txt under config.out.
PhaseResult run_finetune(const ExperimentConfig& config, const std::filesystem::path& encoder_path);
/// Test-split metrics of a classifier checkpoint; writes summary.txt.
RunReport run_evaluate(const ExperimentConfig& config, const std::filesystem::path& classifier_path);

struct ArmOutcome {
  Arm arm;
  RunReport pretrain;
  RunReport finetune;
};

struct ExperimentResult {
  std::vector<ArmOutcome> arms;
  std::vector<ComparisonRow> rows;
};

/// Every arm end to end on one shared split, each under config.out/<arm>/,
/// then comparison.txt, comparison.csv and curves.csv in config.out.
ExperimentResult run_experiment(const ExperimentConfig& config);

}  // namespace nsbert
