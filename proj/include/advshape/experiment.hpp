#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advshape/attack.hpp"
#include "advshape/dataset.hpp"
#include "advshape/defense.hpp"
#include "advshape/eval.hpp"

namespace advshape {

struct ClassifierSpec {
  std::string name;
  Arch arch = Arch::pointnet;
  std::uint64_t seed = 1;
};

struct PgdSpec {
  bool enabled = true;
  int steps = 50;
  double step_size = 0.01;
  /// Substitute model name; empty means the first ensemble member.
  std::string substitute;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  /// Corpus manifest; empty selects the bundled synthetic generator.
  std::string dataset_manifest;
  SyntheticSpec synthetic;
  std::vector<ClassifierSpec> classifiers;
  std::vector<std::string> ensemble;
  ClassifierTrainConfig classifier_training;
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  DenoiserTrainConfig diffusion;
  AttackConfig attack;
  int sources_per_class = 5;
  PgdSpec pgd;
  std::vector<DefenseConfig> defenses;
  int similarity_clouds = 16;

  static ExperimentConfig defaults();
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// YAML document with the same keys as the JSON form; absent keys keep their defaults.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_yaml(const ExperimentConfig& c);

/// Cache root: $ADVSHAPE_CACHE, else ~/.cache/advshape, else ./.advshape-cache.
std::filesystem::path cache_dir();

Dataset experiment_dataset(const ExperimentConfig& c);
/// Trains or loads from cache; returns the checkpoint path.
std::filesystem::path ensure_classifier(const ExperimentConfig& c, const Dataset& ds, const ClassifierSpec& spec);
std::filesystem::path ensure_denoiser(const ExperimentConfig& c, const Dataset& ds, int label, bool conditional);

struct TrialOutcome {
  std::uint64_t seed = 0;
  std::vector<AttackResult> results;
  std::vector<PointCloud> pgd_examples;
};

struct ExperimentSummary {
  std::filesystem::path out_dir;
  RunManifest manifest;
  TransferMatrix transfer;
  QualityReport quality;
  std::vector<TrialOutcome> trials;
  double source_success_rate = 0.0;
};

/// Runs every trial and writes results.jsonl, summary.json, manifest.json and tables/ into `out_dir`.
ExperimentSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);
/// Re-runs from a manifest into `out_dir`; returns the names of numeric tables that differ byte-wise.
std::vector<std::string> reproduce_experiment(const std::filesystem::path& manifest,
                                              const std::filesystem::path& out_dir);
/// Numeric tables whose bytes are covered by the reproducibility check.
const std::vector<std::string>& deterministic_tables();

/// Serialized ViewRecord line for results.jsonl.
nlohmann::json view_record_json(const AttackResult& result, const ViewRecord& view, int trial);

}  // namespace advshape
