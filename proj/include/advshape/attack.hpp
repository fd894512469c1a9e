#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advshape/classifier.hpp"
#include "advshape/diffusion.hpp"
#include "advshape/guidance.hpp"

namespace advshape {

enum class AttackMode { completion, generation };
enum class SuccessRule { ensemble_argmax, all_members };

std::string to_string(AttackMode mode);
AttackMode attack_mode_from_string(const std::string& s);
std::string to_string(SuccessRule rule);
SuccessRule success_rule_from_string(const std::string& s);

struct AttackConfig {
  GuidanceConfig guidance;
  /// `sampler.seed` is the master seed; each view derives its own stream.
  SamplerConfig sampler;
  int n_views = kDefaultViews;
  int trials = 10;
  AttackMode mode = AttackMode::completion;
  SuccessRule success = SuccessRule::ensemble_argmax;
  int k_p = 64;
  int k_free = 320;
  int workers = 1;
  bool record_trace = true;

  void validate() const;
};

struct GuidedStepTrace {
  int t = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int n_changed = 0;
  double max_dev = 0.0;
};

struct ViewRecord {
  int view_index = 0;
  PointCloud adversarial_cloud;
  bool substitute_success = false;
  int ensemble_pred = -1;
  std::string trace_path;
  std::vector<GuidedStepTrace> trace;
  double seconds = 0.0;
};

struct AttackResult {
  std::string source_id;
  int label = -1;
  std::vector<ViewRecord> views;
  std::vector<int> successful_views;
  double seconds = 0.0;

  [[nodiscard]] bool success() const { return !successful_views.empty(); }
};

/// Sampler seed of one view under a master seed.
std::uint64_t view_seed(std::uint64_t master, int view);
/// Partial shape of one view of a (normalized) source cloud.
PartialShape view_partial(const PointCloud& source, int view, const AttackConfig& config);

/// Guided reverse process from `initial` (t = T) down to t = 0.
CompletionState guided_sample(CompletionState initial, const EnsembleSpec& ensemble, int y, const Denoiser& denoiser,
                              const NoiseSchedule& schedule, const AttackConfig& config, std::uint64_t sampler_seed,
                              std::vector<GuidedStepTrace>* trace = nullptr);

/// Multi-view adversarial shape completion of one labelled source.
AttackResult run_attack(const PointCloud& source, const EnsembleSpec& ensemble, const Denoiser& denoiser,
                        const NoiseSchedule& schedule, const AttackConfig& config);
/// Unconditional variant: every point is free and guidable.
AttackResult run_generation_attack(int y, const EnsembleSpec& ensemble, const Denoiser& denoiser,
                                   const NoiseSchedule& schedule, const AttackConfig& config);
/// Fixed-seed unguided counterpart of a view (the benign partner for quality metrics).
PointCloud benign_view(const PointCloud& source, int view, const Denoiser& denoiser, const NoiseSchedule& schedule,
                       const AttackConfig& config);
PointCloud benign_generation(int y, int view, const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const AttackConfig& config);

/// Iterated sign-gradient ascent on cross-entropy, projected onto the eps ball around the source.
PointCloud pgd_baseline(const PointCloud& source, const Classifier& classifier, double eps, int steps,
                        double step_size);
/// Same loop on the fused ensemble loss; `m_samples > 0` averages subsample gradients.
PointCloud pgd_ensemble(const PointCloud& source, const EnsembleSpec& ensemble, double eps, int steps, double step_size,
                        int m_samples = 0, std::uint64_t seed = 0);

bool is_success(const EnsembleSpec& ensemble, const Points& cloud, int y, SuccessRule rule, int* pred = nullptr);

/// Violations of the per-step budgets in a trace; empty when every step is within N and eps.
std::vector<std::string> validate_trace(const std::vector<GuidedStepTrace>& trace, const GuidanceConfig& config,
                                        int T);
void write_trace_jsonl(const std::filesystem::path& path, const std::vector<GuidedStepTrace>& trace);
std::vector<GuidedStepTrace> read_trace_jsonl(const std::filesystem::path& path);

}  // namespace advshape
