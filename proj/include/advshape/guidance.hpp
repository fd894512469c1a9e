#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advshape/classifier.hpp"
#include "advshape/diffusion.hpp"

namespace advshape {

enum class SaliencyMode { magnitude, sign };
/// Per-point displacement: the raw gradient, or its elementwise sign (I-FGSM style).
enum class GuidanceDirection { gradient, sign };

std::string to_string(SaliencyMode mode);
SaliencyMode saliency_mode_from_string(const std::string& s);
std::string to_string(GuidanceDirection d);
GuidanceDirection guidance_direction_from_string(const std::string& s);

struct GuidanceConfig {
  double a = 0.4;
  double t_adv_fraction = 0.2;
  int n_points = 200;
  int m_samples = 5;
  double eps = kDefaultEps;
  SaliencyMode saliency_mode = SaliencyMode::magnitude;
  GuidanceDirection direction = GuidanceDirection::gradient;
  /// Monte-Carlo random subsampling of the free points (off: one full-cloud gradient).
  bool use_mu = true;
  /// Reweight members by per-step correctness on the subsampled batch.
  bool adaptive_weights = true;
  double kappa_fraction = 0.05;

  void validate(Eigen::Index k_free) const;
  /// Guided steps are t in (0, t_adv_fraction * T].
  [[nodiscard]] bool guided(int t, int T) const;
};

struct SaliencyMap {
  Eigen::VectorXd scores;
  std::vector<Eigen::Index> rank;
};

/// Mean of M scattered subsample gradients over the composite cloud (z0 rows
/// first). Dropped free points contribute zeros; z0 is never subsampled.
GradientField mu_gradient(const EnsembleSpec& ensemble, const CompletionState& state, int y,
                          const GuidanceConfig& config, std::uint64_t seed);
/// Same, with explicit masks (one per Monte-Carlo sample) over the free points.
GradientField mu_gradient_with_masks(const EnsembleSpec& ensemble, const CompletionState& state, int y,
                                     const GuidanceConfig& config, const std::vector<SampleMask>& masks);

/// Channel-sum score per free point; `grad` is aligned with the composite cloud.
SaliencyMap saliency_scores(const GradientField& grad, Eigen::Index partial_size, SaliencyMode mode);
/// Convenience: ensemble gradient at the composite cloud, then scores.
SaliencyMap saliency_scores(const EnsembleSpec& ensemble, const CompletionState& state, int y, SaliencyMode mode);

/// Moves the top-N salient free points of `benign_next` by a * beta * grad
/// (loss-increasing direction), then clips against `benign_next` with eps.
CompletionState adversarial_step(const CompletionState& state, const CompletionState& benign_next,
                                 const GradientField& grad, const SaliencyMap& saliency, const GuidanceConfig& config,
                                 const NoiseSchedule& schedule);

/// Effective single-step noise level of a move t -> t_prev.
double step_beta(const NoiseSchedule& schedule, int t, int t_prev);

}  // namespace advshape
