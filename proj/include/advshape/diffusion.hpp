#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "advshape/nn.hpp"
#include "advshape/point_cloud.hpp"

namespace advshape {

/// Linear beta schedule. Vectors are indexed by step t in [0, T]; index 0 holds
/// the identity values (beta 0, alpha 1, alpha_bar 1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// Fixed reverse-process variance sigma_t^2 = beta_t.
  [[nodiscard]] double sigma(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_min = 1e-4, double beta_max = 0.02);

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise, with noise drawn from `seed`.
Points forward_diffuse(const Points& x0, int t, const NoiseSchedule& schedule, std::uint64_t seed);
/// One Markov step q(x_t | x_{t-1}).
Points forward_step(const Points& x_prev, int t, const NoiseSchedule& schedule, std::uint64_t seed);
Points standard_normal(Eigen::Index rows, std::uint64_t seed);

struct DenoiserConfig {
  bool conditional = true;
  int point_hidden = 32;
  int feature = 64;
  int context = 128;
  int head = 64;
  int time_dim = 16;
};

/// Per-point noise predictor with a pooled global context, a sinusoidal step
/// embedding and (when conditional) a pooled descriptor of the partial shape.
class Denoiser {
 public:
  Denoiser(DenoiserConfig config, std::string category, std::uint64_t seed);
  Denoiser(DenoiserConfig config, std::string category, nn::ParamStore params);

  /// Predicted noise field, same shape as `free_points`. `partial` may be null.
  [[nodiscard]] Points predict_noise(const Points& free_points, const PartialShape* partial, int t) const;
  /// Builds the forward pass on `graph`; returns the output node.
  nn::Graph::Var build(nn::Graph& graph, nn::Graph::Var free_points, const PartialShape* partial, int t) const;

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }
  [[nodiscard]] const std::string& category() const { return category_; }
  [[nodiscard]] const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& mutable_params() { return params_; }

 private:
  void init_params(std::uint64_t seed);

  DenoiserConfig config_;
  std::string category_;
  nn::ParamStore params_;
};

Eigen::RowVectorXd time_embedding(int t, int dim);

/// x_t = (z0, free). `partial` is null for unconditional generation.
struct CompletionState {
  int t = 0;
  Points free;
  std::shared_ptr<const PartialShape> partial;

  [[nodiscard]] Points composite() const;
  [[nodiscard]] Eigen::Index partial_size() const { return partial ? partial->size() : 0; }
};

enum class SamplerKind { ddpm, ddim };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddpm;
  int ddim_steps = 200;
  std::uint64_t seed = 0;
};

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& s);

/// Evenly spaced increasing steps from 1 to T inclusive.
std::vector<int> ddim_subsequence(int T, int steps);
/// The visiting order of a sampler: T..1 for DDPM, the subsequence for DDIM.
std::vector<int> sampler_steps(const NoiseSchedule& schedule, const SamplerConfig& sampler);

/// Seed of the reverse-process Gaussian draw at step t.
std::uint64_t step_noise_seed(std::uint64_t sampler_seed, int t);
/// Initial standard-normal free points for a sampler seed.
Points initial_noise(Eigen::Index k_free, std::uint64_t sampler_seed);

/// Deterministic part of the DDPM reverse step.
Points ddpm_mean(const Points& x_t, const Points& eps_pred, int t, const NoiseSchedule& schedule);

/// One DDPM reverse step t -> t-1; the additive noise is omitted at t = 1.
CompletionState denoise_step(const CompletionState& state, const Denoiser& denoiser, const NoiseSchedule& schedule,
                             std::uint64_t seed);
/// Deterministic DDIM jump from subsequence[position] to subsequence[position-1] (or 0).
CompletionState ddim_step(const CompletionState& state, const Denoiser& denoiser, const NoiseSchedule& schedule,
                          const std::vector<int>& subsequence, std::size_t position);
/// Step target of a sampler move from `t`: t-1 for DDPM, the previous subsequence entry for DDIM.
int previous_step(const std::vector<int>& order, std::size_t index);

/// Unguided completion: returns (z0, x_0) with z0 verbatim in the first rows.
PointCloud complete_shape(const PartialShape& partial, const Denoiser& denoiser, const NoiseSchedule& schedule,
                          const SamplerConfig& sampler, int k_free);
/// Unconditional generation of k points.
PointCloud generate_shape(const Denoiser& denoiser, const NoiseSchedule& schedule, const SamplerConfig& sampler,
                          int k);

struct DenoiserTrainConfig {
  int epochs = 300;
  int batch = 8;
  double lr = 2e-3;
  double lr_final = 2e-4;
  int k_p = 64;
  int k_free = 320;
  int n_views = kDefaultViews;
  std::uint64_t seed = 1;
  int heldout_samples = 64;
  DenoiserConfig model;
};

struct DenoiserTrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> epoch_loss;
};

/// Noise-prediction regression on (z0, remainder) completion pairs, or on whole
/// clouds for an unconditional model. `heldout` supplies the evaluation clouds.
Denoiser train_denoiser(const std::vector<PointCloud>& train, const std::vector<PointCloud>& heldout,
                        const std::string& category, const NoiseSchedule& schedule, const DenoiserTrainConfig& config,
                        DenoiserTrainReport* report = nullptr);

/// Fixed-seed held-out noise-prediction loss.
double heldout_loss(const Denoiser& denoiser, const std::vector<PointCloud>& clouds, const NoiseSchedule& schedule,
                    const DenoiserTrainConfig& config);

void save_denoiser(const std::filesystem::path& path, const Denoiser& denoiser, const NoiseSchedule& schedule,
                   std::uint64_t training_seed);
struct LoadedDenoiser {
  std::shared_ptr<const Denoiser> denoiser;
  NoiseSchedule schedule;
};
LoadedDenoiser load_denoiser(const std::filesystem::path& path);

}  // namespace advshape
