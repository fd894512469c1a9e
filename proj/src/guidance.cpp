#include "advshape/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "advshape/rng.hpp"

namespace advshape {

std::string to_string(SaliencyMode mode) { return mode == SaliencyMode::magnitude ? "magnitude" : "signed"; }

SaliencyMode saliency_mode_from_string(const std::string& s) {
  if (s == "magnitude") return SaliencyMode::magnitude;
  if (s == "signed" || s == "sign") return SaliencyMode::sign;
  throw Error("unknown saliency mode '" + s + "'");
}

std::string to_string(GuidanceDirection d) { return d == GuidanceDirection::gradient ? "gradient" : "sign"; }

GuidanceDirection guidance_direction_from_string(const std::string& s) {
  if (s == "gradient") return GuidanceDirection::gradient;
  if (s == "sign") return GuidanceDirection::sign;
  throw Error("unknown guidance direction '" + s + "'");
}

void GuidanceConfig::validate(Eigen::Index k_free) const {
  if (!(a >= 0.0 && a < 1.0)) throw Error("guidance: a must lie in [0, 1)");
  if (!(t_adv_fraction > 0.0 && t_adv_fraction <= 1.0)) throw Error("guidance: t_adv_fraction must lie in (0, 1]");
  if (n_points < 1 || n_points > k_free) throw Error("guidance: need 1 <= N <= free-point count");
  if (m_samples < 1) throw Error("guidance: M must be at least 1");
  if (!(eps > 0.0)) throw Error("guidance: eps must be positive");
}

bool GuidanceConfig::guided(int t, int T) const {
  return t >= 1 && static_cast<double>(t) <= t_adv_fraction * static_cast<double>(T);
}

GradientField mu_gradient_with_masks(const EnsembleSpec& ensemble, const CompletionState& state, int y,
                                     const GuidanceConfig& config, const std::vector<SampleMask>& masks) {
  if (masks.empty()) throw Error("mu_gradient: need at least one mask");
  const Eigen::Index kp = state.partial_size();
  const Eigen::Index kf = state.free.rows();
  const Points z0 = state.partial ? state.partial->points() : Points(0, 3);

  std::vector<Points> clouds;
  std::vector<std::vector<Eigen::Index>> kept;
  for (const auto& mask : masks) {
    if (static_cast<Eigen::Index>(mask.keep.size()) != kf) throw Error("mu_gradient: mask length mismatch");
    kept.push_back(mask.kept_indices());
    clouds.push_back(concat_rows(z0, gather_rows(state.free, kept.back())));
  }

  std::vector<EnsembleForward> forwards;
  forwards.reserve(clouds.size());
  for (const auto& c : clouds) forwards.emplace_back(ensemble, c);

  std::vector<double> weights = ensemble.weights;
  if (config.adaptive_weights && ensemble.size() > 1) {
    std::vector<int> correct(ensemble.size(), 0);
    for (const auto& f : forwards) {
      const auto preds = f.member_predictions();
      for (std::size_t n = 0; n < preds.size(); ++n)
        if (preds[n] == y) ++correct[n];
    }
    const int n_clouds = static_cast<int>(clouds.size());
    weights = adaptive_weights(correct, n_clouds, config.kappa_fraction * n_clouds);
  }

  GradientField out;
  out.grad = Points::Zero(kp + kf, 3);
  // Fixed summation order keeps the mean independent of evaluation order.
  for (std::size_t s = 0; s < forwards.size(); ++s) {
    const auto g = forwards[s].loss_and_gradient(weights, y, ensemble.mode);
    out.loss += g.loss;
    out.grad.topRows(kp) += g.grad.topRows(kp);
    const auto& idx = kept[s];
    for (std::size_t i = 0; i < idx.size(); ++i) out.grad.row(kp + idx[i]) += g.grad.row(kp + static_cast<Eigen::Index>(i));
  }
  const double inv = 1.0 / static_cast<double>(forwards.size());
  out.grad *= inv;
  out.loss *= inv;
  return out;
}

GradientField mu_gradient(const EnsembleSpec& ensemble, const CompletionState& state, int y,
                          const GuidanceConfig& config, std::uint64_t seed) {
  std::vector<SampleMask> masks;
  const Eigen::Index kf = state.free.rows();
  if (!config.use_mu) {
    SampleMask all;
    all.keep.assign(static_cast<std::size_t>(kf), 1);
    masks.push_back(std::move(all));
  } else {
    for (int m = 0; m < config.m_samples; ++m)
      masks.push_back(draw_mask(kf, derive_seed(seed, {static_cast<std::uint64_t>(m)})));
  }
  return mu_gradient_with_masks(ensemble, state, y, config, masks);
}

SaliencyMap saliency_scores(const GradientField& grad, Eigen::Index partial_size, SaliencyMode mode) {
  const Eigen::Index kf = grad.grad.rows() - partial_size;
  if (kf < 0) throw Error("saliency_scores: gradient smaller than partial block");
  SaliencyMap s;
  s.scores = grad.grad.bottomRows(kf).rowwise().sum();
  s.rank.resize(static_cast<std::size_t>(kf));
  std::iota(s.rank.begin(), s.rank.end(), Eigen::Index{0});
  const auto& sc = s.scores;
  if (mode == SaliencyMode::magnitude)
    std::stable_sort(s.rank.begin(), s.rank.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return std::abs(sc[a]) > std::abs(sc[b]); });
  else
    std::stable_sort(s.rank.begin(), s.rank.end(), [&](Eigen::Index a, Eigen::Index b) { return sc[a] > sc[b]; });
  return s;
}

SaliencyMap saliency_scores(const EnsembleSpec& ensemble, const CompletionState& state, int y, SaliencyMode mode) {
  return saliency_scores(loss_and_gradient(ensemble, state.composite(), y), state.partial_size(), mode);
}

double step_beta(const NoiseSchedule& schedule, int t, int t_prev) {
  if (t_prev == t - 1) return schedule.beta.at(static_cast<std::size_t>(t));
  return 1.0 - schedule.alpha_bar.at(static_cast<std::size_t>(t)) / schedule.alpha_bar.at(static_cast<std::size_t>(t_prev));
}

CompletionState adversarial_step(const CompletionState& state, const CompletionState& benign_next,
                                 const GradientField& grad, const SaliencyMap& saliency, const GuidanceConfig& config,
                                 const NoiseSchedule& schedule) {
  const Eigen::Index kp = state.partial_size();
  const Eigen::Index kf = benign_next.free.rows();
  if (grad.grad.rows() != kp + kf) throw Error("adversarial_step: gradient does not match composite cloud");
  if (static_cast<Eigen::Index>(saliency.rank.size()) != kf) throw Error("adversarial_step: saliency length mismatch");
  CompletionState out = benign_next;
  if (config.a == 0.0) return out;
  const double scale = config.a * step_beta(schedule, state.t, benign_next.t);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(config.n_points), saliency.rank.size());
  for (std::size_t r = 0; r < n; ++r) {
    const Eigen::Index i = saliency.rank[r];
    if (config.direction == GuidanceDirection::gradient)
      out.free.row(i) += scale * grad.grad.row(kp + i);
    else
      out.free.row(i) += scale * grad.grad.row(kp + i).unaryExpr([](double v) { return double((v > 0.0) - (v < 0.0)); });
  }
  out.free = linf_clip(out.free, benign_next.free, config.eps);
  return out;
}

}  // namespace advshape
