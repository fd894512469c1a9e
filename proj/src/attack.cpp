#include "advshape/attack.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "advshape/rng.hpp"

namespace advshape {

std::string to_string(AttackMode mode) { return mode == AttackMode::completion ? "completion" : "generation"; }

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "completion") return AttackMode::completion;
  if (s == "generation") return AttackMode::generation;
  throw Error("unknown attack mode '" + s + "'");
}

std::string to_string(SuccessRule rule) {
  return rule == SuccessRule::ensemble_argmax ? "ensemble_argmax" : "all_members";
}

SuccessRule success_rule_from_string(const std::string& s) {
  if (s == "ensemble_argmax") return SuccessRule::ensemble_argmax;
  if (s == "all_members") return SuccessRule::all_members;
  throw Error("unknown success rule '" + s + "'");
}

void AttackConfig::validate() const {
  if (n_views < 1) throw Error("attack: n_views must be at least 1");
  if (trials < 1) throw Error("attack: trials must be at least 1");
  if (k_free < 1) throw Error("attack: k_free must be positive");
  if (mode == AttackMode::completion && k_p < 1) throw Error("attack: k_p must be positive");
  if (workers < 1) throw Error("attack: workers must be at least 1");
  guidance.validate(k_free);
}

std::uint64_t view_seed(std::uint64_t master, int view) {
  return derive_seed(master, {0x56494557ULL, static_cast<std::uint64_t>(view)});
}

PartialShape view_partial(const PointCloud& source, int view, const AttackConfig& config) {
  return make_partial_shape(source, view, config.k_p, config.n_views,
                            derive_seed(config.sampler.seed, {0x5041ULL, static_cast<std::uint64_t>(view)}));
}

bool is_success(const EnsembleSpec& ensemble, const Points& cloud, int y, SuccessRule rule, int* pred) {
  // Prediction uses the configured (base) weights, not the per-step adaptive ones.
  const EnsembleForward f(ensemble, cloud);
  const auto fused = fused_scores(f.member_logits(), ensemble.weights, ensemble.mode);
  Eigen::Index arg = 0;
  fused.maxCoeff(&arg);
  if (pred) *pred = static_cast<int>(arg);
  if (rule == SuccessRule::ensemble_argmax) return arg != y;
  for (int p : f.member_predictions())
    if (p == y) return false;
  return true;
}

namespace {

int count_changed(const Points& a, const Points& b) {
  int n = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    if (a(i, 0) != b(i, 0) || a(i, 1) != b(i, 1) || a(i, 2) != b(i, 2)) ++n;
  return n;
}

void check_category(const EnsembleSpec& ensemble, int y, const Denoiser& denoiser) {
  ensemble.validate();
  const auto& names = ensemble.members.front()->class_names;
  if (y < 0 || y >= ensemble.members.front()->num_classes()) throw Error("attack: label out of range");
  if (!names.empty() && names[static_cast<std::size_t>(y)] != denoiser.category())
    throw Error("attack: denoiser category '" + denoiser.category() + "' does not match source class '" +
                names[static_cast<std::size_t>(y)] + "'");
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <class Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

AttackResult assemble(std::string id, int y, std::vector<ViewRecord> views, double seconds) {
  AttackResult r;
  r.source_id = std::move(id);
  r.label = y;
  r.views = std::move(views);
  for (const auto& v : r.views)
    if (v.substitute_success) r.successful_views.push_back(v.view_index);
  r.seconds = seconds;
  return r;
}

}  // namespace

CompletionState guided_sample(CompletionState state, const EnsembleSpec& ensemble, int y, const Denoiser& denoiser,
                              const NoiseSchedule& schedule, const AttackConfig& config, std::uint64_t sampler_seed,
                              std::vector<GuidedStepTrace>* trace) {
  const auto& g = config.guidance;
  if (state.t != schedule.T) throw Error("guided_sample: state must start at t = T");
  const auto order = sampler_steps(schedule, config.sampler);
  const bool ddim = config.sampler.kind == SamplerKind::ddim;
  std::vector<int> seq;
  if (ddim) seq.assign(order.rbegin(), order.rend());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int t = order[i];
    CompletionState benign = ddim ? ddim_step(state, denoiser, schedule, seq, order.size() - 1 - i)
                                  : denoise_step(state, denoiser, schedule, step_noise_seed(sampler_seed, t));
    if (g.a == 0.0 || !g.guided(t, schedule.T)) {
      state = std::move(benign);
      continue;
    }
    const auto field = mu_gradient(ensemble, state, y, g, derive_seed(sampler_seed, {0x4D55ULL, static_cast<std::uint64_t>(t)}));
    const auto sal = saliency_scores(field, state.partial_size(), g.saliency_mode);
    CompletionState next = adversarial_step(state, benign, field, sal, g, schedule);
    if (trace) {
      GuidedStepTrace rec;
      rec.t = t;
      rec.loss_before = ensemble_loss(ensemble, benign.composite(), y);
      rec.loss_after = ensemble_loss(ensemble, next.composite(), y);
      rec.n_changed = count_changed(next.free, benign.free);
      rec.max_dev = linf_distance(next.free, benign.free);
      trace->push_back(rec);
    }
    state = std::move(next);
  }
  return state;
}

AttackResult run_attack(const PointCloud& source, const EnsembleSpec& ensemble, const Denoiser& denoiser,
                        const NoiseSchedule& schedule, const AttackConfig& config) {
  if (config.mode != AttackMode::completion) throw Error("run_attack: config mode must be completion");
  if (!source.label) throw Error("run_attack: source cloud has no label");
  if (!denoiser.config().conditional) throw Error("run_attack: completion needs a conditional denoiser");
  const int y = *source.label;
  check_category(ensemble, y, denoiser);
  config.validate();
  require_finite(source.points, "run_attack source");
  const auto start = std::chrono::steady_clock::now();

  std::vector<ViewRecord> views(static_cast<std::size_t>(config.n_views));
  parallel_for(config.n_views, config.workers, [&](int v) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = view_seed(config.sampler.seed, v);
    CompletionState state;
    state.t = schedule.T;
    state.partial = std::make_shared<const PartialShape>(view_partial(source, v, config));
    state.free = initial_noise(config.k_free, seed);
    ViewRecord& rec = views[static_cast<std::size_t>(v)];
    rec.view_index = v;
    state = guided_sample(std::move(state), ensemble, y, denoiser, schedule, config, seed,
                          config.record_trace ? &rec.trace : nullptr);
    rec.adversarial_cloud = PointCloud(state.composite(), y, source.id + "_view" + std::to_string(v));
    rec.substitute_success = is_success(ensemble, rec.adversarial_cloud.points, y, config.success, &rec.ensemble_pred);
    rec.seconds = seconds_since(t0);
  });
  return assemble(source.id, y, std::move(views), seconds_since(start));
}

AttackResult run_generation_attack(int y, const EnsembleSpec& ensemble, const Denoiser& denoiser,
                                   const NoiseSchedule& schedule, const AttackConfig& config) {
  if (config.mode != AttackMode::generation) throw Error("run_generation_attack: config mode must be generation");
  if (denoiser.config().conditional) throw Error("run_generation_attack: needs an unconditional denoiser");
  check_category(ensemble, y, denoiser);
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::string id = "gen_" + denoiser.category();

  std::vector<ViewRecord> views(static_cast<std::size_t>(config.n_views));
  parallel_for(config.n_views, config.workers, [&](int v) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = view_seed(config.sampler.seed, v);
    CompletionState state;
    state.t = schedule.T;
    state.free = initial_noise(config.k_free, seed);
    ViewRecord& rec = views[static_cast<std::size_t>(v)];
    rec.view_index = v;
    state = guided_sample(std::move(state), ensemble, y, denoiser, schedule, config, seed,
                          config.record_trace ? &rec.trace : nullptr);
    rec.adversarial_cloud = PointCloud(state.free, y, id + "_view" + std::to_string(v));
    rec.substitute_success = is_success(ensemble, rec.adversarial_cloud.points, y, config.success, &rec.ensemble_pred);
    rec.seconds = seconds_since(t0);
  });
  return assemble(id, y, std::move(views), seconds_since(start));
}

PointCloud benign_view(const PointCloud& source, int view, const Denoiser& denoiser, const NoiseSchedule& schedule,
                       const AttackConfig& config) {
  SamplerConfig s = config.sampler;
  s.seed = view_seed(config.sampler.seed, view);
  auto out = complete_shape(view_partial(source, view, config), denoiser, schedule, s, config.k_free);
  out.label = source.label;
  out.id = source.id + "_view" + std::to_string(view);
  return out;
}

PointCloud benign_generation(int y, int view, const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const AttackConfig& config) {
  SamplerConfig s = config.sampler;
  s.seed = view_seed(config.sampler.seed, view);
  auto out = generate_shape(denoiser, schedule, s, config.k_free);
  out.label = y;
  out.id = "gen_" + denoiser.category() + "_view" + std::to_string(view);
  return out;
}

PointCloud pgd_ensemble(const PointCloud& source, const EnsembleSpec& ensemble, double eps, int steps, double step_size,
                        int m_samples, std::uint64_t seed) {
  if (!source.label) throw Error("pgd: source cloud has no label");
  if (!(eps > 0.0)) throw Error("pgd: eps must be positive");
  if (steps < 0) throw Error("pgd: steps must be non-negative");
  const int y = *source.label;
  Points x = source.points;
  for (int s = 0; s < steps; ++s) {
    Points grad;
    if (m_samples > 0) {
      grad = Points::Zero(x.rows(), 3);
      for (int m = 0; m < m_samples; ++m) {
        const auto mask = draw_mask(x.rows(), derive_seed(seed, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(m)}));
        const auto idx = mask.kept_indices();
        const auto g = loss_and_gradient(ensemble, gather_rows(x, idx), y);
        for (std::size_t i = 0; i < idx.size(); ++i) grad.row(idx[i]) += g.grad.row(static_cast<Eigen::Index>(i));
      }
      grad /= static_cast<double>(m_samples);
    } else {
      grad = loss_and_gradient(ensemble, x, y).grad;
    }
    x += step_size * grad.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
    x = linf_clip(x, source.points, eps);
  }
  return PointCloud(std::move(x), source.label, source.id);
}

PointCloud pgd_baseline(const PointCloud& source, const Classifier& classifier, double eps, int steps,
                        double step_size) {
  const ClassifierPtr ptr(std::shared_ptr<const Classifier>{}, &classifier);
  return pgd_ensemble(source, EnsembleSpec::uniform({ptr}), eps, steps, step_size);
}

std::vector<std::string> validate_trace(const std::vector<GuidedStepTrace>& trace, const GuidanceConfig& config,
                                        int T) {
  std::vector<std::string> issues;
  int last_t = T + 1;
  for (const auto& s : trace) {
    const std::string at = "t=" + std::to_string(s.t) + ": ";
    if (!config.guided(s.t, T)) issues.push_back(at + "step outside the guidance window");
    if (s.t >= last_t) issues.push_back(at + "steps not strictly decreasing");
    if (s.n_changed > config.n_points) issues.push_back(at + std::to_string(s.n_changed) + " points changed");
    if (!(s.max_dev <= config.eps)) issues.push_back(at + "deviation " + std::to_string(s.max_dev) + " exceeds eps");
    last_t = s.t;
  }
  return issues;
}

void write_trace_jsonl(const std::filesystem::path& path, const std::vector<GuidedStepTrace>& trace) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& s : trace) {
    const nlohmann::json j = {{"t", s.t},
                              {"loss_before", s.loss_before},
                              {"loss_after", s.loss_after},
                              {"n_changed", s.n_changed},
                              {"max_dev", s.max_dev}};
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
  }
}

std::vector<GuidedStepTrace> read_trace_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<GuidedStepTrace> trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    GuidedStepTrace s;
    s.t = j.at("t").get<int>();
    s.loss_before = j.at("loss_before").get<double>();
    s.loss_after = j.at("loss_after").get<double>();
    s.n_changed = j.at("n_changed").get<int>();
    s.max_dev = j.at("max_dev").get<double>();
    trace.push_back(s);
  }
  return trace;
}

}  // namespace advshape
