#include "advshape/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "advshape/checkpoint.hpp"
#include "advshape/log.hpp"
#include "advshape/rng.hpp"

namespace advshape {

double NoiseSchedule::sigma(int t) const { return std::sqrt(beta.at(static_cast<std::size_t>(t))); }

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 2) throw Error("make_schedule: T must be at least 2");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw Error("make_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  if (s.alpha_bar.back() >= 0.01)
    log_info("make_schedule: alpha_bar[T] = " + std::to_string(s.alpha_bar.back()) + " (not fully noised)");
  return s;
}

Points standard_normal(Eigen::Index rows, std::uint64_t seed) {
  Rng rng(seed);
  Points p(rows, 3);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = rng.normal();
  return p;
}

Points forward_diffuse(const Points& x0, int t, const NoiseSchedule& schedule, std::uint64_t seed) {
  if (t < 1 || t > schedule.T) throw Error("forward_diffuse: t out of range");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * standard_normal(x0.rows(), seed);
}

Points forward_step(const Points& x_prev, int t, const NoiseSchedule& schedule, std::uint64_t seed) {
  if (t < 1 || t > schedule.T) throw Error("forward_step: t out of range");
  const double b = schedule.beta[static_cast<std::size_t>(t)];
  return std::sqrt(1.0 - b) * x_prev + std::sqrt(b) * standard_normal(x_prev.rows(), seed);
}

Eigen::RowVectorXd time_embedding(int t, int dim) {
  Eigen::RowVectorXd e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(static_cast<double>(t) * freq);
    e[i + half] = std::cos(static_cast<double>(t) * freq);
  }
  if (dim % 2 == 1) e[dim - 1] = static_cast<double>(t) / 1000.0;
  return e;
}

Denoiser::Denoiser(DenoiserConfig config, std::string category, std::uint64_t seed)
    : config_(config), category_(std::move(category)) {
  init_params(seed);
}

Denoiser::Denoiser(DenoiserConfig config, std::string category, nn::ParamStore params)
    : config_(config), category_(std::move(category)), params_(std::move(params)) {}

void Denoiser::init_params(std::uint64_t seed) {
  const auto& c = config_;
  auto layer = [&](const std::string& name, int in, int out) {
    params_.add(name + ".w", in, out, seed);
    params_.add_zero(name + ".b", 1, out);
  };
  layer("point1", 3, c.point_hidden);
  layer("point2", c.point_hidden, c.feature);
  if (c.conditional) {
    layer("partial1", 3, c.point_hidden);
    layer("partial2", c.point_hidden, c.feature);
  }
  const int ctx_in = 2 * c.feature + (c.conditional ? 2 * c.feature : 0) + c.time_dim;
  layer("ctx1", ctx_in, c.context);
  layer("ctx2", c.context, c.head);
  layer("fuse", c.feature, c.head);
  layer("head1", c.head, c.head);
  layer("head2", c.head, c.head);
  layer("out", c.head, 3);
}

nn::Graph::Var Denoiser::build(nn::Graph& g, nn::Graph::Var x, const PartialShape* partial, int t) const {
  const auto& c = config_;
  const Eigen::Index n = g.value(x).rows();
  auto h = g.relu(g.linear(x, params_, "point1"));
  h = g.relu(g.linear(h, params_, "point2"));
  auto ctx = g.concat_cols(g.max_rows(h), g.mean_rows(h));
  if (c.conditional) {
    nn::Graph::Var d;
    if (partial != nullptr && partial->size() > 0) {
      auto z = g.input(partial->points());
      z = g.relu(g.linear(z, params_, "partial1"));
      z = g.relu(g.linear(z, params_, "partial2"));
      d = g.concat_cols(g.max_rows(z), g.mean_rows(z));
    } else {
      d = g.input(nn::Mat::Zero(1, 2 * c.feature));
    }
    ctx = g.concat_cols(ctx, d);
  }
  ctx = g.concat_cols(ctx, g.input(time_embedding(t, c.time_dim)));
  auto cvec = g.linear(g.relu(g.linear(ctx, params_, "ctx1")), params_, "ctx2");
  auto f = g.relu(g.add(g.linear(h, params_, "fuse"), g.broadcast_rows(cvec, n)));
  f = g.relu(g.linear(f, params_, "head1"));
  f = g.relu(g.linear(f, params_, "head2"));
  return g.linear(f, params_, "out");
}

Points Denoiser::predict_noise(const Points& free_points, const PartialShape* partial, int t) const {
  if (free_points.rows() == 0) return Points(0, 3);
  nn::Graph g;
  const auto x = g.input(free_points);
  return g.value(build(g, x, partial, t));
}

Points CompletionState::composite() const {
  return partial ? concat_rows(partial->points(), free) : free;
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::ddpm ? "ddpm" : "ddim"; }

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "ddpm") return SamplerKind::ddpm;
  if (s == "ddim") return SamplerKind::ddim;
  throw Error("unknown sampler '" + s + "' (expected ddpm or ddim)");
}

std::vector<int> ddim_subsequence(int T, int steps) {
  if (steps < 2 || steps > T) throw Error("ddim_subsequence: need 2 <= steps <= T");
  std::vector<int> seq(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i)
    seq[static_cast<std::size_t>(i)] =
        1 + static_cast<int>(std::llround(static_cast<double>(i) * (T - 1) / static_cast<double>(steps - 1)));
  for (std::size_t i = 1; i < seq.size(); ++i)
    if (seq[i] <= seq[i - 1]) throw Error("ddim_subsequence: subsequence not strictly increasing");
  return seq;
}

std::vector<int> sampler_steps(const NoiseSchedule& schedule, const SamplerConfig& sampler) {
  std::vector<int> order;
  if (sampler.kind == SamplerKind::ddpm) {
    order.resize(static_cast<std::size_t>(schedule.T));
    std::iota(order.rbegin(), order.rend(), 1);
  } else {
    order = ddim_subsequence(schedule.T, sampler.ddim_steps);
    std::reverse(order.begin(), order.end());
  }
  return order;
}

int previous_step(const std::vector<int>& order, std::size_t index) {
  return index + 1 < order.size() ? order[index + 1] : 0;
}

std::uint64_t step_noise_seed(std::uint64_t sampler_seed, int t) {
  return derive_seed(sampler_seed, {0x5157ULL, static_cast<std::uint64_t>(t)});
}

Points initial_noise(Eigen::Index k_free, std::uint64_t sampler_seed) {
  return standard_normal(k_free, derive_seed(sampler_seed, {0x1A17ULL}));
}

Points ddpm_mean(const Points& x_t, const Points& eps_pred, int t, const NoiseSchedule& schedule) {
  const auto i = static_cast<std::size_t>(t);
  const double a = schedule.alpha[i];
  const double coef = (1.0 - a) / std::sqrt(1.0 - schedule.alpha_bar[i]);
  return (x_t - coef * eps_pred) / std::sqrt(a);
}

CompletionState denoise_step(const CompletionState& state, const Denoiser& denoiser, const NoiseSchedule& schedule,
                             std::uint64_t seed) {
  if (state.t < 1 || state.t > schedule.T) throw Error("denoise_step: t out of range");
  const Points eps = denoiser.predict_noise(state.free, state.partial.get(), state.t);
  CompletionState next;
  next.t = state.t - 1;
  next.partial = state.partial;
  next.free = ddpm_mean(state.free, eps, state.t, schedule);
  if (state.t > 1) next.free += schedule.sigma(state.t) * standard_normal(state.free.rows(), seed);
  return next;
}

CompletionState ddim_step(const CompletionState& state, const Denoiser& denoiser, const NoiseSchedule& schedule,
                          const std::vector<int>& subsequence, std::size_t position) {
  if (position >= subsequence.size() || subsequence[position] != state.t)
    throw Error("ddim_step: current t is not at the given subsequence position");
  const int t_prev = position > 0 ? subsequence[position - 1] : 0;
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(state.t)];
  const double ab_prev = schedule.alpha_bar[static_cast<std::size_t>(t_prev)];
  const Points eps = denoiser.predict_noise(state.free, state.partial.get(), state.t);
  const Points x0_hat = (state.free - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
  CompletionState next;
  next.t = t_prev;
  next.partial = state.partial;
  next.free = std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps;
  return next;
}

namespace {

CompletionState run_sampler(CompletionState state, const Denoiser& denoiser, const NoiseSchedule& schedule,
                            const SamplerConfig& sampler) {
  if (sampler.kind == SamplerKind::ddpm) {
    while (state.t > 0) state = denoise_step(state, denoiser, schedule, step_noise_seed(sampler.seed, state.t));
    return state;
  }
  const auto seq = ddim_subsequence(schedule.T, sampler.ddim_steps);
  for (std::size_t p = seq.size(); p-- > 0;) state = ddim_step(state, denoiser, schedule, seq, p);
  return state;
}

}  // namespace

PointCloud complete_shape(const PartialShape& partial, const Denoiser& denoiser, const NoiseSchedule& schedule,
                          const SamplerConfig& sampler, int k_free) {
  if (sampler.kind == SamplerKind::ddim) (void)ddim_subsequence(schedule.T, sampler.ddim_steps);
  CompletionState state;
  state.t = schedule.T;
  state.partial = std::make_shared<const PartialShape>(partial);
  state.free = initial_noise(k_free, sampler.seed);
  state = run_sampler(std::move(state), denoiser, schedule, sampler);
  return PointCloud(state.composite(), std::nullopt, partial.source_id());
}

PointCloud generate_shape(const Denoiser& denoiser, const NoiseSchedule& schedule, const SamplerConfig& sampler,
                          int k) {
  CompletionState state;
  state.t = schedule.T;
  state.free = initial_noise(k, sampler.seed);
  state = run_sampler(std::move(state), denoiser, schedule, sampler);
  return PointCloud(state.free);
}

namespace {

struct TrainingPair {
  std::shared_ptr<const PartialShape> partial;
  Points x0;
};

TrainingPair make_pair(const PointCloud& cloud, const DenoiserTrainConfig& cfg, bool conditional, Rng& rng) {
  TrainingPair pair;
  const Eigen::Index n = cloud.size();
  std::vector<Eigen::Index> remainder;
  if (conditional) {
    const int view = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.n_views)));
    const auto idx = partial_shape_indices(cloud, view, cfg.k_p, cfg.n_views, rng.engine()());
    std::vector<std::uint8_t> taken(static_cast<std::size_t>(n), 0);
    for (auto i : idx) taken[static_cast<std::size_t>(i)] = 1;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!taken[static_cast<std::size_t>(i)]) remainder.push_back(i);
    pair.partial = std::make_shared<const PartialShape>(gather_rows(cloud.points, idx), cloud.id, view);
  } else {
    remainder.resize(static_cast<std::size_t>(n));
    std::iota(remainder.begin(), remainder.end(), Eigen::Index{0});
  }
  const std::size_t want = static_cast<std::size_t>(conditional ? cfg.k_free : cfg.k_free + cfg.k_p);
  if (remainder.size() < want) throw Error("train_denoiser: cloud '" + cloud.id + "' has too few points");
  std::shuffle(remainder.begin(), remainder.end(), rng.engine());
  remainder.resize(want);
  pair.x0 = gather_rows(cloud.points, remainder);
  return pair;
}

void require_normalized(const std::vector<PointCloud>& clouds) {
  for (const auto& c : clouds) {
    const double centroid = c.points.colwise().mean().norm();
    const double radius = c.points.rowwise().norm().maxCoeff();
    if (centroid > 1e-6 || std::abs(radius - 1.0) > 1e-6)
      throw Error("train_denoiser: cloud '" + c.id + "' is not normalized");
  }
}

double sample_loss(const Denoiser& d, const TrainingPair& pair, int t, const Points& noise, const NoiseSchedule& s,
                   nn::ParamGrads* grads) {
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const Points xt = std::sqrt(ab) * pair.x0 + std::sqrt(1.0 - ab) * noise;
  nn::Graph g(grads != nullptr);
  const auto x = g.input(xt);
  const auto out = d.build(g, x, pair.partial.get(), t);
  const Points diff = g.value(out) - noise;
  const double loss = diff.squaredNorm() / static_cast<double>(diff.size());
  if (grads != nullptr) {
    g.backward(out, diff * (2.0 / static_cast<double>(diff.size())));
    g.collect_param_grads(*grads);
  }
  return loss;
}

}  // namespace

double heldout_loss(const Denoiser& denoiser, const std::vector<PointCloud>& clouds, const NoiseSchedule& schedule,
                    const DenoiserTrainConfig& config) {
  if (clouds.empty()) throw Error("heldout_loss: no clouds");
  Rng rng(0x4E1D0u);
  double total = 0.0;
  for (int i = 0; i < config.heldout_samples; ++i) {
    const auto& cloud = clouds[static_cast<std::size_t>(i) % clouds.size()];
    const auto pair = make_pair(cloud, config, denoiser.config().conditional, rng);
    const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.T)));
    const Points noise = standard_normal(pair.x0.rows(), rng.engine()());
    total += sample_loss(denoiser, pair, t, noise, schedule, nullptr);
  }
  return total / config.heldout_samples;
}

Denoiser train_denoiser(const std::vector<PointCloud>& train, const std::vector<PointCloud>& heldout,
                        const std::string& category, const NoiseSchedule& schedule, const DenoiserTrainConfig& config,
                        DenoiserTrainReport* report) {
  if (train.empty()) throw Error("train_denoiser: empty dataset");
  require_normalized(train);
  const auto& eval_set = heldout.empty() ? train : heldout;
  Denoiser d(config.model, category, derive_seed(config.seed, {0xD0}));
  DenoiserTrainReport rep;
  rep.initial_heldout_loss = heldout_loss(d, eval_set, schedule, config);
  nn::Adam opt(d.params(), config.lr);
  Rng rng(derive_seed(config.seed, {0x7A}));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double frac = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 1.0;
    opt.set_lr(config.lr * std::pow(config.lr_final / config.lr, frac));
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
      auto grads = nn::zero_grads(d.params());
      for (std::size_t k = start; k < end; ++k) {
        const auto pair = make_pair(train[order[k]], config, config.model.conditional, rng);
        const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.T)));
        const Points noise = standard_normal(pair.x0.rows(), rng.engine()());
        epoch_total += sample_loss(d, pair, t, noise, schedule, &grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm2 = 0.0;
      for (auto& gm : grads) {
        gm *= inv;
        norm2 += gm.squaredNorm();
      }
      const double norm = std::sqrt(norm2);
      if (norm > 1.0)
        for (auto& gm : grads) gm /= norm;
      opt.step(d.mutable_params(), grads);
    }
    rep.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
  }
  d.mutable_params().quantize_to_float();
  rep.final_heldout_loss = heldout_loss(d, eval_set, schedule, config);
  if (report != nullptr) *report = rep;
  return d;
}

void save_denoiser(const std::filesystem::path& path, const Denoiser& denoiser, const NoiseSchedule& schedule,
                   std::uint64_t training_seed) {
  const auto& c = denoiser.config();
  nlohmann::json h;
  h["kind"] = "denoiser";
  h["category"] = denoiser.category();
  h["training_seed"] = training_seed;
  h["architecture"] = {{"conditional", c.conditional}, {"point_hidden", c.point_hidden}, {"feature", c.feature},
                       {"context", c.context},         {"head", c.head},                 {"time_dim", c.time_dim}};
  h["schedule"] = {{"T", schedule.T}, {"beta_min", schedule.beta[1]}, {"beta_max", schedule.beta.back()}};
  save_checkpoint(path, h, denoiser.params());
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "denoiser") throw Error(path.string() + ": not a denoiser checkpoint");
  const auto& a = ck.header.at("architecture");
  DenoiserConfig c;
  c.conditional = a.at("conditional").get<bool>();
  c.point_hidden = a.at("point_hidden").get<int>();
  c.feature = a.at("feature").get<int>();
  c.context = a.at("context").get<int>();
  c.head = a.at("head").get<int>();
  c.time_dim = a.at("time_dim").get<int>();
  const auto& s = ck.header.at("schedule");
  LoadedDenoiser out;
  out.schedule = make_schedule(s.at("T").get<int>(), s.at("beta_min").get<double>(), s.at("beta_max").get<double>());
  out.denoiser = std::make_shared<const Denoiser>(c, ck.header.at("category").get<std::string>(), std::move(ck.params));
  return out;
}

}  // namespace advshape
