#include <numeric>
#include <cmath>
#include <memory>

#include "advshape/dataset.hpp"
#include "advshape/diffusion.hpp"
#include "helpers.hpp"

using namespace advshape;

namespace {

DenoiserConfig tiny_config(bool conditional = true) {
  DenoiserConfig c;
  c.conditional = conditional;
  c.point_hidden = 8;
  c.feature = 12;
  c.context = 16;
  c.head = 12;
  c.time_dim = 8;
  return c;
}

Denoiser zero_output(Denoiser d) {
  auto& store = d.mutable_params();
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store[i].name.rfind("out.", 0) == 0) store[i].value.setZero();
  return d;
}

std::shared_ptr<const PartialShape> some_partial(std::uint64_t seed, Eigen::Index k = 16) {
  return std::make_shared<const PartialShape>(testing::random_points(k, seed), "src", 0);
}

struct MomentAccumulator {
  double sum = 0.0, sq = 0.0;
  long n = 0;
  void add(double v) {
    sum += v;
    sq += v * v;
    ++n;
  }
  [[nodiscard]] double mean() const { return sum / double(n); }
  [[nodiscard]] double var() const { return sq / double(n) - mean() * mean(); }
};

}  // namespace

TEST_SUITE("diffusion") {
  TEST_CASE("linear schedule bounds and consistency") {
    const auto s = make_schedule(1000);
    CHECK(s.T == 1000);
    CHECK(s.beta[1] == doctest::Approx(1e-4));
    CHECK(s.beta[1000] == doctest::Approx(0.02));
    double prod = 1.0;
    for (int t = 1; t <= 1000; ++t) {
      CHECK(s.beta[t] > 0.0);
      CHECK(s.beta[t] < 1.0);
      if (t > 1) CHECK(s.beta[t] >= s.beta[t - 1]);
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      prod *= 1.0 - s.beta[t];
      CHECK(std::abs(s.alpha_bar[t] - prod) < 1e-12);
      CHECK(s.sigma(t) * s.sigma(t) == doctest::Approx(s.beta[t]).epsilon(1e-12));
    }
    CHECK(s.alpha_bar[1000] < 1e-4);
  }

  TEST_CASE("constant beta gives a geometric alpha_bar") {
    const double c = 0.01;
    const auto s = make_schedule(50, c, c);
    for (int t = 1; t <= 50; ++t) CHECK(s.alpha_bar[t] == doctest::Approx(std::pow(1 - c, t)).epsilon(1e-13));
  }

  TEST_CASE("forward diffusion at T has the closed-form variance") {
    const auto s = make_schedule(1000);
    const Points x0 = testing::random_points(4, 1);
    MomentAccumulator acc;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
      const Points d = forward_diffuse(x0, 1000, s, seed) - std::sqrt(s.alpha_bar[1000]) * x0;
      for (Eigen::Index i = 0; i < d.size(); ++i) acc.add(d.data()[i]);
    }
    CHECK(acc.var() == doctest::Approx(1.0 - s.alpha_bar[1000]).epsilon(0.03));
  }

  TEST_CASE("zero-noise limit returns x0") {
    auto s = make_schedule(10);
    s.alpha_bar[3] = 1.0;
    const Points x0 = testing::random_points(5, 2);
    CHECK(bit_identical(forward_diffuse(x0, 3, s, 7), x0));
  }

  TEST_CASE("chained single steps match the closed form in distribution") {
    const auto s = make_schedule(50);
    Points x0(8, 3);
    x0.setConstant(0.7);
    MomentAccumulator chain, closed;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
      Points x = x0;
      for (int t = 1; t <= 10; ++t) x = forward_step(x, t, s, derive_seed(seed, {std::uint64_t(t)}));
      const Points y = forward_diffuse(x0, 10, s, derive_seed(seed, {999}));
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        chain.add(x.data()[i]);
        closed.add(y.data()[i]);
      }
    }
    CHECK(chain.mean() == doctest::Approx(closed.mean()).epsilon(0.01));
    CHECK(chain.var() == doctest::Approx(closed.var()).epsilon(0.01));
    CHECK(closed.mean() == doctest::Approx(0.7 * std::sqrt(s.alpha_bar[10])).epsilon(0.01));
  }

  TEST_CASE("DDIM subsequence is evenly spaced from 1 to T") {
    const auto seq = ddim_subsequence(1000, 200);
    REQUIRE(seq.size() == 200);
    CHECK(seq.front() == 1);
    CHECK(seq.back() == 1000);
    for (int i = 0; i < 200; ++i) CHECK(seq[i] == 1 + static_cast<int>(std::llround(i * 999.0 / 199.0)));
    const auto full = ddim_subsequence(1000, 1000);
    for (int i = 0; i < 1000; ++i) CHECK(full[i] == i + 1);
    CHECK_THROWS_AS(ddim_subsequence(10, 1), Error);
  }

  TEST_CASE("reverse mean matches a hand-derived 3-point evaluation") {
    const auto s = make_schedule(100);
    Points x(3, 3), eps(3, 3);
    x << 0.1, -0.2, 0.3, 1.0, 0.5, -0.5, -1.0, 0.0, 0.25;
    eps << 0.3, 0.1, -0.2, -0.4, 0.2, 0.9, 0.05, -0.6, 0.0;
    const int t = 37;
    const double beta = 1e-4 + (0.02 - 1e-4) * 36.0 / 99.0;
    double ab = 1.0;
    for (int k = 1; k <= t; ++k) ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) / 99.0);
    const Points mean = ddpm_mean(x, eps, t, s);
    for (Eigen::Index i = 0; i < 3; ++i)
      for (int c = 0; c < 3; ++c) {
        const double want = (x(i, c) - beta / std::sqrt(1.0 - ab) * eps(i, c)) / std::sqrt(1.0 - beta);
        CHECK(std::abs(mean(i, c) - want) < 1e-10);
      }
  }

  TEST_CASE("identity step with zero noise prediction is a fixed point") {
    NoiseSchedule s;
    s.T = 2;
    s.beta = {0.0, 0.0, 0.0};
    s.alpha = {1.0, 1.0, 1.0};
    s.alpha_bar = {1.0, 0.5, 0.25};
    const Points x = testing::random_points(5, 3);
    CHECK(bit_identical(ddpm_mean(x, Points::Zero(5, 3), 1, s), x));
  }

  TEST_CASE("denoiser inference is deterministic and conditioning is live") {
    const Denoiser d(tiny_config(), "sphere", 4);
    const Points free = testing::random_points(20, 5);
    const auto partial = some_partial(6);
    const Points a = d.predict_noise(free, partial.get(), 500);
    CHECK(a.rows() == 20);
    CHECK(a.cols() == 3);
    CHECK(bit_identical(a, d.predict_noise(free, partial.get(), 500)));
    CHECK_FALSE(bit_identical(a, d.predict_noise(free, nullptr, 500)));
    CHECK_FALSE(bit_identical(a, d.predict_noise(free, partial.get(), 501)));
  }

  TEST_CASE("final reverse step adds no noise") {
    const auto s = make_schedule(100);
    const Denoiser d(tiny_config(), "box", 7);
    CompletionState st;
    st.t = 1;
    st.free = testing::random_points(10, 8);
    st.partial = some_partial(9);
    const auto a = denoise_step(st, d, s, 1), b = denoise_step(st, d, s, 2);
    CHECK(bit_identical(a.free, b.free));
    const Points eps = d.predict_noise(st.free, st.partial.get(), 1);
    CHECK(bit_identical(a.free, ddpm_mean(st.free, eps, 1, s)));
    st.t = 2;
    CHECK_FALSE(bit_identical(denoise_step(st, d, s, 1).free, denoise_step(st, d, s, 2).free));
  }

  TEST_CASE("partial block stays bit-identical through a full trajectory") {
    const auto s = make_schedule(1000);
    const Denoiser d(tiny_config(), "cone", 10);
    const auto partial = some_partial(11);
    SamplerConfig sampler;
    sampler.seed = 12;
    const auto out = complete_shape(*partial, d, s, sampler, 24);
    CHECK(out.size() == 40);
    CHECK(bit_identical(out.points.topRows(16), partial->points()));
    CHECK(bit_identical(out.points, complete_shape(*partial, d, s, sampler, 24).points));
    sampler.kind = SamplerKind::ddim;
    const auto fast = complete_shape(*partial, d, s, sampler, 24);
    CHECK(bit_identical(fast.points.topRows(16), partial->points()));
  }

  TEST_CASE("DDIM jump matches its closed form") {
    const auto s = make_schedule(1000);
    const Denoiser d(tiny_config(), "torus", 13);
    const auto seq = ddim_subsequence(1000, 200);
    CompletionState st;
    st.t = seq[100];
    st.free = testing::random_points(12, 14);
    st.partial = some_partial(15);
    const auto next = ddim_step(st, d, s, seq, 100);
    CHECK(next.t == seq[99]);
    const Points eps = d.predict_noise(st.free, st.partial.get(), st.t);
    const double ab = s.alpha_bar[st.t], abp = s.alpha_bar[seq[99]];
    const Points want = std::sqrt(abp / ab) * st.free + (std::sqrt(1 - abp) - std::sqrt(abp * (1 - ab) / ab)) * eps;
    CHECK((next.free - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("full-sequence DDIM agrees with the DDPM mean where the two maps coincide") {
    const auto s = make_schedule(1000);
    const auto full = ddim_subsequence(1000, 1000);
    // With a zero noise prediction both maps reduce to x_t / sqrt(alpha_t): whole trajectories agree.
    const Denoiser zero = zero_output(Denoiser(tiny_config(), "sphere", 16));
    CompletionState a;
    a.t = 1000;
    a.free = testing::random_points(10, 17);
    a.partial = some_partial(18);
    CompletionState b = a;
    for (std::size_t pos = full.size(); pos-- > 0;) {
      a = ddim_step(a, zero, s, full, pos);
      b.free = ddpm_mean(b.free, Points::Zero(10, 3), b.t, s);
      b.t -= 1;
    }
    CHECK((a.free - b.free).cwiseAbs().maxCoeff() < 1e-8 * std::max(1.0, b.free.cwiseAbs().maxCoeff()));
    // At t = 1 they agree for any denoiser.
    const Denoiser d(tiny_config(), "sphere", 19);
    CompletionState c;
    c.t = 1;
    c.free = testing::random_points(10, 20);
    c.partial = some_partial(21);
    const Points eps = d.predict_noise(c.free, c.partial.get(), 1);
    CHECK((ddim_step(c, d, s, full, 0).free - ddpm_mean(c.free, eps, 1, s)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("at interior steps the DDIM noise coefficient is about half the DDPM one") {
    const auto s = make_schedule(1000);
    for (int t : {50, 200, 600}) {
      const double a = s.alpha[t], ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
      const double ddim = std::sqrt(1 - abp) - std::sqrt(1 - ab) / std::sqrt(a);
      const double ddpm = -(1 - a) / (std::sqrt(a) * std::sqrt(1 - ab));
      CHECK(ddim / ddpm == doctest::Approx(0.5).epsilon(0.05));
    }
  }

  TEST_CASE("training reduces held-out noise-prediction loss") {
    SyntheticSpec spec;
    spec.train_per_class = {500};
    spec.test_per_class = 16;
    spec.points = 160;
    const auto ds = make_synthetic_dataset(spec);
    DenoiserTrainConfig cfg;
    cfg.epochs = 16;
    cfg.k_p = 32;
    cfg.k_free = 64;
    cfg.heldout_samples = 32;
    cfg.lr = 3e-3;
    cfg.model = tiny_config();
    cfg.model.point_hidden = 16;
    cfg.model.feature = 32;
    cfg.model.context = 32;
    cfg.model.head = 32;
    const auto s = make_schedule(200);
    DenoiserTrainReport rep;
    const auto d = train_denoiser(ds.train_of(0), ds.test_of(0), "sphere", s, cfg, &rep);
    CHECK(rep.final_heldout_loss < 0.7 * rep.initial_heldout_loss);
    REQUIRE(rep.epoch_loss.size() == 16);
    // Per-epoch losses are noisy in the sampled timesteps; compare 4-epoch means.
    auto block = [&](int first) {
      return std::accumulate(rep.epoch_loss.begin() + first, rep.epoch_loss.begin() + first + 4, 0.0) / 4.0;
    };
    CHECK(block(6) < block(0));
    CHECK(block(12) < block(6));

    const auto dir = testing::temp_dir("denoiser_ck");
    save_denoiser(dir / "d.ck", d, s, 1);
    const auto back = load_denoiser(dir / "d.ck");
    CHECK(back.denoiser->category() == "sphere");
    CHECK(back.schedule.T == 200);
    const Points free = testing::random_points(64, 22);
    const auto partial = some_partial(23, 32);
    CHECK(bit_identical(back.denoiser->predict_noise(free, partial.get(), 17),
                        d.predict_noise(free, partial.get(), 17)));
  }
}
