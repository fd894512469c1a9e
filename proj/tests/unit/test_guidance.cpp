#include <algorithm>
#include <memory>
#include <set>

#include "advshape/guidance.hpp"
#include "helpers.hpp"

using namespace advshape;

namespace {

EnsembleSpec trio(std::uint64_t seed) {
  return EnsembleSpec::uniform({std::make_shared<Classifier>(Arch::pointnet, 4, seed),
                                std::make_shared<Classifier>(Arch::dgcnn, 4, seed + 1),
                                std::make_shared<Classifier>(Arch::setabs, 4, seed + 2)});
}

CompletionState state_with(Eigen::Index kp, Eigen::Index kf, std::uint64_t seed, int t = 100) {
  CompletionState s;
  s.t = t;
  s.free = testing::random_points(kf, seed);
  if (kp > 0) s.partial = std::make_shared<const PartialShape>(testing::random_points(kp, seed + 1000), "p", 0);
  return s;
}

GuidanceConfig small_config(int n, int m) {
  GuidanceConfig c;
  c.n_points = n;
  c.m_samples = m;
  return c;
}

}  // namespace

TEST_SUITE("guidance") {
  TEST_CASE("guidance window covers exactly the last fifth of the trajectory") {
    GuidanceConfig c;
    std::set<int> guided;
    for (int t = 0; t <= 1000; ++t)
      if (c.guided(t, 1000)) guided.insert(t);
    CHECK(guided.size() == 200);
    CHECK(*guided.begin() == 1);
    CHECK(*guided.rbegin() == 200);
  }

  TEST_CASE("guidance defaults and validation") {
    GuidanceConfig c;
    CHECK(c.a == 0.4);
    CHECK(c.n_points == 200);
    CHECK(c.m_samples == 5);
    CHECK(c.eps == 0.16);
    CHECK_NOTHROW(c.validate(320));
    CHECK_THROWS_AS(c.validate(100), Error);
    c.a = 1.0;
    CHECK_THROWS_AS(c.validate(320), Error);
    c.a = 0.0;
    CHECK_NOTHROW(c.validate(320));
    c.m_samples = 0;
    CHECK_THROWS_AS(c.validate(320), Error);
  }

  TEST_CASE("a single keep-all mask reproduces the full-cloud gradient") {
    const auto ens = trio(1);
    const auto st = state_with(12, 24, 2);
    auto cfg = small_config(8, 1);
    cfg.adaptive_weights = false;
    SampleMask all;
    all.keep.assign(24, 1);
    const auto mu = mu_gradient_with_masks(ens, st, 1, cfg, {all});
    const auto full = loss_and_gradient(ens, st.composite(), 1);
    CHECK(bit_identical(mu.grad, full.grad));
    CHECK(mu.loss == full.loss);
    cfg.use_mu = false;
    CHECK(bit_identical(mu_gradient(ens, st, 1, cfg, 9).grad, full.grad));
  }

  TEST_CASE("subsample gradients are scattered back and averaged") {
    const auto ens = trio(3);
    const auto st = state_with(10, 30, 4);
    auto cfg = small_config(8, 3);
    cfg.adaptive_weights = false;
    std::vector<SampleMask> masks{draw_mask(30, 1), draw_mask(30, 2), draw_mask(30, 3)};
    const auto mu = mu_gradient_with_masks(ens, st, 2, cfg, masks);
    Points want = Points::Zero(40, 3);
    for (const auto& m : masks) {
      const auto idx = m.kept_indices();
      const Points cloud = concat_rows(st.partial->points(), gather_rows(st.free, idx));
      const auto g = loss_and_gradient(ens, cloud, 2).grad;
      want.topRows(10) += g.topRows(10);
      for (std::size_t i = 0; i < idx.size(); ++i) want.row(10 + idx[i]) += g.row(10 + Eigen::Index(i));
    }
    want /= 3.0;
    CHECK((mu.grad - want).cwiseAbs().maxCoeff() < 1e-12);
    // A point dropped by every mask receives no gradient.
    for (Eigen::Index i = 0; i < 30; ++i)
      if (!masks[0].keep[i] && !masks[1].keep[i] && !masks[2].keep[i]) CHECK(mu.grad.row(10 + i).norm() == 0.0);
  }

  TEST_CASE("mu estimate is reproducible per seed") {
    const auto ens = trio(5);
    const auto st = state_with(8, 20, 6);
    const auto cfg = small_config(4, 5);
    CHECK(bit_identical(mu_gradient(ens, st, 0, cfg, 11).grad, mu_gradient(ens, st, 0, cfg, 11).grad));
    CHECK_FALSE(bit_identical(mu_gradient(ens, st, 0, cfg, 11).grad, mu_gradient(ens, st, 0, cfg, 12).grad));
  }

  TEST_CASE("standard error shrinks with more Monte-Carlo samples") {
    const auto ens = EnsembleSpec::uniform({std::make_shared<Classifier>(Arch::pointnet, 4, 7)});
    const auto st = state_with(6, 24, 8);
    auto spread = [&](int m) {
      auto cfg = small_config(4, m);
      std::vector<Points> est;
      for (std::uint64_t s = 0; s < 50; ++s) est.push_back(mu_gradient(ens, st, 1, cfg, 500 + s).grad);
      Points mean = Points::Zero(30, 3);
      for (const auto& e : est) mean += e;
      mean /= 50.0;
      double var = 0.0;
      for (const auto& e : est) var += (e - mean).bottomRows(24).squaredNorm();
      return std::sqrt(var / 50.0);
    };
    CHECK(spread(20) < spread(5));
  }

  TEST_CASE("a constant classifier yields zero scores and identity ranking") {
    auto flat = std::make_shared<Classifier>(Arch::pointnet, 4, 9);
    auto& store = flat->mutable_params();
    for (std::size_t i = 0; i < store.size(); ++i) store[i].value.setZero();
    const auto st = state_with(5, 12, 10);
    const auto sal = saliency_scores(EnsembleSpec::uniform({flat}), st, 0, SaliencyMode::magnitude);
    CHECK(sal.scores.cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < sal.rank.size(); ++i) CHECK(sal.rank[i] == Eigen::Index(i));
  }

  TEST_CASE("scores are channel sums ranked by magnitude with index tie-break") {
    GradientField g;
    g.grad = Points(5, 3);
    g.grad << 9, 9, 9,  // partial row, ignored
        1, 0, 0,        //
        -2, 0, 0,       //
        0, 0.5, 0.5,    //
        1, 1, -3;
    const auto mag = saliency_scores(g, 1, SaliencyMode::magnitude);
    CHECK(mag.scores[3] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(mag.rank == std::vector<Eigen::Index>{1, 0, 2, 3});
    const auto sig = saliency_scores(g, 1, SaliencyMode::sign);
    CHECK(sig.rank == std::vector<Eigen::Index>{0, 2, 3, 1});
  }

  TEST_CASE("magnitude ranking agrees with a per-point perturbation oracle") {
    int agree = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto ens = EnsembleSpec::uniform({std::make_shared<Classifier>(Arch::pointnet, 4, 20 + s)});
      CompletionState st = state_with(0, 8, 40 + s);
      const auto g = loss_and_gradient(ens, st.composite(), 1);
      const auto sal = saliency_scores(g, 0, SaliencyMode::magnitude);
      const double base = ensemble_loss(ens, st.composite(), 1);
      std::vector<std::pair<double, Eigen::Index>> oracle;
      for (Eigen::Index i = 0; i < 8; ++i) {
        Points p = st.free;
        p.row(i) += 1e-3 * g.grad.row(i).unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
        oracle.push_back({-(ensemble_loss(ens, p, 1) - base), i});
      }
      std::sort(oracle.begin(), oracle.end());
      int overlap = 0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) overlap += sal.rank[a] == oracle[b].second;
      agree += overlap >= 2;
    }
    CHECK(agree >= 8);
  }

  TEST_CASE("zero scale or zero gradient leaves the benign step untouched") {
    const auto sched = make_schedule(1000);
    auto st = state_with(4, 50, 12);
    auto benign = state_with(4, 50, 13, 99);
    benign.partial = st.partial;
    GradientField g;
    g.grad = testing::random_points(54, 14);
    const auto sal = saliency_scores(g, 4, SaliencyMode::magnitude);
    auto cfg = small_config(50, 5);
    cfg.a = 0.0;
    CHECK(bit_identical(adversarial_step(st, benign, g, sal, cfg, sched).free, benign.free));
    cfg.a = 0.4;
    g.grad.setZero();
    CHECK(bit_identical(adversarial_step(st, benign, g, saliency_scores(g, 4, SaliencyMode::magnitude), cfg, sched)
                            .free,
                        benign.free));
  }

  TEST_CASE("exactly N points move under a dense gradient") {
    const auto sched = make_schedule(1000);
    auto st = state_with(64, 320, 15, 150);
    auto benign = state_with(64, 320, 16, 149);
    benign.partial = st.partial;
    GradientField g;
    g.grad = testing::random_points(384, 17, 3.0);
    const GuidanceConfig cfg;
    const auto out = adversarial_step(st, benign, g, saliency_scores(g, 64, SaliencyMode::magnitude), cfg, sched);
    int changed = 0;
    for (Eigen::Index i = 0; i < 320; ++i) changed += !(out.free.row(i).array() == benign.free.row(i).array()).all();
    CHECK(changed == 200);
    CHECK(linf_distance(out.free, benign.free) <= cfg.eps);
  }

  TEST_CASE("the step is clipped to the budget even for huge gradients") {
    const auto sched = make_schedule(1000);
    auto st = state_with(8, 40, 18, 200);
    auto benign = state_with(8, 40, 19, 199);
    benign.partial = st.partial;
    GradientField g;
    g.grad = testing::random_points(48, 20, 1e6);
    auto cfg = small_config(40, 5);
    for (auto dir : {GuidanceDirection::gradient, GuidanceDirection::sign}) {
      cfg.direction = dir;
      const auto out = adversarial_step(st, benign, g, saliency_scores(g, 8, SaliencyMode::magnitude), cfg, sched);
      CHECK(linf_distance(out.free, benign.free) <= cfg.eps);
    }
  }

  TEST_CASE("guided output raises the ensemble loss over the benign step") {
    const auto sched = make_schedule(1000);
    Rng rng(21);
    for (double a : {0.1, 0.4}) {
      int up = 0;
      for (int trial = 0; trial < 100; ++trial) {
        const auto ens = EnsembleSpec::uniform({std::make_shared<Classifier>(Arch::pointnet, 4, 300 + trial)});
        const int t = 1 + int(rng.index(200));
        auto st = state_with(8, 40, 400 + trial, t);
        auto benign = st;
        benign.t = t - 1;
        benign.free += 0.01 * testing::random_points(40, 600 + trial);
        auto cfg = small_config(20, 5);
        cfg.a = a;
        const int y = int(rng.index(4));
        const auto g = mu_gradient(ens, st, y, cfg, 700 + trial);
        const auto out = adversarial_step(st, benign, g, saliency_scores(g, 8, cfg.saliency_mode), cfg, sched);
        up += ensemble_loss(ens, out.composite(), y) >= ensemble_loss(ens, benign.composite(), y);
      }
      CAPTURE(a);
      CHECK(up >= 80);
    }
  }

  TEST_CASE("effective step noise level") {
    const auto s = make_schedule(1000);
    CHECK(step_beta(s, 10, 9) == s.beta[10]);
    CHECK(step_beta(s, 10, 5) == doctest::Approx(1.0 - s.alpha_bar[10] / s.alpha_bar[5]).epsilon(1e-14));
  }
}
