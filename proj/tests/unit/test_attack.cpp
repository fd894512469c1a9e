#include <memory>

#include "advshape/attack.hpp"
#include "advshape/dataset.hpp"
#include "helpers.hpp"

using namespace advshape;

namespace {

struct Rig {
  NoiseSchedule schedule = make_schedule(50);
  std::shared_ptr<Denoiser> denoiser;
  EnsembleSpec ensemble;
  PointCloud source;
  AttackConfig config;

  explicit Rig(bool conditional = true) {
    DenoiserConfig dc;
    dc.conditional = conditional;
    dc.point_hidden = 8;
    dc.feature = 12;
    dc.context = 16;
    dc.head = 12;
    dc.time_dim = 8;
    denoiser = std::make_shared<Denoiser>(dc, "box", 3);
    std::vector<ClassifierPtr> members;
    for (auto arch : {Arch::pointnet, Arch::dgcnn, Arch::setabs}) {
      auto m = std::make_shared<Classifier>(arch, 4, 5);
      m->class_names = synthetic_classes();
      members.push_back(m);
    }
    ensemble = EnsembleSpec::uniform(members);
    Rng rng(7);
    source = sample_shape(1, 96, rng);
    config.k_p = 16;
    config.k_free = 40;
    config.n_views = 3;
    config.guidance.n_points = 20;
    config.guidance.a = 0.9;
    config.sampler.seed = 11;
    if (!conditional) config.mode = AttackMode::generation;
  }
};

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("zero guidance reproduces unguided completion bit-identically") {
    Rig rig;
    rig.config.guidance.a = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      rig.config.sampler.seed = seed;
      const auto r = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
      for (const auto& v : r.views) {
        const auto benign = benign_view(rig.source, v.view_index, *rig.denoiser, rig.schedule, rig.config);
        CHECK(bit_identical(v.adversarial_cloud.points, benign.points));
        SamplerConfig s = rig.config.sampler;
        s.seed = view_seed(seed, v.view_index);
        const auto plain =
            complete_shape(view_partial(rig.source, v.view_index, rig.config), *rig.denoiser, rig.schedule, s, 40);
        CHECK(bit_identical(v.adversarial_cloud.points, plain.points));
        CHECK(v.trace.empty());
      }
    }
  }

  TEST_CASE("every guided step respects the budgets") {
    Rig rig;
    const auto r = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    REQUIRE(r.views.size() == 3);
    for (const auto& v : r.views) {
      CHECK(v.trace.size() == 10);
      CHECK(validate_trace(v.trace, rig.config.guidance, rig.schedule.T).empty());
      for (const auto& s : v.trace) {
        CHECK(s.n_changed <= 20);
        CHECK(s.max_dev <= rig.config.guidance.eps);
      }
      CHECK(v.adversarial_cloud.size() == 56);
      const auto partial = view_partial(rig.source, v.view_index, rig.config);
      CHECK(bit_identical(v.adversarial_cloud.points.topRows(16), partial.points()));
    }
  }

  TEST_CASE("the trace validator flags violations") {
    GuidanceConfig g;
    g.n_points = 5;
    std::vector<GuidedStepTrace> t{{10, 0.1, 0.2, 5, 0.1}, {9, 0.1, 0.2, 6, 0.1}, {9, 0.1, 0.2, 1, 0.2},
                                   {300, 0.1, 0.2, 1, 0.1}};
    CHECK(validate_trace(t, g, 1000).size() >= 3);
    CHECK(validate_trace({t[0]}, g, 1000).empty());
  }

  TEST_CASE("attacks are reproducible from the master seed") {
    Rig rig;
    const auto a = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    rig.config.workers = 2;
    const auto b = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    REQUIRE(a.views.size() == b.views.size());
    for (std::size_t i = 0; i < a.views.size(); ++i) {
      CHECK(bit_identical(a.views[i].adversarial_cloud.points, b.views[i].adversarial_cloud.points));
      CHECK(a.views[i].substitute_success == b.views[i].substitute_success);
    }
    CHECK(a.successful_views == b.successful_views);
    CHECK(view_seed(11, 0) != view_seed(11, 1));
  }

  TEST_CASE("success flags are checked against the ensemble") {
    Rig rig;
    rig.config.n_views = 4;
    const auto r = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    for (const auto& v : r.views) {
      int pred = -1;
      CHECK(is_success(rig.ensemble, v.adversarial_cloud.points, 1, SuccessRule::ensemble_argmax, &pred) ==
            v.substitute_success);
      CHECK(pred == v.ensemble_pred);
      CHECK(v.substitute_success == (pred != 1));
    }
    CHECK(r.success() >= r.views[0].substitute_success);
  }

  TEST_CASE("the DDIM path guides only subsequence steps inside the window") {
    Rig rig;
    rig.config.sampler.kind = SamplerKind::ddim;
    rig.config.sampler.ddim_steps = 20;
    const auto seq = ddim_subsequence(50, 20);
    const auto r = run_attack(rig.source, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    for (const auto& v : r.views) {
      CHECK(validate_trace(v.trace, rig.config.guidance, 50).empty());
      for (const auto& s : v.trace) CHECK(std::find(seq.begin(), seq.end(), s.t) != seq.end());
    }
  }

  TEST_CASE("generation attack emits unpinned clouds of the requested size") {
    Rig rig(false);
    const auto r = run_generation_attack(1, rig.ensemble, *rig.denoiser, rig.schedule, rig.config);
    for (const auto& v : r.views) {
      CHECK(v.adversarial_cloud.size() == 40);
      CHECK(validate_trace(v.trace, rig.config.guidance, 50).empty());
    }
    Rig cond;
    cond.config.mode = AttackMode::generation;
    CHECK_THROWS_AS(run_generation_attack(1, cond.ensemble, *cond.denoiser, cond.schedule, cond.config), Error);
  }

  TEST_CASE("category mismatch and unlabeled sources are rejected") {
    Rig rig;
    PointCloud wrong = rig.source;
    wrong.label = 0;
    CHECK_THROWS_AS(run_attack(wrong, rig.ensemble, *rig.denoiser, rig.schedule, rig.config), Error);
    wrong.label.reset();
    CHECK_THROWS_AS(run_attack(wrong, rig.ensemble, *rig.denoiser, rig.schedule, rig.config), Error);
  }

  TEST_CASE("PGD stays in the eps ball and is a no-op with zero steps") {
    Rig rig;
    const auto& model = *rig.ensemble.members[0];
    CHECK(bit_identical(pgd_baseline(rig.source, model, 0.16, 0, 0.01).points, rig.source.points));
    const auto adv = pgd_baseline(rig.source, model, 0.16, 30, 0.02);
    CHECK(linf_distance(adv.points, rig.source.points) <= 0.16);
    CHECK(adv.label == rig.source.label);
    const auto ens = pgd_ensemble(rig.source, rig.ensemble, 0.05, 10, 0.01, 3, 4);
    CHECK(linf_distance(ens.points, rig.source.points) <= 0.05);
  }

  TEST_CASE("PGD ascends the substitute loss") {
    Rig rig;
    const auto& model = *rig.ensemble.members[0];
    const auto single = EnsembleSpec::uniform({rig.ensemble.members[0]});
    const auto adv = pgd_baseline(rig.source, model, 0.16, 20, 0.01);
    CHECK(ensemble_loss(single, adv.points, 1) > ensemble_loss(single, rig.source.points, 1));
  }

  TEST_CASE("trace JSONL round-trips") {
    const auto dir = testing::temp_dir("trace");
    std::vector<GuidedStepTrace> t{{200, 0.125, 0.3, 200, 0.16}, {199, 1.0 / 3.0, 0.7, 17, 0.01}};
    write_trace_jsonl(dir / "t.jsonl", t);
    const auto back = read_trace_jsonl(dir / "t.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[1].loss_before == t[1].loss_before);
    CHECK(back[0].n_changed == 200);
    CHECK(back[0].max_dev == 0.16);
  }

  TEST_CASE("attack config validation") {
    AttackConfig c;
    CHECK_NOTHROW(c.validate());
    c.n_views = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(attack_mode_from_string("generation") == AttackMode::generation);
    CHECK(success_rule_from_string(to_string(SuccessRule::all_members)) == SuccessRule::all_members);
  }
}
