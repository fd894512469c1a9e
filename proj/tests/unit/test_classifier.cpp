#include <algorithm>
#include <numeric>
#include <set>

#include "advshape/classifier.hpp"
#include "advshape/dataset.hpp"
#include "helpers.hpp"

using namespace advshape;

namespace {

ClassifierPtr make(Arch arch, std::uint64_t seed) { return std::make_shared<Classifier>(arch, 4, seed); }

// Worst coordinate error of the analytic gradient against central differences,
// relative to the largest gradient coordinate. Stencils that change a member's
// neighbour or group selection straddle a kink and are skipped.
struct FdResult {
  double worst = 0.0;
  int checked = 0;
  int skipped = 0;
};

FdResult fd_check(const EnsembleSpec& ens, const Points& x, int y, double h = 1e-5) {
  const auto analytic = loss_and_gradient(ens, x, y).grad;
  FdResult r;
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), 1e-12);
  const double f0 = ensemble_loss(ens, x, y);
  std::vector<std::vector<Eigen::Index>> base;
  for (const auto& m : ens.members) base.push_back(m->selection(x));
  auto stable = [&](const Points& p) {
    for (std::size_t k = 0; k < ens.members.size(); ++k)
      if (ens.members[k]->selection(p) != base[k]) return false;
    return true;
  };
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int c = 0; c < 3; ++c) {
      Points xp = x, xm = x;
      xp(i, c) += h;
      xm(i, c) -= h;
      if (!stable(xp) || !stable(xm)) {
        ++r.skipped;
        continue;
      }
      // A max-pool winner can also change inside the stencil; the one-sided
      // slopes then disagree by far more than the curvature term.
      const double fp = ensemble_loss(ens, xp, y), fm = ensemble_loss(ens, xm, y);
      if (std::abs((fp - f0) - (f0 - fm)) / h > 1e-3 * scale) {
        ++r.skipped;
        continue;
      }
      ++r.checked;
      const double numeric = (fp - fm) / (2 * h);
      r.worst = std::max(r.worst, std::abs(numeric - analytic(i, c)) / scale);
    }
  return r;
}

void check_fd(const EnsembleSpec& ens, const Points& x, int y) {
  const auto r = fd_check(ens, x, y);
  CAPTURE(r.skipped);
  CHECK(r.checked >= 9 * (r.checked + r.skipped) / 10);
  CHECK(r.worst < 1e-5);
}

}  // namespace

TEST_SUITE("classifier") {
  TEST_CASE("every architecture is invariant to point order") {
    const Points x = testing::random_points(64, 1);
    std::vector<Eigen::Index> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + 17, perm.end());
    const Points px = gather_rows(x, perm);
    for (auto arch : all_archs()) {
      CAPTURE(to_string(arch));
      const auto m = make(arch, 2);
      CHECK((m->logits(x) - m->logits(px)).cwiseAbs().maxCoeff() < 1e-6);
    }
  }

  TEST_CASE("architectures differ in parameter count") {
    std::set<std::size_t> counts;
    for (auto arch : all_archs()) counts.insert(make(arch, 1)->params().scalar_count());
    CHECK(counts.size() == all_archs().size());
  }

  TEST_CASE("classifiers accept any point count") {
    for (auto arch : all_archs())
      for (Eigen::Index k : {1, 2, 7, 100}) CHECK(make(arch, 3)->logits(testing::random_points(k, 4)).allFinite());
  }

  TEST_CASE("single-member ensemble loss is plain cross-entropy") {
    const auto m = make(Arch::dgcnn, 5);
    const Points x = testing::random_points(40, 6);
    const auto ens = EnsembleSpec::uniform({m});
    const double ce = nn::softmax_cross_entropy(m->logits(x).transpose(), 2).loss;
    CHECK(std::abs(ensemble_loss(ens, x, 2) - ce) < 1e-9);
    CHECK(std::abs(loss_and_gradient(ens, x, 2).loss - ce) < 1e-9);
  }

  TEST_CASE("analytic input gradients match central differences") {
    const Points x = testing::random_points(32, 7);
    for (auto arch : all_archs()) {
      CAPTURE(to_string(arch));
      check_fd(EnsembleSpec::uniform({make(arch, 8)}), x, 1);
    }
    auto ens = EnsembleSpec::uniform({make(Arch::pointnet, 9), make(Arch::dgcnn, 9), make(Arch::setabs, 9)});
    ens.weights = {0.5, 0.3, 0.2};
    check_fd(ens, x, 3);
    ens.mode = CombineMode::probs;
    check_fd(ens, x, 3);
  }

  TEST_CASE("fused scores follow the combine mode") {
    Eigen::VectorXd a(3), b(3);
    a << 1.0, 2.0, 3.0;
    b << 0.0, -1.0, 4.0;
    const std::vector<double> w{0.25, 0.75};
    CHECK((fused_scores({a, b}, w, CombineMode::logits) - (0.25 * a + 0.75 * b)).norm() < 1e-15);
    CHECK((fused_scores({a, b}, w, CombineMode::probs) - (0.25 * nn::softmax(a) + 0.75 * nn::softmax(b))).norm() <
          1e-15);
  }

  TEST_CASE("adaptive weight arithmetic") {
    const auto uniform = adaptive_weights({20, 20, 20}, 20, 1.0);
    for (double w : uniform) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    const auto skew = adaptive_weights({0, 20}, 20, 1.0);
    CHECK(skew[0] == doctest::Approx(1.0 / 22.0).epsilon(1e-12));
    CHECK(skew[1] == doctest::Approx(21.0 / 22.0).epsilon(1e-12));
  }

  TEST_CASE("adaptive weights stay on the simplex") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 1 + int(rng.index(30));
      std::vector<int> counts;
      for (int m = 0; m < 3; ++m) counts.push_back(int(rng.index(std::size_t(n) + 1)));
      const auto w = adaptive_weights(counts, n, 0.05 * n);
      CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) < 1e-9);
      for (double v : w) CHECK(v >= 0.0);
    }
    auto ens = EnsembleSpec::uniform({make(Arch::pointnet, 11), make(Arch::attention, 11)});
    std::vector<Points> clouds{testing::random_points(20, 12), testing::random_points(20, 13)};
    const auto upd = update_adaptive_weights(ens, clouds, {0, 1});
    CHECK(std::abs(upd.weights[0] + upd.weights[1] - 1.0) < 1e-9);
  }

  TEST_CASE("gradient cosine matrix is symmetric with a unit diagonal") {
    const auto a = make(Arch::pointnet, 14), b = make(Arch::pointconv, 14);
    const auto a_copy = std::make_shared<Classifier>(*a);
    std::vector<Points> clouds;
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) {
      clouds.push_back(testing::random_points(30, 100 + i));
      labels.push_back(i % 4);
    }
    const auto cm = gradient_cosine_matrix({a, b, a_copy}, clouds, labels);
    for (int i = 0; i < 3; ++i) CHECK(cm.values(i, i) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK((cm.values - cm.values.transpose()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(cm.values(0, 2) == doctest::Approx(1.0).epsilon(1e-6));
    const auto direct = gradient_cosine(*a, *b, clouds[0], labels[0]);
    const auto swapped = gradient_cosine(*b, *a, clouds[0], labels[0]);
    REQUIRE(direct);
    CHECK(std::abs(*direct - *swapped) < 1e-12);
  }

  TEST_CASE("checkpoint round-trip preserves logits") {
    const auto dir = testing::temp_dir("classifier_ck");
    auto m = std::make_shared<Classifier>(Arch::setabs, 4, 15);
    m->mutable_params().quantize_to_float();
    m->class_names = synthetic_classes();
    save_classifier(dir / "m.ck", *m, 15);
    const auto back = load_classifier(dir / "m.ck");
    CHECK(back->arch() == Arch::setabs);
    CHECK(back->class_names == synthetic_classes());
    const Points x = testing::random_points(50, 16);
    CHECK(bit_identical(back->logits(x), m->logits(x)));
  }

  TEST_CASE("training reaches the accuracy floor on the toy set") {
    SyntheticSpec spec;
    spec.train_per_class = {60};
    spec.test_per_class = 20;
    spec.points = 256;
    const auto ds = make_synthetic_dataset(spec);
    ClassifierTrainConfig cfg;
    ClassifierTrainReport rep;
    const auto m = train_classifier(Arch::pointnet, ds.train, ds.test, ds.classes, cfg, &rep);
    CHECK(rep.test_accuracy >= 0.85);
    CHECK(rep.met_floor);
    CHECK(accuracy(*m, ds.test) == doctest::Approx(rep.test_accuracy));
  }
}
