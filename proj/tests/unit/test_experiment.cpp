#include <cstdlib>
#include <fstream>

#include "advshape/experiment.hpp"
#include "advshape/io.hpp"
#include "helpers.hpp"

using namespace advshape;

namespace {

ExperimentConfig tiny() {
  auto c = ExperimentConfig::defaults();
  c.name = "tiny";
  c.synthetic.train_per_class = {24};
  c.synthetic.test_per_class = 4;
  c.synthetic.points = 128;
  c.classifiers = {{"pointnet", Arch::pointnet, 1}, {"attention", Arch::attention, 2}};
  c.ensemble = {"pointnet"};
  c.classifier_training.epochs = 2;
  c.classifier_training.min_points = 64;
  c.classifier_training.max_points = 96;
  c.T = 40;
  c.diffusion.epochs = 2;
  c.diffusion.k_p = 16;
  c.diffusion.k_free = 48;
  c.diffusion.heldout_samples = 8;
  c.attack.k_p = 16;
  c.attack.k_free = 48;
  c.attack.n_views = 2;
  c.attack.trials = 2;
  c.attack.guidance.n_points = 24;
  c.sources_per_class = 1;
  c.pgd.steps = 3;
  c.similarity_clouds = 4;
  return c;
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("YAML config round-trips through the emitter") {
    const auto c = tiny();
    const auto dir = testing::temp_dir("yaml");
    io::write_text(dir / "c.yaml", experiment_config_yaml(c));
    const auto back = load_experiment_config(dir / "c.yaml");
    CHECK(to_json(back) == to_json(c));
  }

  TEST_CASE("hand-written YAML overrides defaults") {
    const auto dir = testing::temp_dir("yaml_hand");
    io::write_text(dir / "c.yaml",
                   "name: demo\n"
                   "seed: 9\n"
                   "attack:\n"
                   "  a: 0.2\n"
                   "  sampler: ddim\n"
                   "  views: 4\n"
                   "  use_mu: false\n"
                   "defenses: [\"srs:0.25\"]\n");
    const auto c = load_experiment_config(dir / "c.yaml");
    CHECK(c.name == "demo");
    CHECK(c.seed == 9);
    CHECK(c.attack.guidance.a == 0.2);
    CHECK(c.attack.sampler.kind == SamplerKind::ddim);
    CHECK(c.attack.n_views == 4);
    CHECK_FALSE(c.attack.guidance.use_mu);
    REQUIRE(c.defenses.size() == 1);
    CHECK(c.defenses[0].srs_drop_ratio == 0.25);
    CHECK(c.attack.guidance.n_points == 200);
    CHECK(c.T == 1000);
  }

  TEST_CASE("invalid configs are rejected") {
    auto c = tiny();
    c.ensemble = {"missing"};
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny();
    c.attack.guidance.a = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    const auto dir = testing::temp_dir("yaml_bad");
    io::write_text(dir / "bad.yaml", "attack: [unclosed\n");
    CHECK_THROWS_AS(load_experiment_config(dir / "bad.yaml"), Error);
  }

  TEST_CASE("cache directory follows the environment") {
    const char* old = std::getenv("ADVSHAPE_CACHE");
    const std::string keep = old ? old : "";
    setenv("ADVSHAPE_CACHE", "/tmp/somewhere", 1);
    CHECK(cache_dir() == std::filesystem::path("/tmp/somewhere"));
    if (old)
      setenv("ADVSHAPE_CACHE", keep.c_str(), 1);
    else
      unsetenv("ADVSHAPE_CACHE");
  }

  TEST_CASE("a tiny experiment emits parseable tables") {
    const auto dir = testing::temp_dir("tiny_run");
    const auto s = run_experiment(tiny(), dir);
    CHECK(s.trials.size() == 2);
    for (const auto& name : deterministic_tables()) CHECK(std::filesystem::exists(dir / "tables" / name));
    const auto tm = read_transfer_csv(dir / "tables" / "transfer.csv");
    CHECK(bit_identical(tm.mean, s.transfer.mean));
    CHECK(tm.cols.size() == 2 * (1 + tiny().defenses.size()));
    CHECK(tm.excluded[0]);
    CHECK_FALSE(tm.excluded[1]);
    for (Eigen::Index i = 0; i < tm.mean.size(); ++i) {
      CHECK(tm.mean.data()[i] >= 0.0);
      CHECK(tm.mean.data()[i] <= 1.0);
    }
    const std::string digest = s.manifest.digest();
    for (const auto& name : deterministic_tables())
      CHECK(io::read_text(dir / "tables" / name).find(digest) != std::string::npos);
    std::ifstream jsonl(dir / "results.jsonl");
    int lines = 0;
    for (std::string line; std::getline(jsonl, line); ++lines) CHECK(nlohmann::json::parse(line).is_object());
    CHECK(lines == 2 * 4 * 2);
    CHECK(read_manifest(dir / "manifest.json").digest() == digest);
    CHECK(read_similarity_csv(dir / "tables" / "similarity.csv").models.size() == 2);
  }
}
