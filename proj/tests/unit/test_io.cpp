#include <fstream>

#include "advshape/checkpoint.hpp"
#include "advshape/dataset.hpp"
#include "advshape/io.hpp"
#include "helpers.hpp"

using namespace advshape;

TEST_SUITE("io") {
  TEST_CASE("xyz round-trips doubles exactly") {
    const auto dir = testing::temp_dir("xyz");
    const Points p = testing::random_points(40, 1);
    io::write_xyz(dir / "a.xyz", p);
    CHECK(bit_identical(io::read_xyz(dir / "a.xyz"), p));
  }

  TEST_CASE("xyz reader skips comments and blank lines") {
    const auto dir = testing::temp_dir("xyz_comments");
    io::write_text(dir / "b.xyz", "# header\n1 2 3\n\n4 5 6\n");
    const Points p = io::read_xyz(dir / "b.xyz");
    REQUIRE(p.rows() == 2);
    CHECK(p(1, 2) == 6.0);
    io::write_text(dir / "bad.xyz", "1 2\n");
    CHECK_THROWS_AS(io::read_xyz(dir / "bad.xyz"), Error);
  }

  TEST_CASE("ply round-trips float32 values") {
    const auto dir = testing::temp_dir("ply");
    Points p = testing::random_points(33, 2);
    p = p.cast<float>().cast<double>();
    io::write_ply(dir / "a.ply", p);
    CHECK(bit_identical(io::read_cloud(dir / "a.ply"), p));
  }

  TEST_CASE("dataset manifest round-trips") {
    const auto dir = testing::temp_dir("dataset");
    SyntheticSpec spec;
    spec.train_per_class = {3};
    spec.test_per_class = 2;
    spec.points = 64;
    const auto ds = make_synthetic_dataset(spec);
    save_dataset(dir, ds);
    const auto back = load_dataset(dir / "manifest.json");
    CHECK(back.classes == ds.classes);
    REQUIRE(back.train.size() == ds.train.size());
    CHECK(back.test.size() == ds.test.size());
    CHECK(*back.train[4].label == *ds.train[4].label);
    CHECK((back.train[4].points - ds.train[4].points).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("synthetic dataset is balanced and deterministic") {
    SyntheticSpec spec;
    spec.train_per_class = {5};
    spec.test_per_class = 2;
    spec.points = 128;
    const auto a = make_synthetic_dataset(spec), b = make_synthetic_dataset(spec);
    CHECK(a.train.size() == 20);
    for (int c = 0; c < 4; ++c) CHECK(a.train_of(c).size() == 5);
    CHECK(bit_identical(a.test[3].points, b.test[3].points));
    for (const auto& pc : a.train) CHECK(pc.points.rowwise().norm().maxCoeff() == doctest::Approx(1.0));
  }

  TEST_CASE("checkpoint container round-trips parameters and header") {
    const auto dir = testing::temp_dir("ck");
    nn::ParamStore store;
    store.add("layer.w", 4, 3, 9);
    store.add_zero("layer.b", 1, 3);
    store.quantize_to_float();
    save_checkpoint(dir / "m.ck", {{"kind", "test"}, {"value", 3}}, store);
    const auto ck = load_checkpoint(dir / "m.ck");
    CHECK(ck.header["kind"] == "test");
    REQUIRE(ck.params.size() == 2);
    CHECK(ck.params[0].name == "layer.w");
    CHECK(bit_identical(ck.params[0].value, store[0].value));
    CHECK(file_digest(dir / "m.ck").size() == 64);
    io::write_text(dir / "junk.ck", "not a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ck"), Error);
  }

  TEST_CASE("sha256 of a known string") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }
}
