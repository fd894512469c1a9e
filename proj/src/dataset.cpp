#include "advshape/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "advshape/io.hpp"

namespace advshape {
namespace {

constexpr double kPi = std::numbers::pi;

Eigen::RowVector3d sphere_point(Rng& rng) {
  Eigen::RowVector3d v;
  do {
    v << rng.normal(), rng.normal(), rng.normal();
  } while (v.norm() < 1e-9);
  return v / v.norm();
}

Eigen::RowVector3d box_point(Rng& rng) {
  const auto face = rng.index(6);
  const double u = rng.uniform(-1.0, 1.0), w = rng.uniform(-1.0, 1.0);
  const double s = face % 2 == 0 ? 1.0 : -1.0;
  switch (face / 2) {
    case 0: return {s, u, w};
    case 1: return {u, s, w};
    default: return {u, w, s};
  }
}

Eigen::RowVector3d cone_point(Rng& rng, double radius) {
  // Apex at y = +1, base disk of `radius` at y = -1; area-weighted.
  const double slant = std::sqrt(radius * radius + 4.0);
  const double lateral = kPi * radius * slant;
  const double base = kPi * radius * radius;
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  if (rng.uniform() * (lateral + base) < lateral) {
    const double u = std::sqrt(rng.uniform());
    return {u * radius * std::cos(theta), 1.0 - 2.0 * u, u * radius * std::sin(theta)};
  }
  const double r = radius * std::sqrt(rng.uniform());
  return {r * std::cos(theta), -1.0, r * std::sin(theta)};
}

Eigen::RowVector3d torus_point(Rng& rng, double minor) {
  const double major = 1.0;
  for (;;) {
    const double u = rng.uniform(0.0, 2.0 * kPi);
    const double v = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform() * (major + minor) > major + minor * std::cos(v)) continue;
    const double ring = major + minor * std::cos(v);
    return {ring * std::cos(u), minor * std::sin(v), ring * std::sin(u)};
  }
}

}  // namespace

int Dataset::class_index(const std::string& name) const {
  const auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw Error("unknown class '" + name + "'");
  return static_cast<int>(it - classes.begin());
}

std::vector<PointCloud> Dataset::train_of(int label) const {
  std::vector<PointCloud> out;
  for (const auto& c : train)
    if (c.label == label) out.push_back(c);
  return out;
}

std::vector<PointCloud> Dataset::test_of(int label) const {
  std::vector<PointCloud> out;
  for (const auto& c : test)
    if (c.label == label) out.push_back(c);
  return out;
}

PointCloud sample_shape(int category, int points, Rng& rng, double variation) {
  if (category < 0 || category >= static_cast<int>(synthetic_classes().size()))
    throw Error("sample_shape: unknown category");
  if (points < 1) throw Error("sample_shape: need at least one point");
  if (!(variation >= 0.0)) throw Error("sample_shape: variation must be non-negative");
  const double v = variation;
  const double cone_radius = rng.uniform(0.8 - 0.2 * v, 0.8 + 0.2 * v);
  const double torus_minor = rng.uniform(0.35 - 0.1 * v, 0.35 + 0.1 * v);
  auto axis = [&] { return rng.uniform(1.0 - 0.25 * v, 1.0 + 0.25 * v); };
  const Eigen::RowVector3d scale(axis(), axis(), axis());
  const double taper = rng.uniform(-0.2 * v, 0.2 * v);
  const double bend = rng.uniform(-0.15 * v, 0.15 * v);
  const double tilt = rng.uniform(-0.15 * v, 0.15 * v);
  const double jitter = 0.01;
  Points p(points, 3);
  for (int i = 0; i < points; ++i) {
    Eigen::RowVector3d q;
    switch (category) {
      case 0: q = sphere_point(rng); break;
      case 1: q = box_point(rng); break;
      case 2: q = cone_point(rng, cone_radius); break;
      default: q = torus_point(rng, torus_minor); break;
    }
    q = q.cwiseProduct(scale);
    const double t = 1.0 + taper * q.y();
    q.x() *= t;
    q.z() *= t;
    q.x() += bend * q.y() * q.y();
    // Small tilt about z.
    const double c = std::cos(tilt), s = std::sin(tilt);
    q = Eigen::RowVector3d(c * q.x() - s * q.y(), s * q.x() + c * q.y(), q.z());
    q += jitter * Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal());
    p.row(i) = q;
  }
  return normalize(PointCloud(std::move(p), category));
}

Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  Dataset ds;
  ds.classes = synthetic_classes();
  const int n_classes = static_cast<int>(ds.classes.size());
  if (spec.train_per_class.empty()) throw Error("make_synthetic_dataset: empty class counts");
  for (int c = 0; c < n_classes; ++c) {
    const int n_train = spec.train_per_class.size() == 1 ? spec.train_per_class[0]
                                                         : spec.train_per_class.at(static_cast<std::size_t>(c));
    Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(c)}));
    for (int i = 0; i < n_train + spec.test_per_class; ++i) {
      PointCloud pc = sample_shape(c, spec.points, rng, spec.variation);
      const bool is_train = i < n_train;
      pc.id = ds.classes[static_cast<std::size_t>(c)] + (is_train ? "_train_" : "_test_") +
              std::to_string(is_train ? i : i - n_train);
      (is_train ? ds.train : ds.test).push_back(std::move(pc));
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir / "clouds");
  std::vector<io::ManifestEntry> entries;
  auto emit = [&](const std::vector<PointCloud>& set, const char* split) {
    for (const auto& pc : set) {
      const std::string rel = "clouds/" + pc.id + ".xyz";
      io::write_xyz(dir / rel, pc.points);
      entries.push_back({rel, ds.classes.at(static_cast<std::size_t>(*pc.label)), split});
    }
  };
  emit(ds.train, "train");
  emit(ds.test, "test");
  io::write_manifest(dir / "manifest.json", entries);
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  const auto entries = io::read_manifest(manifest);
  if (entries.empty()) throw Error("load_dataset: empty manifest");
  Dataset ds;
  // Bundled categories keep their canonical order; other labels sort lexically.
  std::map<std::string, int> extra;
  for (const auto& e : entries) {
    const auto& known = synthetic_classes();
    if (std::find(known.begin(), known.end(), e.label) == known.end()) extra.emplace(e.label, 0);
  }
  if (extra.empty()) {
    for (const auto& name : synthetic_classes())
      if (std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.label == name; }))
        ds.classes.push_back(name);
  } else {
    std::map<std::string, int> all;
    for (const auto& e : entries) all.emplace(e.label, 0);
    for (const auto& [name, _] : all) ds.classes.push_back(name);
  }
  const auto base = manifest.parent_path();
  for (const auto& e : entries) {
    PointCloud pc(io::read_cloud(base / e.path), ds.class_index(e.label),
                  std::filesystem::path(e.path).stem().string());
    pc = normalize(pc);
    (e.split == "test" ? ds.test : ds.train).push_back(std::move(pc));
  }
  return ds;
}

}  // namespace advshape
