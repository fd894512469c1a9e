#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advshape/point_cloud.hpp"
#include "advshape/rng.hpp"

namespace advshape {

/// Labeled, normalized clouds with a train/test split. Labels index `classes`.
struct Dataset {
  std::vector<std::string> classes;
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;

  [[nodiscard]] int class_index(const std::string& name) const;
  [[nodiscard]] std::vector<PointCloud> train_of(int label) const;
  [[nodiscard]] std::vector<PointCloud> test_of(int label) const;
};

/// Bundled toy categories, in label order.
inline const std::vector<std::string>& synthetic_classes() {
  static const std::vector<std::string> names{"sphere", "box", "cone", "torus"};
  return names;
}

struct SyntheticSpec {
  /// Per-class training counts; a single entry is broadcast to every class.
  std::vector<int> train_per_class{120};
  int test_per_class = 30;
  int points = 512;
  std::uint64_t seed = 7;
  /// Multiplier on the deformation ranges (0 gives undeformed base shapes).
  double variation = 2.5;
};

/// One deformed surface sample of the given category, normalized.
PointCloud sample_shape(int category, int points, Rng& rng, double variation = 1.0);
Dataset make_synthetic_dataset(const SyntheticSpec& spec);

/// Writes one XYZ file per cloud plus manifest.json into `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Loads from a manifest; every cloud is normalized on the way in.
Dataset load_dataset(const std::filesystem::path& manifest);

}  // namespace advshape
