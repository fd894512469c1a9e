#pragma once

#include <doctest.h>

#include <filesystem>
#include <string>

#include "advshape/point_cloud.hpp"
#include "advshape/rng.hpp"

namespace testing {

inline advshape::Points random_points(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  advshape::Rng rng(seed);
  advshape::Points p(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = scale * rng.uniform(-1.0, 1.0);
  return p;
}

inline advshape::Points sphere_points(Eigen::Index n, std::uint64_t seed) {
  advshape::Rng rng(seed);
  advshape::Points p(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVector3d v(rng.normal(), rng.normal(), rng.normal());
    p.row(i) = v / v.norm();
  }
  return p;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("advshape_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace testing
