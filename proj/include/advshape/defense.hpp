#pragma once

#include <cstdint>
#include <string>

#include "advshape/point_cloud.hpp"

namespace advshape {

enum class DefenseKind { srs, sor };

std::string to_string(DefenseKind kind);
DefenseKind defense_kind_from_string(const std::string& s);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::srs;
  double srs_drop_ratio = 0.5;
  int sor_k = 2;
  double sor_alpha = 1.1;
  /// Seed of the SRS draw.
  std::uint64_t seed = 0;

  void validate() const;
  /// Short label such as "srs(0.5)" or "sor(2,1.1)".
  [[nodiscard]] std::string label() const;
};

/// Drops floor(ratio * K) points uniformly without replacement; survivors keep input order.
PointCloud srs_defense(const PointCloud& cloud, const DefenseConfig& config, std::uint64_t seed);
/// Removes points whose mean k-NN distance exceeds mean + alpha * std over the cloud.
PointCloud sor_defense(const PointCloud& cloud, const DefenseConfig& config);
/// Dispatches on `config.kind`; SRS uses `config.seed`.
PointCloud apply_defense(const PointCloud& cloud, const DefenseConfig& config);

/// Parses "srs", "srs:0.5", "sor", "sor:2:1.1".
DefenseConfig parse_defense(const std::string& spec);

}  // namespace advshape
