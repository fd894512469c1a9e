#include "advshape/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "advshape/rng.hpp"

namespace advshape {

std::string to_string(DefenseKind kind) { return kind == DefenseKind::srs ? "srs" : "sor"; }

DefenseKind defense_kind_from_string(const std::string& s) {
  if (s == "srs") return DefenseKind::srs;
  if (s == "sor") return DefenseKind::sor;
  throw Error("unknown defense '" + s + "' (expected srs or sor)");
}

void DefenseConfig::validate() const {
  if (!(srs_drop_ratio > 0.0 && srs_drop_ratio < 1.0)) throw Error("defense: srs_drop_ratio must lie in (0, 1)");
  if (sor_k < 1) throw Error("defense: sor_k must be positive");
  if (!(sor_alpha > 0.0)) throw Error("defense: sor_alpha must be positive");
}

std::string DefenseConfig::label() const {
  std::ostringstream os;
  if (kind == DefenseKind::srs)
    os << "srs(" << srs_drop_ratio << ")";
  else
    os << "sor(" << sor_k << "," << sor_alpha << ")";
  return os.str();
}

PointCloud srs_defense(const PointCloud& cloud, const DefenseConfig& config, std::uint64_t seed) {
  config.validate();
  const Eigen::Index k = cloud.size();
  if (k < 2) throw Error("srs_defense: need at least two points");
  const auto drop = static_cast<Eigen::Index>(std::floor(config.srs_drop_ratio * static_cast<double>(k)));
  if (drop >= k) throw Error("srs_defense: would remove every point");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(static_cast<std::size_t>(k - drop));
  std::sort(idx.begin(), idx.end());
  return PointCloud(gather_rows(cloud.points, idx), cloud.label, cloud.id);
}

PointCloud sor_defense(const PointCloud& cloud, const DefenseConfig& config) {
  config.validate();
  const Eigen::Index k = cloud.size();
  if (k <= config.sor_k) throw Error("sor_defense: need more points than sor_k");
  const auto nn = knn_indices(cloud.points, config.sor_k);
  Eigen::VectorXd mean_d(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    double s = 0.0;
    for (auto j : nn[static_cast<std::size_t>(i)]) s += (cloud.points.row(i) - cloud.points.row(j)).norm();
    mean_d[i] = s / static_cast<double>(config.sor_k);
  }
  const double mu = mean_d.mean();
  const double var = (mean_d.array() - mu).square().mean();
  const double threshold = mu + config.sor_alpha * std::sqrt(var);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < k; ++i)
    if (mean_d[i] <= threshold) keep.push_back(i);
  return PointCloud(gather_rows(cloud.points, keep), cloud.label, cloud.id);
}

PointCloud apply_defense(const PointCloud& cloud, const DefenseConfig& config) {
  return config.kind == DefenseKind::srs ? srs_defense(cloud, config, config.seed) : sor_defense(cloud, config);
}

DefenseConfig parse_defense(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.empty()) throw Error("empty defense spec");
  DefenseConfig c;
  c.kind = defense_kind_from_string(parts[0]);
  try {
    if (c.kind == DefenseKind::srs) {
      if (parts.size() > 2) throw Error("srs takes one parameter");
      if (parts.size() == 2) c.srs_drop_ratio = std::stod(parts[1]);
    } else {
      if (parts.size() > 3) throw Error("sor takes two parameters");
      if (parts.size() >= 2) c.sor_k = std::stoi(parts[1]);
      if (parts.size() == 3) c.sor_alpha = std::stod(parts[2]);
    }
  } catch (const std::logic_error&) {
    throw Error("malformed defense spec '" + spec + "'");
  }
  c.validate();
  return c;
}

}  // namespace advshape
