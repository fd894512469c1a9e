#include "advshape/point_cloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <numbers>
#include <string>

#include "advshape/log.hpp"
#include "advshape/rng.hpp"

namespace advshape {
namespace {

void require_xyz(const Points& p, const char* what) {
  if (p.cols() != 3) throw Error(std::string(what) + ": expected K x 3 coordinates");
}

// Squared distance from every row of `a` to its nearest row of `b`.
Eigen::VectorXd nearest_sq(const Points& a, const Points& b) {
  Eigen::VectorXd out(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double dx = a(i, 0) - b(j, 0);
      const double dy = a(i, 1) - b(j, 1);
      const double dz = a(i, 2) - b(j, 2);
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out[i] = best;
  }
  return out;
}

}  // namespace

std::size_t SampleMask::kept() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

std::vector<Eigen::Index> SampleMask::kept_indices() const {
  std::vector<Eigen::Index> idx;
  idx.reserve(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) idx.push_back(static_cast<Eigen::Index>(i));
  return idx;
}

void require_finite(const Points& points, const char* what) {
  if (!points.allFinite()) throw Error(std::string(what) + ": non-finite coordinate");
}

PointCloud normalize(const PointCloud& cloud) {
  require_xyz(cloud.points, "normalize");
  if (cloud.empty()) throw Error("normalize: empty cloud");
  require_finite(cloud.points, "normalize");
  const Eigen::RowVector3d centroid = cloud.points.colwise().mean();
  Points centered = cloud.points.rowwise() - centroid;
  double scale = centered.rowwise().norm().maxCoeff();
  if (scale < 1e-8) {
    log_warn("normalize: degenerate cloud '" + cloud.id + "' (all points coincide); scale floored at 1e-8");
    scale = 1e-8;
  }
  return PointCloud(centered / scale, cloud.label, cloud.id);
}

SampleMask draw_mask(Eigen::Index n, std::uint64_t seed) {
  SampleMask mask;
  mask.seed = seed;
  mask.keep.assign(static_cast<std::size_t>(n), 0);
  if (n == 0) return mask;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Rng rng(attempt == 0 ? seed : derive_seed(seed, {1}));
    for (auto& k : mask.keep) k = rng.bernoulli(0.5) ? 1 : 0;
    if (mask.kept() > 0) return mask;
  }
  Rng rng(derive_seed(seed, {2}));
  mask.keep[rng.index(mask.keep.size())] = 1;
  return mask;
}

Points apply_mask(const Points& points, const SampleMask& mask) {
  if (static_cast<std::size_t>(points.rows()) != mask.keep.size())
    throw Error("apply_mask: mask length does not match point count");
  return gather_rows(points, mask.kept_indices());
}

std::pair<PointCloud, SampleMask> random_subsample(const PointCloud& free_points, std::uint64_t seed) {
  if (free_points.empty()) throw Error("random_subsample: empty cloud");
  SampleMask mask = draw_mask(free_points.size(), seed);
  PointCloud out(apply_mask(free_points.points, mask), free_points.label, free_points.id);
  return {std::move(out), std::move(mask)};
}

double chamfer(const Points& a, const Points& b) {
  require_xyz(a, "chamfer");
  require_xyz(b, "chamfer");
  if (a.rows() == 0 || b.rows() == 0) throw Error("chamfer: empty cloud");
  return 0.5 * (nearest_sq(a, b).mean() + nearest_sq(b, a).mean());
}

double hausdorff(const Points& a, const Points& b) {
  require_xyz(a, "hausdorff");
  require_xyz(b, "hausdorff");
  if (a.rows() == 0 || b.rows() == 0) throw Error("hausdorff: empty cloud");
  return std::sqrt(std::max(nearest_sq(a, b).maxCoeff(), nearest_sq(b, a).maxCoeff()));
}

double mse(const Points& a, const Points& b) {
  require_xyz(a, "mse");
  require_xyz(b, "mse");
  if (a.rows() == 0) throw Error("mse: empty cloud");
  if (a.rows() != b.rows()) throw Error("mse: point counts differ, no index correspondence");
  return (a - b).rowwise().squaredNorm().mean();
}

DistanceReport distances(const Points& a, const Points& b) {
  DistanceReport r;
  r.chamfer = chamfer(a, b);
  r.hausdorff = hausdorff(a, b);
  r.mse = mse(a, b);
  return r;
}

Points linf_clip(const Points& guided, const Points& reference, double eps) {
  if (guided.rows() != reference.rows() || guided.cols() != reference.cols())
    throw Error("linf_clip: shape mismatch between guided and reference");
  if (!(eps > 0.0)) throw Error("linf_clip: eps must be positive");
  Points out(guided.rows(), guided.cols());
  for (Eigen::Index i = 0; i < guided.rows(); ++i)
    for (Eigen::Index c = 0; c < guided.cols(); ++c) {
      const double r = reference(i, c);
      double x = std::clamp(guided(i, c), r - eps, r + eps);
      // r +/- eps rounds; step back until the measured deviation is within eps.
      while (std::abs(x - r) > eps) x = std::nextafter(x, r);
      out(i, c) = x;
    }
  return out;
}

PointCloud linf_clip(const PointCloud& guided, const PointCloud& reference, double eps) {
  return PointCloud(linf_clip(guided.points, reference.points, eps), guided.label, guided.id);
}

double linf_distance(const Points& a, const Points& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("linf_distance: shape mismatch");
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

std::vector<Eigen::Index> farthest_point_sample(const Points& points, Eigen::Index k, Eigen::Index start) {
  const Eigen::Index n = points.rows();
  if (k < 0 || k > n) throw Error("farthest_point_sample: k exceeds point count");
  std::vector<Eigen::Index> chosen;
  if (k == 0) return chosen;
  chosen.reserve(static_cast<std::size_t>(k));
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index current = start;
  for (Eigen::Index s = 0; s < k; ++s) {
    chosen.push_back(current);
    const Eigen::RowVector3d p = points.row(current);
    Eigen::Index best = 0;
    double best_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (points.row(i) - p).squaredNorm();
      if (d < dist[i]) dist[i] = d;
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

std::vector<std::vector<Eigen::Index>> knn_indices(const Points& points, int k) {
  const Eigen::Index n = points.rows();
  const int kk = static_cast<int>(std::min<Eigen::Index>(k, std::max<Eigen::Index>(n - 1, 0)));
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(n));
  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  const Eigen::MatrixXd gram = points * points.transpose();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    auto dist = [&](Eigen::Index j) { return sq[i] + sq[j] - 2.0 * gram(i, j); };
    auto less = [&](Eigen::Index x, Eigen::Index y) {
      if (x == i) return false;
      if (y == i) return true;
      const double dx = dist(x), dy = dist(y);
      return dx < dy || (dx == dy && x < y);
    };
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), less);
    out[static_cast<std::size_t>(i)].assign(order.begin(), order.begin() + kk);
  }
  return out;
}

Eigen::Matrix3d view_rotation(int view_index, int n_views) {
  if (n_views < 1 || view_index < 0 || view_index >= n_views) throw Error("view_rotation: view index out of range");
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(view_index) / static_cast<double>(n_views);
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix3d r;
  r << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  return r;
}

std::vector<Eigen::Index> partial_shape_indices(const PointCloud& cloud, int view_index, int k_p, int n_views,
                                                std::uint64_t seed) {
  const Eigen::Index n = cloud.size();
  if (k_p < 1) throw Error("make_partial_shape: k_p must be positive");
  if (2 * static_cast<Eigen::Index>(k_p) > n) throw Error("make_partial_shape: k_p exceeds half the cloud");
  const Eigen::Matrix3d rot = view_rotation(view_index, n_views);
  // Row-vector convention: rotated = points * R^T.
  const Eigen::VectorXd axis = cloud.points * rot.row(0).transpose();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return axis[a] > axis[b]; });
  order.resize(static_cast<std::size_t>((n + 1) / 2));
  const Points visible = gather_rows(cloud.points, order);
  Rng rng(seed);
  const auto start = static_cast<Eigen::Index>(rng.index(order.size()));
  const auto local = farthest_point_sample(visible, k_p, start);
  std::vector<Eigen::Index> idx;
  idx.reserve(local.size());
  for (auto l : local) idx.push_back(order[static_cast<std::size_t>(l)]);
  return idx;
}

PartialShape make_partial_shape(const PointCloud& cloud, int view_index, int k_p, int n_views, std::uint64_t seed) {
  require_xyz(cloud.points, "make_partial_shape");
  const auto idx = partial_shape_indices(cloud, view_index, k_p, n_views, seed);
  return PartialShape(gather_rows(cloud.points, idx), cloud.id, view_index);
}

Points concat_rows(const Points& a, const Points& b) {
  if (a.rows() == 0) return b;
  if (b.rows() == 0) return a;
  Points out(a.rows() + b.rows(), 3);
  out << a, b;
  return out;
}

Points gather_rows(const Points& points, const std::vector<Eigen::Index>& idx) {
  Points out(static_cast<Eigen::Index>(idx.size()), points.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(idx[i]);
  return out;
}

bool bit_identical(const Points& a, const Points& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace advshape
