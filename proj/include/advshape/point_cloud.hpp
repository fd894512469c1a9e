#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace advshape {

/// K x 3 coordinate block, one point per row.
using Points = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PointCloud {
  Points points;
  std::optional<int> label;
  std::string id;

  PointCloud() : points(0, 3) {}
  explicit PointCloud(Points p, std::optional<int> lbl = std::nullopt, std::string ident = {})
      : points(std::move(p)), label(lbl), id(std::move(ident)) {}

  [[nodiscard]] Eigen::Index size() const { return points.rows(); }
  [[nodiscard]] bool empty() const { return points.rows() == 0; }
};

/// Conditioning points for shape completion. Immutable once built.
class PartialShape {
 public:
  PartialShape(Points points, std::string source_id, int view_index)
      : points_(std::move(points)), source_id_(std::move(source_id)), view_index_(view_index) {}

  [[nodiscard]] const Points& points() const { return points_; }
  [[nodiscard]] const std::string& source_id() const { return source_id_; }
  [[nodiscard]] int view_index() const { return view_index_; }
  [[nodiscard]] Eigen::Index size() const { return points_.rows(); }

 private:
  Points points_;
  std::string source_id_;
  int view_index_;
};

struct SampleMask {
  std::vector<std::uint8_t> keep;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t kept() const;
  [[nodiscard]] std::vector<Eigen::Index> kept_indices() const;
};

struct DistanceReport {
  double chamfer = 0.0;
  double hausdorff = 0.0;
  double mse = 0.0;
};

/// Throws Error when a coordinate is NaN or infinite.
void require_finite(const Points& points, const char* what);

/// Centers on the centroid and scales to unit max norm.
PointCloud normalize(const PointCloud& cloud);

/// Keeps each point independently with probability 0.5. An empty draw is
/// retried once; a second empty draw keeps one uniformly chosen point.
std::pair<PointCloud, SampleMask> random_subsample(const PointCloud& free_points, std::uint64_t seed);
SampleMask draw_mask(Eigen::Index n, std::uint64_t seed);
Points apply_mask(const Points& points, const SampleMask& mask);

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance,
/// averaged over both directions.
double chamfer(const Points& a, const Points& b);
/// Largest nearest-neighbour distance over both directions.
double hausdorff(const Points& a, const Points& b);
/// Mean squared per-point displacement under index correspondence.
double mse(const Points& a, const Points& b);
DistanceReport distances(const Points& a, const Points& b);

inline double chamfer(const PointCloud& a, const PointCloud& b) { return chamfer(a.points, b.points); }
inline double hausdorff(const PointCloud& a, const PointCloud& b) { return hausdorff(a.points, b.points); }
inline double mse(const PointCloud& a, const PointCloud& b) { return mse(a.points, b.points); }

/// Coordinate-wise projection of `guided` into the eps box around `reference`.
Points linf_clip(const Points& guided, const Points& reference, double eps);
PointCloud linf_clip(const PointCloud& guided, const PointCloud& reference, double eps);
double linf_distance(const Points& a, const Points& b);

/// Greedy farthest-point sampling starting from `start`.
std::vector<Eigen::Index> farthest_point_sample(const Points& points, Eigen::Index k, Eigen::Index start = 0);

/// k nearest neighbours (excluding the point itself) for every row.
std::vector<std::vector<Eigen::Index>> knn_indices(const Points& points, int k);

/// Rotation about the vertical (y) axis for view `view_index` of `n_views`.
Eigen::Matrix3d view_rotation(int view_index, int n_views);

inline constexpr int kDefaultViews = 20;
inline constexpr int kDefaultPartialPoints = 200;
inline constexpr double kDefaultEps = 0.16;

/// Rotates the cloud into the view frame, keeps the half with view-axis (x)
/// coordinate at or above the median, farthest-point samples k_p points and
/// returns them in the original frame.
PartialShape make_partial_shape(const PointCloud& cloud, int view_index, int k_p, int n_views = kDefaultViews,
                                std::uint64_t seed = 0);

/// Full-cloud indices of the points not selected into the partial shape.
std::vector<Eigen::Index> partial_shape_indices(const PointCloud& cloud, int view_index, int k_p, int n_views,
                                                std::uint64_t seed);

Points concat_rows(const Points& a, const Points& b);
Points gather_rows(const Points& points, const std::vector<Eigen::Index>& idx);
bool bit_identical(const Points& a, const Points& b);

}  // namespace advshape
