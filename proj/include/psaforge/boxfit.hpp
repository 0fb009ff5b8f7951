#pragma once

// Pseudo-box generation: L-shape rectangle fitting, common-sense rejection
// rules and the ground -> cluster -> fit -> filter composition.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "psaforge/cluster.hpp"
#include "psaforge/core.hpp"
#include "psaforge/ground.hpp"

namespace psaforge {

struct LShapeParams {
  double grid_step_deg = 1.0;
  /// Golden-section refinement stops once the bracket is narrower than this.
  double refine_tol_rad = 1e-10;
  /// Added to every point's edge distance in the closeness score.
  double closeness_floor = 0.01;
  /// Number of best grid cells that get refined.
  int refine_candidates = 3;
  double min_dim = 0.05;
};

namespace detail {

struct XY {
  double x, y;
};

/// Closeness score of heading `theta`: each point contributes
/// 1 / (distance to its nearest rectangle edge + floor).
inline double closeness_score(const std::vector<XY>& pts, double theta, double floor) {
  const double c = std::cos(theta), s = std::sin(theta);
  double min1 = std::numeric_limits<double>::infinity(), max1 = -min1, min2 = min1, max2 = -min1;
  for (const auto& p : pts) {
    const double u = c * p.x + s * p.y, v = -s * p.x + c * p.y;
    min1 = std::min(min1, u), max1 = std::max(max1, u);
    min2 = std::min(min2, v), max2 = std::max(max2, v);
  }
  double score = 0.0;
  for (const auto& p : pts) {
    const double u = c * p.x + s * p.y, v = -s * p.x + c * p.y;
    const double d1 = std::min(max1 - u, u - min1);
    const double d2 = std::min(max2 - v, v - min2);
    score += 1.0 / (std::min(d1, d2) + floor);
  }
  return score;
}

template <typename F>
double golden_section_max(F&& f, double lo, double hi, double tol) {
  constexpr double kInvPhi = 0.6180339887498949;
  double a = lo, b = hi;
  double x1 = b - kInvPhi * (b - a), x2 = a + kInvPhi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 >= f2) {
      b = x2;
      x2 = x1, f2 = f1;
      x1 = b - kInvPhi * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2, f1 = f2;
      x2 = a + kInvPhi * (b - a);
      f2 = f(x2);
    }
  }
  return 0.5 * (a + b);
}

inline Box3D rectangle_at(const std::vector<Vec3>& pts, double theta, double min_dim) {
  const double c = std::cos(theta), s = std::sin(theta);
  double min1 = std::numeric_limits<double>::infinity(), max1 = -min1, min2 = min1, max2 = -min1;
  double minz = min1, maxz = -min1;
  for (const auto& p : pts) {
    const double u = c * p.x + s * p.y, v = -s * p.x + c * p.y;
    min1 = std::min(min1, u), max1 = std::max(max1, u);
    min2 = std::min(min2, v), max2 = std::max(max2, v);
    minz = std::min(minz, p.z), maxz = std::max(maxz, p.z);
  }
  const double mu = 0.5 * (min1 + max1), mv = 0.5 * (min2 + max2);
  Box3D b;
  b.cx = c * mu - s * mv;
  b.cy = s * mu + c * mv;
  b.cz = 0.5 * (minz + maxz);
  b.dx = std::max(max1 - min1, min_dim);
  b.dy = std::max(max2 - min2, min_dim);
  b.dz = std::max(maxz - minz, min_dim);
  b.heading = theta;
  return b;
}

}  // namespace detail

/// Fits an upright box by maximizing the closeness criterion over headings in
/// a 90 degree window. The heading grid is anchored on the principal xy axis
/// of the cluster, then the best cells are refined by golden-section search.
/// Collinear (or coincident) footprints fall back to an axis-aligned box.
inline Box3D lshape_fit(const std::vector<Vec3>& pts, const LShapeParams& params = {}) {
  if (pts.size() < 3) throw InvalidConfigError("lshape_fit needs at least 3 points");
  double mx = 0.0, my = 0.0;
  for (const auto& p : pts) mx += p.x, my += p.y;
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  std::vector<detail::XY> xy;
  xy.reserve(pts.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& p : pts) {
    xy.push_back({p.x - mx, p.y - my});
    cov(0, 0) += xy.back().x * xy.back().x;
    cov(0, 1) += xy.back().x * xy.back().y;
    cov(1, 1) += xy.back().y * xy.back().y;
  }
  cov(1, 0) = cov(0, 1);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  const double lmin = es.eigenvalues()(0), lmax = es.eigenvalues()(1);

  Box3D box;
  if (!(lmax > 1e-18) || lmin <= 1e-12 * lmax) {
    box = detail::rectangle_at(pts, 0.0, params.min_dim);
  } else {
    const Eigen::Vector2d major = es.eigenvectors().col(1);
    const double anchor = std::atan2(major.y(), major.x());
    const double step = params.grid_step_deg * kPi / 180.0;
    const int cells = std::max(1, static_cast<int>(std::lround(90.0 / params.grid_step_deg)));
    std::vector<std::pair<double, double>> grid;  // (score, theta)
    grid.reserve(static_cast<std::size_t>(cells));
    for (int k = 0; k < cells; ++k) {
      const double theta = anchor + k * step;
      grid.emplace_back(detail::closeness_score(xy, theta, params.closeness_floor), theta);
    }
    std::stable_sort(grid.begin(), grid.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    auto score = [&](double t) { return detail::closeness_score(xy, t, params.closeness_floor); };
    double best_theta = grid.front().second, best_score = -1.0;
    const auto n_ref = std::min<std::size_t>(grid.size(), static_cast<std::size_t>(std::max(1, params.refine_candidates)));
    for (std::size_t r = 0; r < n_ref; ++r) {
      const double t0 = grid[r].second;
      const double t = detail::golden_section_max(score, t0 - step, t0 + step, params.refine_tol_rad);
      const double s = score(t);
      if (s > best_score) {
        best_score = s;
        best_theta = t;
      }
    }
    box = detail::rectangle_at(pts, best_theta, params.min_dim);
  }
  box.canonicalize();
  return box;
}

struct CommonsenseParams {
  double max_volume_m3 = 150.0;
  double max_bottom_above_ground_m = 0.8;
  double min_top_above_ground_m = 0.3;
};

enum class Rejection { None, Volume, Floating, Underground };

/// First rule a box violates, checked in the order volume, floating,
/// underground. Without a ground model only the volume rule applies.
inline Rejection commonsense_check(const Box3D& box, const ZonedGroundModel* ground,
                                   const CommonsenseParams& params) {
  if (box.volume() > params.max_volume_m3) return Rejection::Volume;
  if (ground != nullptr) {
    const double g = ground->height_at(box.cx, box.cy);
    if (box.bottom() - g > params.max_bottom_above_ground_m) return Rejection::Floating;
    if (box.top() - g < params.min_top_above_ground_m) return Rejection::Underground;
  }
  return Rejection::None;
}

inline std::vector<Box3D> commonsense_filter(const std::vector<Box3D>& boxes,
                                             const ZonedGroundModel& ground,
                                             const CommonsenseParams& params = {}) {
  std::vector<Box3D> kept;
  for (const auto& b : boxes) {
    if (commonsense_check(b, &ground, params) == Rejection::None) kept.push_back(b);
  }
  return kept;
}

inline std::vector<Box3D> commonsense_filter(const std::vector<Box3D>& boxes, const GroundModel& ground,
                                             const CommonsenseParams& params = {}) {
  return commonsense_filter(boxes, ZonedGroundModel::single(ground), params);
}

struct PseudoBoxParams {
  GroundParams ground;
  ClusterParams cluster;
  CommonsenseParams filter;
  LShapeParams lshape;
};

struct PseudoBoxStats {
  bool ground_found = true;
  std::size_t ground_points = 0;
  std::size_t clusters = 0;
  std::size_t rejected_volume = 0;
  std::size_t rejected_floating = 0;
  std::size_t rejected_underground = 0;
  std::size_t kept = 0;
};

struct PseudoBoxes {
  /// Per point: index of the surviving box's cluster, or -1.
  std::vector<int> labels;
  std::vector<Box3D> boxes;
  PseudoBoxStats stats;
  std::optional<ZonedGroundModel> ground;
};

/// Ground split, clustering of non-ground points, box fitting and common-sense
/// filtering. Surviving clusters are renumbered 0..K-1 in cluster order and
/// box i carries cluster_id i.
inline PseudoBoxes generate_pseudo_boxes(const PointCloud& cloud, SeededRng& rng,
                                         const PseudoBoxParams& params = {}) {
  PseudoBoxes out;
  out.labels.assign(cloud.size(), kUnlabeled);
  std::vector<std::size_t> nonground;
  try {
    out.ground = fit_ground(cloud, rng, params.ground);
    const auto split = split_ground(cloud, *out.ground);
    nonground = split.nonground;
    out.stats.ground_points = split.ground.size();
  } catch (const NoGroundError&) {
    out.stats.ground_found = false;
    nonground.resize(cloud.size());
    std::iota(nonground.begin(), nonground.end(), std::size_t{0});
  }

  std::vector<Vec3> pts;
  pts.reserve(nonground.size());
  for (auto i : nonground) pts.push_back(cloud.points[i].xyz());
  const auto sub_labels = cluster_points(pts, params.cluster);

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t k = 0; k < sub_labels.size(); ++k) {
    if (sub_labels[k] >= 0) members[sub_labels[k]].push_back(k);
  }
  out.stats.clusters = members.size();
  const ZonedGroundModel* ground = out.ground ? &*out.ground : nullptr;
  int next = 0;
  for (const auto& [cid, idx] : members) {
    if (idx.size() < 3) continue;
    std::vector<Vec3> cluster;
    cluster.reserve(idx.size());
    for (auto k : idx) cluster.push_back(pts[k]);
    Box3D box = lshape_fit(cluster, params.lshape);
    switch (commonsense_check(box, ground, params.filter)) {
      case Rejection::Volume: ++out.stats.rejected_volume; continue;
      case Rejection::Floating: ++out.stats.rejected_floating; continue;
      case Rejection::Underground: ++out.stats.rejected_underground; continue;
      case Rejection::None: break;
    }
    box.cluster_id = next;
    for (auto k : idx) out.labels[nonground[k]] = next;
    out.boxes.push_back(box);
    ++next;
  }
  out.stats.kept = out.boxes.size();
  return out;
}

}  // namespace psaforge
