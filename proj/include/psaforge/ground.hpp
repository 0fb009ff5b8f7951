#pragma once

// Ground / non-ground partition. Range-zoned RANSAC: the xy-range axis is cut
// into equal-count concentric zones and each zone gets its own plane, seeded
// from the lowest fraction of its points.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "psaforge/core.hpp"

namespace psaforge {

struct GroundParams {
  int iterations = 200;
  double inlier_threshold = 0.25;
  int zones = 4;
  double seed_fraction = 0.3;
  /// Candidate planes steeper than this are rejected.
  double max_tilt_deg = 30.0;
  /// Least-squares refinement uses points within this fraction of the threshold.
  double refine_band = 0.4;
};

struct ZonedGroundModel {
  /// Outer xy-radius of each zone; the last entry is +inf.
  std::vector<double> zone_outer_radius;
  std::vector<GroundModel> planes;
  /// Fit over the whole cloud; used for zones too sparse to fit alone.
  GroundModel global;
  /// Best-so-far inlier count after each RANSAC iteration, per zone.
  std::vector<std::vector<std::size_t>> best_inlier_trace;

  static ZonedGroundModel single(const GroundModel& plane) {
    ZonedGroundModel m;
    m.zone_outer_radius = {std::numeric_limits<double>::infinity()};
    m.planes = {plane};
    m.global = plane;
    return m;
  }

  const GroundModel& plane_at(double x, double y) const {
    const double r = std::hypot(x, y);
    for (std::size_t z = 0; z < zone_outer_radius.size(); ++z) {
      if (r < zone_outer_radius[z]) return planes[z];
    }
    return planes.empty() ? global : planes.back();
  }

  double height_at(double x, double y) const { return plane_at(x, y).height_at(x, y); }
  double signed_distance(Vec3 p) const { return plane_at(p.x, p.y).signed_distance(p); }
};

namespace detail {

inline std::optional<GroundModel> plane_through(Vec3 p0, Vec3 p1, Vec3 p2, double threshold) {
  Vec3 n = (p1 - p0).cross(p2 - p0);
  const double len = n.norm();
  if (!(len > 1e-12)) return std::nullopt;
  n = (1.0 / len) * n;
  if (n.z < 0.0) n = -1.0 * n;
  if (n.z == 0.0) return std::nullopt;
  return GroundModel{n.x, n.y, n.z, -n.dot(p0), threshold};
}

inline std::size_t count_inliers(const std::vector<Vec3>& pts, const std::vector<std::size_t>& idx,
                                 const GroundModel& m) {
  std::size_t n = 0;
  for (auto i : idx) {
    if (std::abs(m.signed_distance(pts[i])) <= m.inlier_threshold) ++n;
  }
  return n;
}

/// Total least-squares plane through the points within `band` of `m`.
inline std::optional<GroundModel> refine_plane(const std::vector<Vec3>& pts,
                                               const std::vector<std::size_t>& idx,
                                               const GroundModel& m, double band) {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  std::size_t n = 0;
  for (auto i : idx) {
    if (std::abs(m.signed_distance(pts[i])) <= band) {
      mean += Eigen::Vector3d(pts[i].x, pts[i].y, pts[i].z);
      ++n;
    }
  }
  if (n < 3) return std::nullopt;
  mean /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (auto i : idx) {
    if (std::abs(m.signed_distance(pts[i])) <= band) {
      const Eigen::Vector3d d = Eigen::Vector3d(pts[i].x, pts[i].y, pts[i].z) - mean;
      cov += d * d.transpose();
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  Eigen::Vector3d normal = es.eigenvectors().col(0);
  if (normal.z() < 0.0) normal = -normal;
  if (!(normal.z() > 0.0)) return std::nullopt;
  normal.normalize();
  return GroundModel{normal.x(), normal.y(), normal.z(), -normal.dot(mean), m.inlier_threshold};
}

struct RansacResult {
  GroundModel model;
  std::size_t inliers = 0;
  std::vector<std::size_t> trace;
};

/// RANSAC over `idx` with hypotheses drawn from the lowest points of `idx`.
inline std::optional<RansacResult> ransac_plane(const std::vector<Vec3>& pts,
                                                const std::vector<std::size_t>& idx,
                                                SeededRng& rng, const GroundParams& params) {
  if (idx.size() < 3) return std::nullopt;
  std::vector<std::size_t> seeds = idx;
  std::stable_sort(seeds.begin(), seeds.end(),
                   [&](std::size_t a, std::size_t b) { return pts[a].z < pts[b].z; });
  const auto wanted = static_cast<std::size_t>(
      std::ceil(params.seed_fraction * static_cast<double>(idx.size())));
  seeds.resize(std::min(idx.size(), std::max<std::size_t>(3, wanted)));

  const double min_c = std::cos(params.max_tilt_deg * kPi / 180.0);
  RansacResult best;
  bool found = false;
  best.trace.reserve(static_cast<std::size_t>(params.iterations));
  for (int it = 0; it < params.iterations; ++it) {
    const auto a = rng.uniform_index(seeds.size());
    auto b = rng.uniform_index(seeds.size() - 1);
    if (b >= a) ++b;
    auto c = rng.uniform_index(seeds.size() - 2);
    for (auto taken : {std::min(a, b), std::max(a, b)}) {
      if (c >= taken) ++c;
    }
    const auto plane =
        plane_through(pts[seeds[a]], pts[seeds[b]], pts[seeds[c]], params.inlier_threshold);
    if (plane && plane->c >= min_c) {
      const auto count = count_inliers(pts, idx, *plane);
      if (!found || count > best.inliers) {
        best.model = *plane;
        best.inliers = count;
        found = true;
      }
    }
    best.trace.push_back(best.inliers);
  }
  if (!found) return std::nullopt;
  // Refit on a narrower band so object bases standing inside the inlier
  // slab do not tilt the plane.
  for (int pass = 0; pass < 5; ++pass) {
    const auto refined = refine_plane(pts, idx, best.model, params.refine_band * params.inlier_threshold);
    if (!refined || refined->c < min_c) break;
    best.model = *refined;
    best.inliers = count_inliers(pts, idx, *refined);
  }
  return best;
}

}  // namespace detail

/// Fits one plane per range zone. Throws NoGroundError when the cloud has
/// fewer than three points or no non-degenerate, near-horizontal plane exists.
inline ZonedGroundModel fit_ground(const PointCloud& cloud, SeededRng& rng,
                                   const GroundParams& params = {}) {
  if (params.iterations < 1 || params.zones < 1 || !(params.inlier_threshold > 0.0)) {
    throw InvalidConfigError("ground parameters out of range");
  }
  if (cloud.size() < 3) {
    throw NoGroundError("fewer than 3 candidate ground points in '" + cloud.frame_id + "'");
  }
  std::vector<Vec3> pts;
  pts.reserve(cloud.size());
  for (const auto& p : cloud.points) pts.push_back(p.xyz());

  std::vector<std::size_t> all(pts.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto global = detail::ransac_plane(pts, all, rng, params);
  if (!global) throw NoGroundError("no ground plane candidate in '" + cloud.frame_id + "'");

  ZonedGroundModel model;
  model.global = global->model;

  std::vector<double> radii(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) radii[i] = std::hypot(pts[i].x, pts[i].y);
  std::vector<double> sorted = radii;
  std::sort(sorted.begin(), sorted.end());
  for (int z = 1; z < params.zones; ++z) {
    const auto k = sorted.size() * static_cast<std::size_t>(z) / static_cast<std::size_t>(params.zones);
    model.zone_outer_radius.push_back(sorted[k]);
  }
  model.zone_outer_radius.push_back(std::numeric_limits<double>::infinity());

  std::vector<std::vector<std::size_t>> zone_idx(model.zone_outer_radius.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t z = 0;
    while (radii[i] >= model.zone_outer_radius[z]) ++z;
    zone_idx[z].push_back(i);
  }
  for (const auto& idx : zone_idx) {
    auto fit = detail::ransac_plane(pts, idx, rng, params);
    if (fit) {
      model.planes.push_back(fit->model);
      model.best_inlier_trace.push_back(std::move(fit->trace));
    } else {
      model.planes.push_back(model.global);
      model.best_inlier_trace.emplace_back();
    }
  }
  return model;
}

struct GroundSplit {
  std::vector<std::size_t> ground;
  std::vector<std::size_t> nonground;
};

/// A point is ground iff |signed distance to its zone's plane| <= threshold.
inline GroundSplit split_ground(const PointCloud& cloud, const ZonedGroundModel& model) {
  GroundSplit split;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& plane = model.plane_at(cloud.points[i].x, cloud.points[i].y);
    if (std::abs(plane.signed_distance(cloud.points[i].xyz())) <= plane.inlier_threshold) {
      split.ground.push_back(i);
    } else {
      split.nonground.push_back(i);
    }
  }
  return split;
}

inline GroundSplit split_ground(const PointCloud& cloud, const GroundModel& model) {
  return split_ground(cloud, ZonedGroundModel::single(model));
}

}  // namespace psaforge
