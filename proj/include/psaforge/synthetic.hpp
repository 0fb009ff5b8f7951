#pragma once

// Procedural scenes: a flat ground disk in sensor coordinates plus upright
// cuboid objects sampled on their side and top faces, and dense spherical
// shells for sensor re-simulation.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "psaforge/core.hpp"

namespace psaforge {

struct SceneParams {
  /// The ground sits at z = -sensor_height.
  double sensor_height = 1.73;
  double ground_radius = 20.0;
  double ground_spacing = 0.3;
  double ground_noise = 0.02;
  int min_objects = 3;
  int max_objects = 5;
  double min_footprint = 1.0;
  double max_footprint = 4.0;
  double min_height = 1.0;
  double max_height = 2.5;
  double surface_spacing = 0.1;
  double surface_noise = 0.005;
  /// Clearance between object footprints (circumscribed circles).
  double min_gap = 2.0;
  double min_range = 4.0;
  double max_range = 15.0;
};

struct SyntheticScene {
  /// Labels hold the generating object's index, -1 for ground.
  PointCloud cloud;
  std::vector<Box3D> boxes;
};

namespace detail {

/// Jittered grid samples on a w x h rectangle, one sample per cell.
template <typename Emit>
void sample_face(SeededRng& rng, double w, double h, double spacing, Emit&& emit) {
  const int nu = std::max(1, static_cast<int>(std::ceil(w / spacing)));
  const int nv = std::max(1, static_cast<int>(std::ceil(h / spacing)));
  for (int i = 0; i < nu; ++i) {
    for (int j = 0; j < nv; ++j) {
      const double u = (i + rng.uniform()) * w / nu;
      const double v = (j + rng.uniform()) * h / nv;
      emit(u, v);
    }
  }
}

}  // namespace detail

/// Surface samples of an upright box (4 sides + top), in world coordinates.
inline std::vector<Point> sample_box_surface(SeededRng& rng, const Box3D& b, double spacing, double noise,
                                             double intensity_lo = 0.3, double intensity_hi = 1.0) {
  std::vector<Point> out;
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  auto emit_local = [&](double u, double v, double w) {
    u += noise * rng.normal();
    v += noise * rng.normal();
    w += noise * rng.normal();
    out.push_back({b.cx + c * u - s * v, b.cy + s * u + c * v, b.cz + w,
                   rng.uniform(intensity_lo, intensity_hi)});
  };
  const double hx = b.dx / 2, hy = b.dy / 2, hz = b.dz / 2;
  for (double side : {-1.0, 1.0}) {
    detail::sample_face(rng, b.dx, b.dz, spacing,
                        [&](double u, double w) { emit_local(u - hx, side * hy, w - hz); });
    detail::sample_face(rng, b.dy, b.dz, spacing,
                        [&](double v, double w) { emit_local(side * hx, v - hy, w - hz); });
  }
  detail::sample_face(rng, b.dx, b.dy, spacing,
                      [&](double u, double v) { emit_local(u - hx, v - hy, hz); });
  return out;
}

inline SyntheticScene generate_scene(SeededRng& rng, const SceneParams& p = {},
                                     std::string frame_id = "synthetic") {
  SyntheticScene scene;
  scene.cloud.frame_id = std::move(frame_id);
  const double ground_z = -p.sensor_height;

  const auto n_objects = static_cast<int>(rng.uniform_int(p.min_objects, p.max_objects));
  for (int attempt = 0; attempt < 200 && static_cast<int>(scene.boxes.size()) < n_objects; ++attempt) {
    Box3D b;
    const double a = rng.uniform(p.min_footprint, p.max_footprint);
    const double c = rng.uniform(p.min_footprint, p.max_footprint);
    b.dx = std::max(a, c);
    b.dy = std::min(a, c);
    b.dz = rng.uniform(p.min_height, p.max_height);
    b.heading = rng.uniform(-kPi / 2, kPi / 2);
    const double range = rng.uniform(p.min_range, p.max_range);
    const double az = rng.uniform(-kPi, kPi);
    b.cx = range * std::cos(az);
    b.cy = range * std::sin(az);
    b.cz = ground_z + b.dz / 2;
    const double r = 0.5 * std::hypot(b.dx, b.dy);
    bool clear = std::hypot(b.cx, b.cy) - r > 1.0;
    for (const auto& o : scene.boxes) {
      const double ro = 0.5 * std::hypot(o.dx, o.dy);
      if (std::hypot(b.cx - o.cx, b.cy - o.cy) < r + ro + p.min_gap) clear = false;
    }
    if (!clear) continue;
    b.cluster_id = static_cast<int>(scene.boxes.size());
    scene.boxes.push_back(b);
  }

  auto under_object = [&](double x, double y) {
    for (const auto& o : scene.boxes) {
      Box3D tall = o;
      tall.dz = 1e6;
      if (tall.outside_distance({x, y, o.cz}) == 0.0) return true;
    }
    return false;
  };
  const int n = static_cast<int>(std::ceil(2 * p.ground_radius / p.ground_spacing));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double x = -p.ground_radius + (i + rng.uniform()) * p.ground_spacing;
      const double y = -p.ground_radius + (j + rng.uniform()) * p.ground_spacing;
      const double z = ground_z + p.ground_noise * rng.normal();
      const double intensity = rng.uniform(0.0, 0.3);
      if (std::hypot(x, y) > p.ground_radius || std::hypot(x, y) < 1.0 || under_object(x, y)) continue;
      scene.cloud.points.push_back({x, y, z, intensity});
      scene.cloud.labels.push_back(kUnlabeled);
    }
  }
  for (const auto& b : scene.boxes) {
    for (const auto& pt : sample_box_surface(rng, b, p.surface_spacing, p.surface_noise)) {
      scene.cloud.points.push_back(pt);
      scene.cloud.labels.push_back(b.cluster_id);
    }
  }
  return scene;
}

/// Points at uniformly random azimuth, elevation in [elev_lo, elev_hi]
/// degrees and range in [range_lo, range_hi].
inline PointCloud dense_shell(SeededRng& rng, std::size_t n, double elev_lo_deg = -25.0,
                              double elev_hi_deg = 5.0, double range_lo = 5.0, double range_hi = 50.0) {
  PointCloud cloud;
  cloud.frame_id = "shell";
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double az = rng.uniform(-kPi, kPi);
    const double el = rng.uniform(elev_lo_deg, elev_hi_deg) * kPi / 180.0;
    const double r = rng.uniform(range_lo, range_hi);
    cloud.points.push_back({r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az),
                            r * std::sin(el), rng.uniform()});
  }
  return cloud;
}

}  // namespace psaforge
