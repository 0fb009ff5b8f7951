#include <cmath>

#include <gtest/gtest.h>

#include "psaforge/boxfit.hpp"
#include "psaforge/synthetic.hpp"

using namespace psaforge;

namespace {

/// Perimeter samples of a dx x dy rectangle at heading `h`, on two z levels.
std::vector<Vec3> rectangle_perimeter(double cx, double cy, double dx, double dy, double h, double z0, double z1,
                                      int per_edge = 20) {
  std::vector<Vec3> out;
  const double c = std::cos(h), s = std::sin(h);
  auto emit = [&](double u, double v) {
    for (double z : {z0, z1}) out.push_back({cx + c * u - s * v, cy + s * u + c * v, z});
  };
  for (int i = 0; i <= per_edge; ++i) {
    const double t = static_cast<double>(i) / per_edge;
    emit(-dx / 2 + t * dx, -dy / 2);
    emit(-dx / 2 + t * dx, dy / 2);
    emit(-dx / 2, -dy / 2 + t * dy);
    emit(dx / 2, -dy / 2 + t * dy);
  }
  return out;
}

double heading_gap(double a, double b) {
  // Box headings are equivalent modulo pi.
  double d = std::fmod(std::abs(a - b), kPi);
  return std::min(d, kPi - d);
}

}  // namespace

TEST(LShape, AxisAlignedRectangle) {
  const auto pts = rectangle_perimeter(0, 0, 4, 2, 0.0, 0, 1.5);
  const auto b = lshape_fit(pts);
  EXPECT_NEAR(b.cx, 0, 1e-6);
  EXPECT_NEAR(b.cy, 0, 1e-6);
  EXPECT_NEAR(b.cz, 0.75, 1e-9);
  EXPECT_NEAR(b.dx, 4, 1e-6);
  EXPECT_NEAR(b.dy, 2, 1e-6);
  EXPECT_NEAR(b.dz, 1.5, 1e-9);
  EXPECT_NEAR(heading_gap(b.heading, 0.0), 0.0, 1e-6);
}

TEST(LShape, RotatedThirtyDegrees) {
  const double h = 30.0 * kPi / 180.0;
  const auto pts = rectangle_perimeter(5, -3, 4, 2, h, -1, 0.5);
  const auto b = lshape_fit(pts);
  EXPECT_NEAR(heading_gap(b.heading, h), 0.0, 1e-6);
  EXPECT_NEAR(b.dx, 4, 1e-6);
  EXPECT_NEAR(b.dy, 2, 1e-6);
  EXPECT_NEAR(b.cx, 5, 1e-6);
  EXPECT_NEAR(b.cy, -3, 1e-6);
}

TEST(LShape, CollinearPointsGiveMinimumWidth) {
  std::vector<Vec3> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({0.5 * i, 0.0, 0.0});
  const auto b = lshape_fit(pts);
  EXPECT_TRUE(b.is_valid());
  EXPECT_NEAR(b.dx, 4.5, 1e-12);
  EXPECT_EQ(b.dy, 0.05);
  EXPECT_EQ(b.dz, 0.05);
  EXPECT_NEAR(heading_gap(b.heading, 0.0), 0.0, 1e-12);
}

TEST(LShape, FewerThanThreePointsRejected) {
  EXPECT_THROW(lshape_fit({{0, 0, 0}, {1, 0, 0}}), InvalidConfigError);
}

TEST(LShape, ContainsEveryInputPointAndIsCanonical) {
  SeededRng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec3> pts;
    const auto n = rng.uniform_int(3, 300);
    for (std::int64_t i = 0; i < n; ++i) {
      pts.push_back({rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(0, 2)});
    }
    const auto b = lshape_fit(pts);
    EXPECT_TRUE(b.is_valid());
    EXPECT_GE(b.dx, b.dy);
    EXPECT_GE(b.heading, -kPi / 2);
    EXPECT_LT(b.heading, kPi / 2);
    for (const auto& p : pts) ASSERT_LE(b.outside_distance(p), 1e-9);
  }
}

TEST(LShape, FootprintIsTightAtFittedHeading) {
  // No smaller box with the same heading contains the points: every face
  // touches at least one point.
  SeededRng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 80; ++i) pts.push_back({rng.uniform(0, 4), rng.uniform(0, 2), rng.uniform(0, 1)});
    const auto b = lshape_fit(pts);
    const double c = std::cos(b.heading), s = std::sin(b.heading);
    double umin = 1e9, umax = -1e9, vmin = 1e9, vmax = -1e9;
    for (const auto& p : pts) {
      const double u = c * (p.x - b.cx) + s * (p.y - b.cy), v = -s * (p.x - b.cx) + c * (p.y - b.cy);
      umin = std::min(umin, u), umax = std::max(umax, u);
      vmin = std::min(vmin, v), vmax = std::max(vmax, v);
    }
    EXPECT_NEAR(umax - umin, b.dx, 1e-9);
    EXPECT_NEAR(vmax - vmin, b.dy, 1e-9);
  }
}

TEST(LShape, EquivariantUnderRigidMotion) {
  SeededRng rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    const double h0 = rng.uniform(-kPi, kPi);
    auto pts = rectangle_perimeter(0, 0, rng.uniform(2, 5), rng.uniform(0.8, 1.9), h0, 0, 1.5, 12);
    for (auto& p : pts) p = p + Vec3{rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01), 0};
    const auto a = lshape_fit(pts);
    const double r = rng.uniform(-kPi, kPi);
    const Vec3 t{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-2, 2)};
    std::vector<Vec3> moved;
    for (const auto& p : pts) {
      moved.push_back(Vec3{std::cos(r) * p.x - std::sin(r) * p.y, std::sin(r) * p.x + std::cos(r) * p.y, p.z} + t);
    }
    const auto b = lshape_fit(moved);
    EXPECT_NEAR(b.dx, a.dx, 1e-6);
    EXPECT_NEAR(b.dy, a.dy, 1e-6);
    EXPECT_NEAR(b.dz, a.dz, 1e-9);
    EXPECT_NEAR(heading_gap(b.heading, a.heading + r), 0.0, 1e-6);
    const Vec3 ac{std::cos(r) * a.cx - std::sin(r) * a.cy, std::sin(r) * a.cx + std::cos(r) * a.cy, a.cz};
    EXPECT_NEAR((b.center() - (ac + t)).norm(), 0.0, 1e-6);
  }
}

TEST(Commonsense, RejectsInRuleOrder) {
  const GroundModel ground{0, 0, 1, 1.73, 0.25};  // z = -1.73
  const auto zoned = ZonedGroundModel::single(ground);
  Box3D car{10, 0, -0.98, 4, 2, 1.5, 0, 0};
  EXPECT_EQ(commonsense_check(car, &zoned, {}), Rejection::None);
  Box3D huge = car;
  huge.dx = 10, huge.dy = 5, huge.dz = 4;  // 200 m^3
  EXPECT_EQ(commonsense_check(huge, &zoned, {}), Rejection::Volume);
  Box3D floating = car;
  floating.cz = 0.5;  // bottom 1.48 m above ground
  EXPECT_EQ(commonsense_check(floating, &zoned, {}), Rejection::Floating);
  Box3D flat = car;
  flat.dz = 0.2;
  flat.cz = -1.63;  // top 0.2 m above ground
  EXPECT_EQ(commonsense_check(flat, &zoned, {}), Rejection::Underground);
  EXPECT_EQ(commonsense_filter({car, huge, floating, flat}, ground).size(), 1u);
}

TEST(Commonsense, VolumeBoundaryIsInclusive) {
  Box3D b{0, 0, 0, 10, 5, 3, 0, 0};  // exactly 150 m^3
  EXPECT_EQ(commonsense_check(b, nullptr, {}), Rejection::None);
  b.dz = 3.0001;
  EXPECT_EQ(commonsense_check(b, nullptr, {}), Rejection::Volume);
}

TEST(Commonsense, FilterIsMonotoneInThresholds) {
  SeededRng rng(15);
  const GroundModel ground{0, 0, 1, 1.73, 0.25};
  std::vector<Box3D> boxes;
  for (int i = 0; i < 200; ++i) {
    boxes.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 1), rng.uniform(0.1, 8),
                     rng.uniform(0.1, 6), rng.uniform(0.1, 4), 0, i});
  }
  CommonsenseParams strict{50.0, 0.3, 0.6}, loose{300.0, 1.5, 0.1};
  const auto a = commonsense_filter(boxes, ground, strict);
  const auto b = commonsense_filter(boxes, ground, loose);
  std::set<int> kept_loose;
  for (const auto& x : b) kept_loose.insert(x.cluster_id);
  for (const auto& x : a) EXPECT_TRUE(kept_loose.contains(x.cluster_id));
  EXPECT_LE(a.size(), b.size());
}

TEST(PseudoBoxes, ThreeObjectsGiveThreeBoxes) {
  SeededRng rng(21);
  SceneParams sp;
  sp.min_objects = sp.max_objects = 3;
  const auto scene = generate_scene(rng, sp);
  SeededRng fit_rng(1);
  const auto pb = generate_pseudo_boxes(scene.cloud, fit_rng);
  ASSERT_EQ(pb.boxes.size(), 3u);
  EXPECT_EQ(pb.stats.kept, 3u);
  for (std::size_t k = 0; k < pb.boxes.size(); ++k) EXPECT_EQ(pb.boxes[k].cluster_id, static_cast<int>(k));
  // Each pseudo box lies near one generated object.
  for (const auto& b : pb.boxes) {
    double best = 1e9;
    for (const auto& t : scene.boxes) best = std::min(best, std::hypot(b.cx - t.cx, b.cy - t.cy));
    EXPECT_LT(best, 0.3);
  }
  // Labels point only at surviving boxes.
  for (int l : pb.labels) EXPECT_LT(l, 3);
}

TEST(PseudoBoxes, SmallObjectGivesNoBox) {
  SeededRng rng(22);
  SceneParams sp;
  sp.min_objects = sp.max_objects = 0;
  auto scene = generate_scene(rng, sp);
  for (int i = 0; i < 5; ++i) scene.cloud.points.push_back({8.0 + 0.05 * i, 0.0, 0.0, 0.5});
  scene.cloud.labels.assign(scene.cloud.size(), -1);
  SeededRng fit_rng(2);
  const auto pb = generate_pseudo_boxes(scene.cloud, fit_rng);
  EXPECT_TRUE(pb.boxes.empty());
  EXPECT_EQ(pb.labels, std::vector<int>(scene.cloud.size(), -1));
}

TEST(PseudoBoxes, GroundOnlySceneGivesNoBoxes) {
  SeededRng rng(23);
  SceneParams sp;
  sp.min_objects = sp.max_objects = 0;
  const auto scene = generate_scene(rng, sp);
  SeededRng fit_rng(3);
  const auto pb = generate_pseudo_boxes(scene.cloud, fit_rng);
  EXPECT_TRUE(pb.boxes.empty());
  EXPECT_TRUE(pb.stats.ground_found);
}

TEST(PseudoBoxes, TinyCloudWithoutGroundStillClusters) {
  PointCloud c;
  c.points = {{0, 0, 0, 0}, {0.1, 0, 0, 0}};
  SeededRng rng(4);
  const auto pb = generate_pseudo_boxes(c, rng);
  EXPECT_FALSE(pb.stats.ground_found);
  EXPECT_TRUE(pb.boxes.empty());
}
