#include <gtest/gtest.h>

#include "psaforge/ground.hpp"
#include "psaforge/synthetic.hpp"

using namespace psaforge;

TEST(Ground, TwoPointsHaveNoGround) {
  PointCloud c;
  c.points = {{0, 0, 0, 0}, {1, 0, 0, 0}};
  SeededRng rng(0);
  EXPECT_THROW(fit_ground(c, rng), NoGroundError);
}

TEST(Ground, OnPlanePointIsGroundAndHighPointIsNot) {
  const GroundModel plane{0, 0, 1, 1.5, 0.25};  // z = -1.5
  PointCloud c;
  c.points = {{3, 4, -1.5, 0}, {3, 4, -0.5, 0}};
  const auto split = split_ground(c, plane);
  EXPECT_EQ(split.ground, std::vector<std::size_t>{0});
  EXPECT_EQ(split.nonground, std::vector<std::size_t>{1});
}

TEST(Ground, ThresholdIsInclusive) {
  const GroundModel plane{0, 0, 1, 0, 0.25};
  PointCloud c;
  c.points = {{0, 0, 0.25, 0}, {0, 0, -0.25, 0}, {0, 0, 0.2500001, 0}};
  const auto split = split_ground(c, plane);
  EXPECT_EQ(split.ground.size(), 2u);
}

TEST(Ground, SplitIsAPartitionOnRandomClouds) {
  SeededRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    PointCloud c;
    const auto n = rng.uniform_int(3, 400);
    for (std::int64_t i = 0; i < n; ++i) {
      c.points.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 3), 0});
    }
    SeededRng fit_rng(trial);
    const auto model = fit_ground(c, fit_rng);
    const auto split = split_ground(c, model);
    std::vector<int> seen(c.size(), 0);
    for (auto i : split.ground) ++seen[i];
    for (auto i : split.nonground) ++seen[i];
    for (int s : seen) ASSERT_EQ(s, 1);
  }
}

TEST(Ground, FittedPlanesAreUnitUpwardAndWithinTilt) {
  SeededRng rng(5);
  const auto scene = generate_scene(rng);
  SeededRng fit_rng(1);
  const auto model = fit_ground(scene.cloud, fit_rng);
  for (const auto& p : model.planes) {
    EXPECT_TRUE(p.is_valid());
    EXPECT_GE(p.c, std::cos(30.0 * kPi / 180.0));
  }
}

TEST(Ground, DeterministicAndBestSoFarNonDecreasing) {
  SeededRng rng(8);
  const auto scene = generate_scene(rng);
  SeededRng a(42), b(42);
  const auto ma = fit_ground(scene.cloud, a);
  const auto mb = fit_ground(scene.cloud, b);
  ASSERT_EQ(ma.planes.size(), mb.planes.size());
  for (std::size_t z = 0; z < ma.planes.size(); ++z) {
    EXPECT_EQ(ma.planes[z].a, mb.planes[z].a);
    EXPECT_EQ(ma.planes[z].d, mb.planes[z].d);
    EXPECT_EQ(ma.best_inlier_trace[z], mb.best_inlier_trace[z]);
    const auto& t = ma.best_inlier_trace[z];
    EXPECT_EQ(t.size(), 200u);
    for (std::size_t i = 1; i < t.size(); ++i) EXPECT_GE(t[i], t[i - 1]);
  }
}

TEST(Ground, SyntheticScenesSeparateGroundFromObjects) {
  std::size_t plane_total = 0, plane_ground = 0, high_total = 0, high_nonground = 0;
  for (int s = 0; s < 10; ++s) {
    SeededRng rng(100 + s);
    SceneParams sp;
    const auto scene = generate_scene(rng, sp);
    SeededRng fit_rng(s);
    const auto model = fit_ground(scene.cloud, fit_rng);
    const auto split = split_ground(scene.cloud, model);
    std::vector<char> is_ground(scene.cloud.size(), 0);
    for (auto i : split.ground) is_ground[i] = 1;
    for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
      if (scene.cloud.labels[i] < 0) {
        ++plane_total;
        plane_ground += is_ground[i];
      } else if (scene.cloud.points[i].z + sp.sensor_height >= 0.5) {
        ++high_total;
        high_nonground += !is_ground[i];
      }
    }
  }
  EXPECT_GE(static_cast<double>(plane_ground), 0.99 * static_cast<double>(plane_total));
  EXPECT_GE(static_cast<double>(high_nonground), 0.99 * static_cast<double>(high_total));
}

TEST(Ground, ZoneFallsBackToGlobalWhenTooSparse) {
  PointCloud c;
  for (int i = 0; i < 50; ++i) c.points.push_back({1.0 + 0.1 * i, 0.05 * (i % 7), -1.7, 0});
  GroundParams gp;
  gp.zones = 40;  // ~1 point per zone
  SeededRng rng(3);
  const auto m = fit_ground(c, rng, gp);
  EXPECT_EQ(m.planes.size(), 40u);
  for (const auto& p : m.planes) EXPECT_TRUE(p.is_valid());
}
