#include <cmath>

#include <gtest/gtest.h>

#include "psaforge/cluster.hpp"
#include "support.hpp"

using namespace psaforge;
using namespace testing_support;

namespace {

std::vector<Vec3> blob(SeededRng& rng, Vec3 c, int n, double half_extent) {
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({c.x + rng.uniform(-half_extent, half_extent), c.y + rng.uniform(-half_extent, half_extent),
                   c.z + rng.uniform(-half_extent, half_extent)});
  }
  return out;
}

std::size_t count_clusters(const std::vector<int>& labels) {
  std::set<int> s;
  for (int l : labels) {
    if (l >= 0) s.insert(l);
  }
  return s.size();
}

}  // namespace

TEST(Dbscan, TwoSeparatedBlobs) {
  SeededRng rng(1);
  std::vector<Vec3> pts;
  // 30 points on a 0.05 m lattice line segment per blob, 5 m apart.
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 30; ++i) pts.push_back({5.0 * b + 0.05 * (i % 6), 0.05 * (i / 6), 0.0});
  }
  const auto labels = dbscan(pts, 0.2, 5);
  EXPECT_EQ(count_clusters(labels), 2u);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), -1), 0);
  EXPECT_TRUE(matches_oracle(labels, brute_force_dbscan(pts, 0.2, 5)));
}

TEST(Dbscan, IsolatedPointIsNoise) {
  EXPECT_EQ(dbscan({{0, 0, 0}}, 0.5, 2), std::vector<int>{-1});
}

TEST(Dbscan, EmptyInput) { EXPECT_TRUE(dbscan({}, 0.5, 2).empty()); }

TEST(Dbscan, MatchesBruteForceOracleOnRandomInstances) {
  SeededRng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = rng.uniform_int(1, 200);
    const double extent = rng.uniform(0.5, 4.0);
    const double eps = rng.uniform(0.1, 0.6);
    const int min_pts = static_cast<int>(rng.uniform_int(1, 8));
    std::vector<Vec3> pts;
    for (std::int64_t i = 0; i < n; ++i) {
      pts.push_back({rng.uniform(0, extent), rng.uniform(0, extent), rng.uniform(0, extent / 4)});
    }
    std::string why;
    ASSERT_TRUE(matches_oracle(dbscan(pts, eps, min_pts), brute_force_dbscan(pts, eps, min_pts), &why))
        << "trial " << trial << ": " << why;
  }
}

TEST(Dbscan, LabelsAreCompactAndInFirstCoreOrder) {
  SeededRng rng(3);
  auto pts = blob(rng, {10, 0, 0}, 25, 0.1);
  auto b = blob(rng, {0, 0, 0}, 25, 0.1);
  pts.insert(pts.end(), b.begin(), b.end());
  const auto labels = dbscan(pts, 0.3, 4);
  EXPECT_EQ(labels.front(), 0);
  EXPECT_EQ(labels.back(), 1);
}

TEST(Dbscan, InvariantUnderRigidMotion) {
  SeededRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 150; ++i) pts.push_back({rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 1)});
    const double a = rng.uniform(-kPi, kPi);
    const Vec3 t{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-5, 5)};
    std::vector<Vec3> moved;
    for (const auto& p : pts) {
      moved.push_back(Vec3{std::cos(a) * p.x - std::sin(a) * p.y, std::sin(a) * p.x + std::cos(a) * p.y, p.z} + t);
    }
    // Radius chosen away from pairwise-distance ties so rounding cannot flip
    // an edge.
    const auto la = dbscan(pts, 0.3137, 3);
    const auto lb = dbscan(moved, 0.3137, 3);
    const auto oracle = brute_force_dbscan(moved, 0.3137, 3);
    EXPECT_TRUE(matches_oracle(la, oracle));
    EXPECT_TRUE(matches_oracle(lb, oracle));
  }
}

TEST(FilterSmallClusters, NineteenDroppedTwentyKept) {
  std::vector<int> l19(19, 0), l20(20, 0);
  EXPECT_EQ(filter_small_clusters(l19, 20), std::vector<int>(19, -1));
  EXPECT_EQ(filter_small_clusters(l20, 20), l20);
}

TEST(FilterSmallClusters, CompactsInFirstAppearanceOrder) {
  std::vector<int> labels;
  labels.insert(labels.end(), 25, 0);
  labels.insert(labels.end(), 5, 1);
  labels.insert(labels.end(), 30, 2);
  const auto out = filter_small_clusters(labels, 20);
  EXPECT_EQ(out[0], 0);
  EXPECT_EQ(out[25], -1);
  EXPECT_EQ(out[30], 1);
  EXPECT_EQ(filter_small_clusters(out, 20), out);
}

TEST(Hdbscan, TwoBlobsMatchDbscanPartition) {
  SeededRng rng(5);
  auto pts = blob(rng, {0, 0, 0}, 40, 0.1);
  auto b = blob(rng, {6, 0, 0}, 40, 0.1);
  pts.insert(pts.end(), b.begin(), b.end());
  const auto h = hdbscan(pts, {20, 20, 0.5});
  EXPECT_EQ(count_clusters(h), 2u);
  EXPECT_TRUE(same_partition(h, dbscan(pts, 0.5, 20)));
}

TEST(Hdbscan, UndersizedBlobWithNoiseIsAllNoise) {
  SeededRng rng(6);
  auto pts = blob(rng, {0, 0, 0}, 19, 0.1);
  for (int i = 0; i < 5; ++i) pts.push_back({50.0 + 10 * i, 0, 0});
  const auto h = hdbscan(pts, {20, 20, 0.5});
  EXPECT_EQ(std::count(h.begin(), h.end(), -1), static_cast<long>(pts.size()));
}

TEST(Hdbscan, SingleDenseBlobIsOneCluster) {
  SeededRng rng(7);
  const auto pts = blob(rng, {1, 2, 3}, 60, 0.1);
  const auto h = hdbscan(pts, {20, 20, 0.5});
  EXPECT_EQ(h, std::vector<int>(60, 0));
  EXPECT_TRUE(matches_oracle(h, brute_force_dbscan(pts, 0.5, 20)));
}

TEST(Hdbscan, NeverEmitsClustersBelowMinimumSize) {
  SeededRng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Vec3> pts;
    const auto n = rng.uniform_int(10, 250);
    for (std::int64_t i = 0; i < n; ++i) pts.push_back({rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(0, 1)});
    const int mcs = static_cast<int>(rng.uniform_int(2, 25));
    const auto h = hdbscan(pts, {mcs, 0, rng.uniform(0.0, 0.5)});
    std::map<int, int> sizes;
    for (int l : h) {
      if (l >= 0) ++sizes[l];
    }
    for (const auto& [l, s] : sizes) EXPECT_GE(s, mcs);
  }
}

TEST(Hdbscan, MinimumClusterSizeBelowTwoRejected) {
  EXPECT_THROW(hdbscan({}, {1, 1, 0.0}), InvalidConfigError);
}

TEST(ClusterPoints, EnforcesMinimumSizeForDbscan) {
  SeededRng rng(9);
  auto pts = blob(rng, {0, 0, 0}, 25, 0.05);
  auto small = blob(rng, {5, 0, 0}, 10, 0.05);
  pts.insert(pts.end(), small.begin(), small.end());
  ClusterParams p;
  p.algo = ClusterAlgo::Dbscan;
  p.eps = 0.3;
  p.min_samples = 3;
  const auto labels = cluster_points(pts, p);
  EXPECT_EQ(count_clusters(labels), 1u);
  EXPECT_EQ(labels.back(), -1);
}

TEST(ClusterPoints, EpsPresetsHoldDatasetValues) {
  std::map<std::string, double> presets;
  for (const auto& p : kEpsPresets) presets[p.dataset] = p.eps;
  EXPECT_EQ(presets.at("waymo"), 0.2);
  EXPECT_EQ(presets.at("nuscenes"), 0.3);
  EXPECT_EQ(presets.at("semantickitti"), 0.25);
  EXPECT_EQ(kDefaultMinClusterSize, 20);
}
