#pragma once

// Density-based clustering of non-ground points: DBSCAN over a voxel hash
// grid, HDBSCAN (mutual-reachability MST, condensed tree, excess-of-mass
// selection with an epsilon merge threshold) and the minimum-size filter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <vector>

#include "psaforge/core.hpp"

namespace psaforge {

enum class ClusterAlgo { Dbscan, Hdbscan };

/// Tuned clustering epsilon per pretraining dataset.
struct EpsPreset {
  const char* dataset;
  double eps;
};
inline constexpr EpsPreset kEpsPresets[] = {{"waymo", 0.2}, {"nuscenes", 0.3}, {"semantickitti", 0.25}};
inline constexpr int kDefaultMinClusterSize = 20;

struct ClusterParams {
  ClusterAlgo algo = ClusterAlgo::Hdbscan;
  double eps = 0.2;
  int min_cluster_size = kDefaultMinClusterSize;
  /// DBSCAN min_pts / HDBSCAN min_samples; 0 means "same as min_cluster_size".
  int min_samples = 0;

  int effective_min_samples() const { return min_samples > 0 ? min_samples : min_cluster_size; }
};

/// Uniform voxel hash grid for fixed-radius neighbour queries.
class VoxelGrid {
 public:
  VoxelGrid(const std::vector<Vec3>& pts, double cell) : pts_(pts), inv_cell_(1.0 / cell) {
    cells_.reserve(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) cells_[key(cell_of(pts[i]))].push_back(i);
  }

  /// Indices within `radius` (inclusive) of point i, itself included, in
  /// ascending order. `radius` must not exceed the cell size.
  void neighbours(std::size_t i, double radius, std::vector<std::size_t>& out) const {
    out.clear();
    const double r2 = radius * radius;
    const auto c = cell_of(pts_[i]);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (auto j : it->second) {
            if (distance_sq(pts_[i], pts_[j]) <= r2) out.push_back(j);
          }
        }
      }
    }
    std::sort(out.begin(), out.end());
  }

 private:
  std::array<std::int64_t, 3> cell_of(Vec3 p) const {
    return {static_cast<std::int64_t>(std::floor(p.x * inv_cell_)),
            static_cast<std::int64_t>(std::floor(p.y * inv_cell_)),
            static_cast<std::int64_t>(std::floor(p.z * inv_cell_))};
  }
  static std::uint64_t key(const std::array<std::int64_t, 3>& c) {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto v : c) {
      h ^= static_cast<std::uint64_t>(v) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    }
    return h;
  }

  const std::vector<Vec3>& pts_;
  double inv_cell_;
  // Hash collisions only widen the candidate set; distances are rechecked.
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

/// DBSCAN with inclusive radius and self-inclusive neighbour counts. Clusters
/// are grown from core points in index order; a border point reachable from
/// several clusters keeps the first cluster that claims it.
inline std::vector<int> dbscan(const std::vector<Vec3>& pts, double eps, int min_pts) {
  if (!(eps > 0.0) || min_pts < 1) throw InvalidConfigError("dbscan requires eps > 0 and min_pts >= 1");
  const std::size_t n = pts.size();
  std::vector<int> labels(n, kUnlabeled);
  if (n == 0) return labels;

  VoxelGrid grid(pts, eps);
  std::vector<char> core(n, 0);
  std::vector<std::size_t> nb;
  for (std::size_t i = 0; i < n; ++i) {
    grid.neighbours(i, eps, nb);
    core[i] = nb.size() >= static_cast<std::size_t>(min_pts);
  }

  constexpr int kUnassigned = -2;
  std::fill(labels.begin(), labels.end(), kUnassigned);
  int next = 0;
  std::deque<std::size_t> frontier;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnassigned || !core[i]) continue;
    const int id = next++;
    labels[i] = id;
    frontier.push_back(i);
    while (!frontier.empty()) {
      const auto p = frontier.front();
      frontier.pop_front();
      grid.neighbours(p, eps, nb);
      for (auto q : nb) {
        if (labels[q] != kUnassigned) continue;
        labels[q] = id;
        if (core[q]) frontier.push_back(q);
      }
    }
  }
  for (auto& l : labels) {
    if (l == kUnassigned) l = kUnlabeled;
  }
  return labels;
}

/// Relabels clusters with fewer than `min_size` members to -1 and compacts the
/// rest to 0..K'-1 in order of first appearance.
inline std::vector<int> filter_small_clusters(const std::vector<int>& labels,
                                              int min_size = kDefaultMinClusterSize) {
  std::map<int, std::size_t> counts;
  for (int l : labels) {
    if (l >= 0) ++counts[l];
  }
  std::map<int, int> remap;
  int next = 0;
  std::vector<int> out(labels.size(), kUnlabeled);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || counts[l] < static_cast<std::size_t>(std::max(min_size, 0))) continue;
    auto [it, inserted] = remap.try_emplace(l, next);
    if (inserted) ++next;
    out[i] = it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// HDBSCAN

namespace detail {

/// Distance to the k-th nearest neighbour, the point itself counting as the
/// first. Brute force, O(N^2).
inline std::vector<double> core_distances(const std::vector<Vec3>& pts, int k) {
  const std::size_t n = pts.size();
  std::vector<double> core(n, 0.0);
  if (k <= 1 || n == 0) return core;
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n) - 1;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d2[j] = distance_sq(pts[i], pts[j]);
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(kk), d2.end());
    core[i] = std::sqrt(d2[kk]);
  }
  return core;
}

struct MstEdge {
  std::size_t a, b;
  double weight;
};

/// Prim's algorithm on the dense mutual-reachability graph.
inline std::vector<MstEdge> mutual_reachability_mst(const std::vector<Vec3>& pts,
                                                    const std::vector<double>& core) {
  const std::size_t n = pts.size();
  std::vector<MstEdge> edges;
  if (n < 2) return edges;
  edges.reserve(n - 1);
  std::vector<char> in_tree(n, 0);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> from(n, 0);
  std::size_t current = 0;
  in_tree[0] = 1;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t next = n;
    double next_w = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (in_tree[j]) continue;
      const double d = std::max({std::sqrt(distance_sq(pts[current], pts[j])), core[current], core[j]});
      if (d < best[j]) {
        best[j] = d;
        from[j] = current;
      }
      if (best[j] < next_w) {
        next_w = best[j];
        next = j;
      }
    }
    in_tree[next] = 1;
    edges.push_back({from[next], next, next_w});
    current = next;
  }
  std::stable_sort(edges.begin(), edges.end(),
                   [](const MstEdge& x, const MstEdge& y) { return x.weight < y.weight; });
  return edges;
}

struct LinkageNode {
  std::size_t left, right;
  double distance;
  std::size_t size;
};

/// Single-linkage dendrogram. Leaves are 0..n-1, merge i creates node n+i.
inline std::vector<LinkageNode> single_linkage(const std::vector<MstEdge>& edges, std::size_t n) {
  std::vector<std::size_t> parent(2 * n), size(2 * n, 1);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  std::vector<LinkageNode> out;
  out.reserve(edges.size());
  std::size_t next = n;
  for (const auto& e : edges) {
    const auto ra = find(e.a), rb = find(e.b);
    out.push_back({ra, rb, e.weight, size[ra] + size[rb]});
    parent[ra] = parent[rb] = next;
    size[next] = size[ra] + size[rb];
    ++next;
  }
  return out;
}

struct CondensedRow {
  std::size_t parent;  // cluster id (>= n)
  std::size_t child;   // point (< n) or cluster (>= n)
  double lambda;
  std::size_t child_size;
};

inline double to_lambda(double distance) { return 1.0 / std::max(distance, 1e-12); }

inline std::vector<CondensedRow> condense_tree(const std::vector<LinkageNode>& linkage,
                                               std::size_t n, std::size_t min_cluster_size) {
  std::vector<CondensedRow> rows;
  if (n == 0) return rows;
  if (n == 1) {
    rows.push_back({1, 0, to_lambda(0.0), 1});
    return rows;
  }
  const std::size_t root = 2 * n - 2;
  auto node_size = [&](std::size_t node) { return node < n ? std::size_t{1} : linkage[node - n].size; };
  auto leaves_of = [&](std::size_t node, auto&& emit) {
    std::vector<std::size_t> stack{node};
    while (!stack.empty()) {
      const auto x = stack.back();
      stack.pop_back();
      if (x < n) {
        emit(x);
      } else {
        stack.push_back(linkage[x - n].right);
        stack.push_back(linkage[x - n].left);
      }
    }
  };

  std::vector<std::size_t> relabel(2 * n - 1, 0);
  std::size_t next_label = n + 1;
  relabel[root] = n;
  // BFS over internal nodes that still carry a cluster.
  std::deque<std::size_t> queue{root};
  while (!queue.empty()) {
    const auto node = queue.front();
    queue.pop_front();
    const auto& link = linkage[node - n];
    const double lambda = to_lambda(link.distance);
    const auto lsize = node_size(link.left), rsize = node_size(link.right);
    const bool lbig = lsize >= min_cluster_size, rbig = rsize >= min_cluster_size;
    const std::size_t parent = relabel[node];
    auto fall_out = [&](std::size_t sub) {
      leaves_of(sub, [&](std::size_t leaf) { rows.push_back({parent, leaf, lambda, 1}); });
    };
    auto continue_as = [&](std::size_t child, std::size_t label) {
      if (child < n) {
        rows.push_back({parent, child, lambda, 1});
        return;
      }
      relabel[child] = label;
      queue.push_back(child);
    };
    if (lbig && rbig) {
      for (auto child : {link.left, link.right}) {
        const auto label = next_label++;
        rows.push_back({parent, label, lambda, node_size(child)});
        continue_as(child, label);
      }
    } else if (!lbig && !rbig) {
      fall_out(link.left);
      fall_out(link.right);
    } else if (!lbig) {
      fall_out(link.left);
      continue_as(link.right, parent);
    } else {
      fall_out(link.right);
      continue_as(link.left, parent);
    }
  }
  return rows;
}

}  // namespace detail

struct HdbscanParams {
  int min_cluster_size = kDefaultMinClusterSize;
  /// 0 means "same as min_cluster_size".
  int min_samples = 0;
  /// Clusters born below this distance merge into the ancestor that exists
  /// at this distance. 0 disables the merge.
  double selection_eps = 0.0;
};

/// HDBSCAN with excess-of-mass selection. The root may be selected, so a
/// single dense object yields one cluster; in that case only points that
/// fall out at a distance <= selection_eps (or at the deepest root split when
/// selection_eps is 0) are labelled. Clusters smaller than min_cluster_size
/// after labelling are dropped.
inline std::vector<int> hdbscan(const std::vector<Vec3>& pts, const HdbscanParams& params) {
  if (params.min_cluster_size < 2) throw InvalidConfigError("hdbscan requires min_cluster_size >= 2");
  if (params.selection_eps < 0.0) throw InvalidConfigError("selection_eps must be >= 0");
  const std::size_t n = pts.size();
  std::vector<int> labels(n, kUnlabeled);
  if (n < static_cast<std::size_t>(params.min_cluster_size)) return labels;

  const int min_samples = params.min_samples > 0 ? params.min_samples : params.min_cluster_size;
  const auto core = detail::core_distances(pts, min_samples);
  const auto mst = detail::mutual_reachability_mst(pts, core);
  const auto linkage = detail::single_linkage(mst, n);
  const auto rows =
      detail::condense_tree(linkage, n, static_cast<std::size_t>(params.min_cluster_size));

  const std::size_t root = n;
  std::size_t max_cluster = root;
  for (const auto& r : rows) max_cluster = std::max(max_cluster, std::max(r.parent, r.child));
  const std::size_t n_clusters = max_cluster - n + 1;
  auto idx = [&](std::size_t c) { return c - n; };

  std::vector<double> birth(n_clusters, 0.0), stability(n_clusters, 0.0);
  std::vector<std::size_t> parent_of(n_clusters, root);
  std::vector<std::vector<std::size_t>> children(n_clusters);
  std::vector<double> point_lambda(n, 0.0);
  std::vector<std::size_t> point_parent(n, root);
  for (const auto& r : rows) {
    if (r.child >= n) {
      birth[idx(r.child)] = r.lambda;
      parent_of[idx(r.child)] = r.parent;
      children[idx(r.parent)].push_back(r.child);
    } else {
      point_lambda[r.child] = r.lambda;
      point_parent[r.child] = r.parent;
    }
  }
  for (const auto& r : rows) {
    stability[idx(r.parent)] += (r.lambda - birth[idx(r.parent)]) * static_cast<double>(r.child_size);
  }

  // Excess of mass, children before parents (ids increase with depth).
  std::vector<char> selected(n_clusters, 0);
  auto deselect_below = [&](std::size_t c) {
    std::vector<std::size_t> stack(children[idx(c)].begin(), children[idx(c)].end());
    while (!stack.empty()) {
      const auto x = stack.back();
      stack.pop_back();
      selected[idx(x)] = 0;
      for (auto ch : children[idx(x)]) stack.push_back(ch);
    }
  };
  std::vector<double> subtree = stability;
  for (std::size_t k = n_clusters; k-- > 0;) {
    const std::size_t c = k + n;
    double child_sum = 0.0;
    for (auto ch : children[k]) child_sum += subtree[idx(ch)];
    if (!children[k].empty() && child_sum > stability[k]) {
      subtree[k] = child_sum;
    } else {
      selected[k] = 1;
      deselect_below(c);
    }
  }

  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < n_clusters; ++k) {
    if (selected[k]) chosen.push_back(k + n);
  }

  const bool only_root = chosen.size() == 1 && chosen.front() == root;
  if (params.selection_eps > 0.0 && !only_root) {
    auto eps_of = [&](std::size_t c) { return 1.0 / birth[idx(c)]; };
    std::set<std::size_t> processed, result;
    for (auto leaf : chosen) {
      if (eps_of(leaf) >= params.selection_eps) {
        result.insert(leaf);
        continue;
      }
      if (processed.contains(leaf)) continue;
      std::size_t node = leaf;
      while (true) {
        const auto parent = parent_of[idx(node)];
        if (parent == root) {
          node = root;
          break;
        }
        if (eps_of(parent) > params.selection_eps) {
          node = parent;
          break;
        }
        node = parent;
      }
      result.insert(node);
      std::vector<std::size_t> stack{node};
      while (!stack.empty()) {
        const auto x = stack.back();
        stack.pop_back();
        for (auto ch : children[idx(x)]) {
          processed.insert(ch);
          stack.push_back(ch);
        }
      }
    }
    // Drop selections nested under another selection.
    chosen.clear();
    for (auto c : result) {
      bool nested = false;
      for (auto p = c; p != root;) {
        p = parent_of[idx(p)];
        if (result.contains(p)) {
          nested = true;
          break;
        }
      }
      if (!nested) chosen.push_back(c);
    }
  }

  std::vector<char> is_chosen(n_clusters, 0);
  for (auto c : chosen) is_chosen[idx(c)] = 1;
  double root_threshold = 0.0;
  if (params.selection_eps > 0.0) {
    root_threshold = 1.0 / params.selection_eps;
  } else {
    for (const auto& r : rows) {
      if (r.parent == root) root_threshold = std::max(root_threshold, r.lambda);
    }
  }

  std::map<std::size_t, int> compact;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = point_parent[i];
    while (c != root && !is_chosen[idx(c)]) c = parent_of[idx(c)];
    if (!is_chosen[idx(c)]) continue;
    if (c == root && point_lambda[i] < root_threshold) continue;
    auto [it, inserted] = compact.try_emplace(c, static_cast<int>(compact.size()));
    labels[i] = it->second;
  }
  return filter_small_clusters(labels, params.min_cluster_size);
}

/// Runs the configured algorithm and enforces the minimum cluster size.
inline std::vector<int> cluster_points(const std::vector<Vec3>& pts, const ClusterParams& params) {
  if (!(params.eps > 0.0)) throw InvalidConfigError("clustering eps must be > 0");
  if (params.algo == ClusterAlgo::Dbscan) {
    return filter_small_clusters(dbscan(pts, params.eps, params.effective_min_samples()),
                                 params.min_cluster_size);
  }
  return hdbscan(pts, {params.min_cluster_size, params.effective_min_samples(), params.eps});
}

}  // namespace psaforge
