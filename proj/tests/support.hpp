#pragma once

// Helpers shared by the test binaries: temporary directories, random
// clusters and an independent brute-force DBSCAN.

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "psaforge/core.hpp"

namespace testing_support {

namespace fs = std::filesystem;
using psaforge::Vec3;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("psaforge_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// Brute-force DBSCAN semantics: O(n^2) neighbourhoods (inclusive radius,
/// self counted), connected components of the core graph, and for every
/// border point the set of components it touches.
struct OracleResult {
  std::vector<int> core_component;  // -1 for non-core points
  std::vector<std::set<int>> border_components;
  std::size_t components = 0;
};

inline OracleResult brute_force_dbscan(const std::vector<Vec3>& pts, double eps, int min_pts) {
  const std::size_t n = pts.size();
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if ((pts[i] - pts[j]).norm() <= eps) nb[i].push_back(j);
    }
  }
  OracleResult r;
  r.core_component.assign(n, -1);
  r.border_components.resize(n);
  std::vector<char> core(n);
  for (std::size_t i = 0; i < n; ++i) core[i] = nb[i].size() >= static_cast<std::size_t>(min_pts);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (!core[s] || r.core_component[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    r.core_component[s] = next;
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for (auto j : nb[i]) {
        if (core[j] && r.core_component[j] < 0) {
          r.core_component[j] = next;
          stack.push_back(j);
        }
      }
    }
    ++next;
  }
  r.components = static_cast<std::size_t>(next);
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (auto j : nb[i]) {
      if (core[j]) r.border_components[i].insert(r.core_component[j]);
    }
  }
  return r;
}

/// True when `labels` agrees with the oracle: same partition of core points,
/// noise exactly where no core point is reachable, and each border point in
/// one of the clusters it touches.
inline bool matches_oracle(const std::vector<int>& labels, const OracleResult& o, std::string* why = nullptr) {
  std::map<int, int> comp_to_label, label_to_comp;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = o.core_component[i];
    if (c < 0) continue;
    if (labels[i] < 0) {
      if (why) *why = "core point " + std::to_string(i) + " unlabelled";
      return false;
    }
    auto [a, fresh_a] = comp_to_label.emplace(c, labels[i]);
    auto [b, fresh_b] = label_to_comp.emplace(labels[i], c);
    if (a->second != labels[i] || b->second != c) {
      if (why) *why = "core partition differs at point " + std::to_string(i);
      return false;
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (o.core_component[i] >= 0) continue;
    const auto& touch = o.border_components[i];
    if (touch.empty()) {
      if (labels[i] != -1) {
        if (why) *why = "noise point " + std::to_string(i) + " labelled";
        return false;
      }
      continue;
    }
    const auto it = label_to_comp.find(labels[i]);
    if (labels[i] < 0 || it == label_to_comp.end() || !touch.contains(it->second)) {
      if (why) *why = "border point " + std::to_string(i) + " in a cluster it does not touch";
      return false;
    }
  }
  return comp_to_label.size() == o.components;
}

/// Two labelings describe the same set partition (noise must coincide).
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] < 0) != (b[i] < 0)) return false;
    if (a[i] < 0) continue;
    auto [x, _1] = ab.emplace(a[i], b[i]);
    auto [y, _2] = ba.emplace(b[i], a[i]);
    if (x->second != b[i] || y->second != a[i]) return false;
  }
  return true;
}

}  // namespace testing_support
