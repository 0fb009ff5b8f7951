#pragma once

// Domain types, error hierarchy and the deterministic RNG shared by every
// stage of the pipeline.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace psaforge {

inline constexpr double kPi = std::numbers::pi;

// ---------------------------------------------------------------------------
// Errors. Each class maps onto one CLI exit code (see commands.hpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data could not be read or decoded.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class MalformedScanError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class InvalidConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised by ground fitting when too few candidate points exist. Callers in
/// the pipeline treat the whole cloud as non-ground.
class NoGroundError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Geometry primitives.

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
  double dot(Vec3 o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(Vec3 o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
};

inline double distance_sq(Vec3 a, Vec3 b) {
  const Vec3 d = a - b;
  return d.dot(d);
}

struct Point {
  double x = 0.0, y = 0.0, z = 0.0;
  double intensity = 0.0;

  Vec3 xyz() const { return {x, y, z}; }
  friend bool operator==(const Point&, const Point&) = default;
};

inline bool is_valid(const Point& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z) &&
         std::isfinite(p.intensity) && p.intensity >= 0.0;
}

inline constexpr int kUnlabeled = -1;

/// One LiDAR frame. `labels` is either empty or holds one entry per point:
/// -1 for ground/noise/unclustered, otherwise a cluster id.
struct PointCloud {
  std::string frame_id;
  std::vector<Point> points;
  std::vector<int> labels;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_labels() const { return !labels.empty() || points.empty(); }
  int label(std::size_t i) const { return labels.empty() ? kUnlabeled : labels[i]; }

  void check_invariants() const {
    if (!labels.empty() && labels.size() != points.size()) {
      throw InvalidConfigError("point cloud '" + frame_id + "' has " +
                               std::to_string(labels.size()) + " labels for " +
                               std::to_string(points.size()) + " points");
    }
    for (int l : labels) {
      if (l < kUnlabeled) throw InvalidConfigError("label below -1 in '" + frame_id + "'");
    }
  }
};

/// Wraps an angle into [-pi/2, pi/2), the canonical range for headings of
/// rectangles (period pi).
inline double wrap_half_pi(double a) {
  double w = std::fmod(a + kPi / 2.0, kPi);
  if (w < 0.0) w += kPi;
  double out = w - kPi / 2.0;
  if (out >= kPi / 2.0) out -= kPi;
  return out;
}

/// Wraps an angle into [-pi, pi).
inline double wrap_pi(double a) {
  double w = std::fmod(a + kPi, 2.0 * kPi);
  if (w < 0.0) w += 2.0 * kPi;
  double out = w - kPi;
  if (out >= kPi) out -= 2.0 * kPi;
  return out;
}

/// Upright 3D box. `dx` runs along the heading direction and is the longer
/// horizontal edge once canonicalized.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double dx = 1.0, dy = 1.0, dz = 1.0;
  double heading = 0.0;
  int cluster_id = 0;

  Vec3 center() const { return {cx, cy, cz}; }
  double volume() const { return dx * dy * dz; }
  double bottom() const { return cz - dz / 2.0; }
  double top() const { return cz + dz / 2.0; }

  bool is_valid() const {
    return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(cz) &&
           std::isfinite(dx) && std::isfinite(dy) && std::isfinite(dz) &&
           std::isfinite(heading) && dx > 0.0 && dy > 0.0 && dz > 0.0 &&
           heading >= -kPi / 2.0 && heading < kPi / 2.0 && cluster_id >= 0;
  }

  /// Swaps edges if needed so dx >= dy, then wraps the heading.
  void canonicalize() {
    if (dy > dx) {
      std::swap(dx, dy);
      heading += kPi / 2.0;
    }
    heading = wrap_half_pi(heading);
  }

  /// Distance by which `p` lies outside the box (0 when inside).
  double outside_distance(Vec3 p) const {
    const double c = std::cos(heading), s = std::sin(heading);
    const double rx = p.x - cx, ry = p.y - cy;
    const double u = c * rx + s * ry;
    const double v = -s * rx + c * ry;
    const double w = p.z - cz;
    const double ou = std::max(0.0, std::abs(u) - dx / 2.0);
    const double ov = std::max(0.0, std::abs(v) - dy / 2.0);
    const double ow = std::max(0.0, std::abs(w) - dz / 2.0);
    return std::sqrt(ou * ou + ov * ov + ow * ow);
  }

  std::array<Vec3, 8> corners() const {
    const double c = std::cos(heading), s = std::sin(heading);
    std::array<Vec3, 8> out{};
    std::size_t k = 0;
    for (int iu : {-1, 1}) {
      for (int iv : {-1, 1}) {
        for (int iw : {-1, 1}) {
          const double u = iu * dx / 2.0, v = iv * dy / 2.0, w = iw * dz / 2.0;
          out[k++] = {cx + c * u - s * v, cy + s * u + c * v, cz + w};
        }
      }
    }
    return out;
  }

  friend bool operator==(const Box3D&, const Box3D&) = default;
};

/// Axis-aligned box, used for cuboid dropout regions.
struct AlignedBox {
  Vec3 min, max;
  bool contains(Vec3 p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
           p.z >= min.z && p.z <= max.z;
  }
  friend bool operator==(const AlignedBox&, const AlignedBox&) = default;
};

/// Ground plane a*x + b*y + c*z + d = 0 with a unit, upward normal.
struct GroundModel {
  double a = 0.0, b = 0.0, c = 1.0, d = 0.0;
  double inlier_threshold = 0.25;

  double signed_distance(Vec3 p) const { return a * p.x + b * p.y + c * p.z + d; }
  double height_at(double x, double y) const { return -(a * x + b * y + d) / c; }

  bool is_valid() const {
    const double n = std::sqrt(a * a + b * b + c * c);
    return std::isfinite(d) && std::abs(n - 1.0) < 1e-9 && c > 0.0 && inlier_threshold > 0.0;
  }
};

/// Cylindrical sensor model used for beam re-simulation. Angles in degrees.
/// When `beam_elevations_deg` is non-empty it lists the H beam elevations
/// from top row to bottom row and rows are assigned to the nearest beam.
struct LidarConfig {
  std::string name;
  int beams = 1;    // H
  int columns = 1;  // W
  double f_up_deg = 0.0;
  double f_down_deg = -1.0;
  double max_range = 100.0;
  std::vector<double> beam_elevations_deg;

  void validate() const {
    if (beams < 1 || columns < 1) {
      throw InvalidConfigError("lidar config '" + name + "': H and W must be >= 1");
    }
    if (!(f_up_deg > f_down_deg)) {
      throw InvalidConfigError("lidar config '" + name + "': f_up must exceed f_down");
    }
    if (!(max_range > 0.0)) {
      throw InvalidConfigError("lidar config '" + name + "': max_range must be positive");
    }
    if (!beam_elevations_deg.empty()) {
      if (beam_elevations_deg.size() != static_cast<std::size_t>(beams)) {
        throw InvalidConfigError("lidar config '" + name +
                                 "': beam_elevations_deg must have H entries");
      }
      for (std::size_t i = 1; i < beam_elevations_deg.size(); ++i) {
        if (!(beam_elevations_deg[i] < beam_elevations_deg[i - 1])) {
          throw InvalidConfigError("lidar config '" + name +
                                   "': beam elevations must be strictly decreasing");
        }
      }
    }
  }

  friend bool operator==(const LidarConfig&, const LidarConfig&) = default;
};

// ---------------------------------------------------------------------------
// Deterministic RNG: xoshiro256** seeded through splitmix64. All derived
// draws (uniform reals, bounded integers, normals) are computed here rather
// than through <random> distributions, whose output is implementation
// defined.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi); returns lo when the interval is empty.
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Independent child stream keyed by the construction seed and `stream`.
  /// Does not consume from this generator, so the split order is fixed by
  /// the stream ids alone.
  SeededRng stream(std::uint64_t stream_id) const {
    std::uint64_t sm = seed_ ^ (0xD1B54A32D192ED03ULL * (stream_id + 1));
    return SeededRng(splitmix64(sm));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace psaforge
