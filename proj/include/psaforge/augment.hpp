#pragma once

// Two-view augmentation: rigid/scale transforms and cuboid dropout applied
// consistently to points and boxes, and beam-pattern re-simulation through a
// spherical range image (single pattern or PolarMix-style azimuth mixing).
//
// Range image convention: row 0 is the top beam; elevation bins are uniform
// between f_down and f_up unless the profile lists beam elevations. Column 0
// holds azimuth pi and the column index grows as azimuth decreases.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psaforge/core.hpp"
#include "psaforge/io.hpp"

namespace psaforge {

// ---------------------------------------------------------------------------
// Range image

struct RangeImage {
  LidarConfig config;
  /// Row-major H x W; 0 marks an empty cell.
  std::vector<double> range;
  std::vector<double> intensity;
  /// Index of the input point stored in each cell, -1 when empty.
  std::vector<std::int64_t> source;

  explicit RangeImage(LidarConfig cfg)
      : config(std::move(cfg)),
        range(cells(), 0.0),
        intensity(cells(), 0.0),
        source(cells(), -1) {}

  std::size_t cells() const {
    return static_cast<std::size_t>(config.beams) * static_cast<std::size_t>(config.columns);
  }
  std::size_t at(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(config.columns) +
           static_cast<std::size_t>(col);
  }
  std::size_t occupied() const {
    return static_cast<std::size_t>(std::count_if(range.begin(), range.end(), [](double r) { return r > 0.0; }));
  }
};

struct Cell {
  int row;
  int col;
};

/// Cell hit by direction (azimuth, elevation) in radians, if inside the FOV.
inline std::optional<Cell> cell_of(const LidarConfig& cfg, double azimuth, double elevation) {
  const double e_deg = elevation * 180.0 / kPi;
  if (!(e_deg >= cfg.f_down_deg && e_deg <= cfg.f_up_deg)) return std::nullopt;
  int row;
  if (cfg.beam_elevations_deg.empty()) {
    const double t = 1.0 - (e_deg - cfg.f_down_deg) / (cfg.f_up_deg - cfg.f_down_deg);
    row = std::clamp(static_cast<int>(std::floor(t * cfg.beams)), 0, cfg.beams - 1);
  } else {
    const auto& beams = cfg.beam_elevations_deg;
    row = 0;
    for (int b = 1; b < cfg.beams; ++b) {
      if (std::abs(beams[static_cast<std::size_t>(b)] - e_deg) <
          std::abs(beams[static_cast<std::size_t>(row)] - e_deg)) {
        row = b;
      }
    }
  }
  const double u = (1.0 - azimuth / kPi) / 2.0;
  int col = static_cast<int>(std::floor(u * cfg.columns)) % cfg.columns;
  if (col < 0) col += cfg.columns;
  return Cell{row, col};
}

/// Elevation (radians) of the centre of `row`.
inline double row_elevation(const LidarConfig& cfg, int row) {
  if (!cfg.beam_elevations_deg.empty()) {
    return cfg.beam_elevations_deg[static_cast<std::size_t>(row)] * kPi / 180.0;
  }
  const double step = (cfg.f_up_deg - cfg.f_down_deg) / cfg.beams;
  return (cfg.f_up_deg - (row + 0.5) * step) * kPi / 180.0;
}

/// Azimuth (radians) of the centre of `col`.
inline double col_azimuth(const LidarConfig& cfg, int col) {
  return kPi * (1.0 - 2.0 * (col + 0.5) / cfg.columns);
}

/// Spherical projection with a nearest-range z-buffer. Points outside the
/// vertical FOV, beyond max_range or at the origin are discarded. Ties in
/// range keep the earlier point.
inline RangeImage project(const PointCloud& cloud, const LidarConfig& cfg) {
  cfg.validate();
  RangeImage img(cfg);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    if (!(r > 0.0) || r > cfg.max_range) continue;
    const auto cell = cell_of(cfg, std::atan2(p.y, p.x), std::asin(std::clamp(p.z / r, -1.0, 1.0)));
    if (!cell) continue;
    const auto k = img.at(cell->row, cell->col);
    if (img.range[k] == 0.0 || r < img.range[k]) {
      img.range[k] = r;
      img.intensity[k] = p.intensity;
      img.source[k] = static_cast<std::int64_t>(i);
    }
  }
  return img;
}

/// Inverse projection: one point per occupied cell, along the cell-centre
/// ray, in row-major order. `source_labels`, when non-empty, supplies the
/// label carried from each cell's source point.
inline PointCloud unproject(const RangeImage& img, const std::vector<int>& source_labels = {}) {
  PointCloud out;
  const auto& cfg = img.config;
  for (int row = 0; row < cfg.beams; ++row) {
    const double e = row_elevation(cfg, row);
    const double ce = std::cos(e), se = std::sin(e);
    for (int col = 0; col < cfg.columns; ++col) {
      const auto k = img.at(row, col);
      const double r = img.range[k];
      if (!(r > 0.0)) continue;
      const double a = col_azimuth(cfg, col);
      out.points.push_back({r * ce * std::cos(a), r * ce * std::sin(a), r * se, img.intensity[k]});
      if (!source_labels.empty()) {
        const auto src = img.source[k];
        out.labels.push_back(src >= 0 ? source_labels[static_cast<std::size_t>(src)] : kUnlabeled);
      }
    }
  }
  return out;
}

/// Re-simulates `cloud` as seen by `cfg`. Labels follow each cell's source
/// point; boxes are not moved by this operation.
inline PointCloud resample_pattern(const PointCloud& cloud, const LidarConfig& cfg) {
  PointCloud out = unproject(project(cloud, cfg), cloud.labels);
  out.frame_id = cloud.frame_id;
  return out;
}

/// Categorical draw over `profiles`. Weights must be non-negative, one per
/// profile, and sum to 1 within 1e-9.
inline const LidarConfig& sample_config(SeededRng& rng, const LidarProfiles& profiles,
                                        const std::vector<double>& probs) {
  if (profiles.empty() || probs.size() != profiles.size()) {
    throw InvalidConfigError("need exactly one probability per lidar profile (" +
                             std::to_string(probs.size()) + " weights, " +
                             std::to_string(profiles.size()) + " profiles)");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw InvalidConfigError("lidar profile probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidConfigError("lidar profile probabilities must sum to 1");
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_nonzero = i;
    cum += probs[i];
    if (u < cum) return profiles[i];
  }
  return profiles[last_nonzero];
}

// ---------------------------------------------------------------------------
// PolarMix

struct AzimuthSector {
  /// [lo, hi) in radians within [-pi, pi]; azimuth pi is treated as -pi.
  double lo;
  double hi;
  friend bool operator==(const AzimuthSector&, const AzimuthSector&) = default;
};

struct PolarMixRecord {
  /// Profile name of each render.
  std::vector<std::string> renders;
  /// Sector i takes its points from render i mod renders.size().
  std::vector<AzimuthSector> sectors;
  friend bool operator==(const PolarMixRecord&, const PolarMixRecord&) = default;
};

struct PolarMixParams {
  int n_renders = 5;
  double crop_min_deg = 10.0;
  double crop_max_deg = 90.0;
};

/// Contiguous sectors covering [-pi, pi); widths uniform in the crop range
/// with the last sector absorbing the remainder.
inline std::vector<AzimuthSector> sample_sectors(SeededRng& rng, double crop_min_deg, double crop_max_deg) {
  if (!(crop_min_deg > 0.0) || crop_max_deg < crop_min_deg) {
    throw InvalidConfigError("polarmix crop range must satisfy 0 < min <= max");
  }
  std::vector<AzimuthSector> sectors;
  double start = -kPi;
  constexpr double kSlack = 1e-9;
  while (true) {
    const double w = rng.uniform(crop_min_deg, crop_max_deg) * kPi / 180.0;
    if (start + w >= kPi - kSlack) {
      sectors.push_back({start, kPi});
      break;
    }
    sectors.push_back({start, start + w});
    start += w;
  }
  return sectors;
}

inline std::size_t sector_of(const std::vector<AzimuthSector>& sectors, double azimuth) {
  if (azimuth >= kPi) azimuth = -kPi;
  for (std::size_t i = 0; i < sectors.size(); ++i) {
    if (azimuth >= sectors[i].lo && azimuth < sectors[i].hi) return i;
  }
  return sectors.size() - 1;
}

/// Mixes renders according to a materialized record. Output lists points of
/// render 0 first, then render 1, ..., each in its render's order.
inline PointCloud polarmix_replay(const PointCloud& cloud, const LidarProfiles& profiles,
                                  const PolarMixRecord& rec) {
  if (rec.renders.empty() || rec.sectors.empty()) throw InvalidConfigError("empty polarmix record");
  PointCloud out;
  out.frame_id = cloud.frame_id;
  const bool labelled = !cloud.labels.empty();
  for (std::size_t r = 0; r < rec.renders.size(); ++r) {
    const auto render = resample_pattern(cloud, find_profile(profiles, rec.renders[r]));
    for (std::size_t i = 0; i < render.size(); ++i) {
      const auto& p = render.points[i];
      if (sector_of(rec.sectors, std::atan2(p.y, p.x)) % rec.renders.size() != r) continue;
      out.points.push_back(p);
      if (labelled) out.labels.push_back(render.labels[i]);
    }
  }
  return out;
}

struct PolarMixResult {
  PointCloud cloud;
  PolarMixRecord record;
};

inline PolarMixResult polarmix(const PointCloud& cloud, SeededRng& rng, const LidarProfiles& profiles,
                               const std::vector<double>& probs, const PolarMixParams& params = {}) {
  if (params.n_renders < 1) throw InvalidConfigError("polarmix needs n_renders >= 1");
  PolarMixRecord rec;
  for (int r = 0; r < params.n_renders; ++r) rec.renders.push_back(sample_config(rng, profiles, probs).name);
  rec.sectors = sample_sectors(rng, params.crop_min_deg, params.crop_max_deg);
  return {polarmix_replay(cloud, profiles, rec), rec};
}

// ---------------------------------------------------------------------------
// Augmentation records

struct AugRanges {
  double rot_z_max = kPi;
  double trans_max = 1.0;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double flip_prob = 0.5;
  int cuboids_min = 1;
  int cuboids_max = 3;
  double cuboid_size_min = 2.0;
  double cuboid_size_max = 8.0;
  /// Region cuboid centres are drawn from (usually the scan's bounds).
  AlignedBox cuboid_region{{-20.0, -20.0, -3.0}, {20.0, 20.0, 3.0}};

  static AugRanges identity() {
    AugRanges r;
    r.rot_z_max = 0.0;
    r.trans_max = 0.0;
    r.scale_min = r.scale_max = 1.0;
    r.flip_prob = 0.0;
    r.cuboids_min = r.cuboids_max = 0;
    return r;
  }
};

/// Every stochastic choice of one view's augmentation.
/// flip_x mirrors across the x axis (y -> -y); flip_y mirrors across the y
/// axis (x -> -x).
struct AugRecord {
  bool flip_x = false;
  bool flip_y = false;
  double rotation_z = 0.0;
  Vec3 translation{};
  double scale = 1.0;
  std::vector<AlignedBox> dropped_cuboids;
  std::optional<std::string> lidar_config;
  std::optional<PolarMixRecord> polarmix;

  bool has_pattern() const { return lidar_config.has_value() || polarmix.has_value(); }
  friend bool operator==(const AugRecord&, const AugRecord&) = default;
};

/// Draw order: flip_x, flip_y, rotation, translation (x, y, z), scale,
/// cuboid count, then per cuboid centre (x, y, z) and edges (x, y, z).
inline AugRecord sample_aug(SeededRng& rng, const AugRanges& r = {}) {
  if (!(r.scale_min > 0.0) || r.scale_max < r.scale_min) throw InvalidConfigError("invalid scale range");
  if (r.cuboids_min < 0 || r.cuboids_max < r.cuboids_min) throw InvalidConfigError("invalid cuboid count range");
  AugRecord rec;
  rec.flip_x = rng.bernoulli(r.flip_prob);
  rec.flip_y = rng.bernoulli(r.flip_prob);
  rec.rotation_z = rng.uniform(-r.rot_z_max, r.rot_z_max);
  rec.translation = {rng.uniform(-r.trans_max, r.trans_max), rng.uniform(-r.trans_max, r.trans_max),
                     rng.uniform(-r.trans_max, r.trans_max)};
  rec.scale = rng.uniform(r.scale_min, r.scale_max);
  const auto n = rng.uniform_int(r.cuboids_min, r.cuboids_max);
  for (std::int64_t k = 0; k < n; ++k) {
    const Vec3 c{rng.uniform(r.cuboid_region.min.x, r.cuboid_region.max.x),
                 rng.uniform(r.cuboid_region.min.y, r.cuboid_region.max.y),
                 rng.uniform(r.cuboid_region.min.z, r.cuboid_region.max.z)};
    const Vec3 e{rng.uniform(r.cuboid_size_min, r.cuboid_size_max),
                 rng.uniform(r.cuboid_size_min, r.cuboid_size_max),
                 rng.uniform(r.cuboid_size_min, r.cuboid_size_max)};
    rec.dropped_cuboids.push_back({c - 0.5 * e, c + 0.5 * e});
  }
  return rec;
}

/// flip -> rotate_z -> scale about the origin -> translate.
inline Vec3 apply_rigid(const AugRecord& rec, Vec3 p) {
  if (rec.flip_x) p.y = -p.y;
  if (rec.flip_y) p.x = -p.x;
  const double c = std::cos(rec.rotation_z), s = std::sin(rec.rotation_z);
  const Vec3 r{c * p.x - s * p.y, s * p.x + c * p.y, p.z};
  return rec.scale * r + rec.translation;
}

/// Applies the record in its fixed order: rigid/scale transform, cuboid
/// dropout, then beam-pattern re-simulation or PolarMix when present.
inline PointCloud apply_to_points(const PointCloud& cloud, const AugRecord& rec,
                                  const LidarProfiles& profiles = default_lidar_profiles()) {
  PointCloud out;
  out.frame_id = cloud.frame_id;
  const bool labelled = !cloud.labels.empty();
  out.points.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const Vec3 q = apply_rigid(rec, p.xyz());
    const bool dropped = std::any_of(rec.dropped_cuboids.begin(), rec.dropped_cuboids.end(),
                                     [&](const AlignedBox& b) { return b.contains(q); });
    if (dropped) continue;
    out.points.push_back({q.x, q.y, q.z, p.intensity});
    if (labelled) out.labels.push_back(cloud.labels[i]);
  }
  if (rec.polarmix) return polarmix_replay(out, profiles, *rec.polarmix);
  if (rec.lidar_config) return resample_pattern(out, find_profile(profiles, *rec.lidar_config));
  return out;
}

/// Moves boxes with the record's rigid/scale part; headings follow rotations
/// and reflections and are re-canonicalized.
inline std::vector<Box3D> apply_to_boxes(const std::vector<Box3D>& boxes, const AugRecord& rec) {
  std::vector<Box3D> out;
  out.reserve(boxes.size());
  for (auto b : boxes) {
    const Vec3 c = apply_rigid(rec, b.center());
    b.cx = c.x, b.cy = c.y, b.cz = c.z;
    b.dx *= rec.scale, b.dy *= rec.scale, b.dz *= rec.scale;
    if (rec.flip_x) b.heading = -b.heading;
    if (rec.flip_y) b.heading = kPi - b.heading;
    b.heading += rec.rotation_z;
    b.canonicalize();
    out.push_back(b);
  }
  return out;
}

/// Keeps boxes whose cluster still has at least one labelled point.
inline std::vector<Box3D> drop_orphan_boxes(const std::vector<Box3D>& boxes, const std::vector<int>& labels) {
  std::set<int> alive(labels.begin(), labels.end());
  std::vector<Box3D> out;
  for (const auto& b : boxes) {
    if (alive.contains(b.cluster_id)) out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Views

enum class PatternMode { None, SinglePattern, PolarMix };

/// Default sampling probabilities for v32 / v64 / o64.
inline const std::vector<double>& default_profile_probs() {
  static const std::vector<double> probs{0.6, 0.2, 0.2};
  return probs;
}

struct ViewParams {
  PatternMode mode = PatternMode::SinglePattern;
  AugRanges ranges{};
  /// Derive cuboid regions from the input cloud's bounds.
  bool cuboids_from_bounds = true;
  LidarProfiles profiles = default_lidar_profiles();
  std::vector<double> probs = default_profile_probs();
  PolarMixParams polarmix{};
  /// Probability that the query view (rather than the key view) gets the
  /// pattern augmentation.
  double pattern_on_query_prob = 0.5;
  /// Forces the single-pattern profile instead of sampling it.
  std::optional<std::string> forced_profile;
};

struct ViewPair {
  PointCloud view_q;
  std::vector<Box3D> boxes_q;
  PointCloud view_k;
  std::vector<Box3D> boxes_k;
  AugRecord rec_q;
  AugRecord rec_k;
};

inline AlignedBox bounds_of(const PointCloud& cloud) {
  if (cloud.empty()) return {};
  AlignedBox b{cloud.points[0].xyz(), cloud.points[0].xyz()};
  for (const auto& p : cloud.points) {
    b.min = {std::min(b.min.x, p.x), std::min(b.min.y, p.y), std::min(b.min.z, p.z)};
    b.max = {std::max(b.max.x, p.x), std::max(b.max.y, p.y), std::max(b.max.z, p.z)};
  }
  return b;
}

/// Builds the query/key views of one frame. Consumes one draw from `rng` and
/// splits it into stream 0 (query augmentation), stream 1 (key
/// augmentation) and stream 2 (pattern coin and pattern sampling).
inline ViewPair make_views(const PointCloud& cloud, const std::vector<Box3D>& boxes, SeededRng& rng,
                           const ViewParams& params = {}) {
  const SeededRng frame(rng.next_u64());
  SeededRng rng_q = frame.stream(0), rng_k = frame.stream(1), rng_p = frame.stream(2);
  AugRanges ranges = params.ranges;
  if (params.cuboids_from_bounds && !cloud.empty()) ranges.cuboid_region = bounds_of(cloud);

  ViewPair v;
  v.rec_q = sample_aug(rng_q, ranges);
  v.rec_k = sample_aug(rng_k, ranges);
  if (params.mode != PatternMode::None) {
    AugRecord& target = rng_p.bernoulli(params.pattern_on_query_prob) ? v.rec_q : v.rec_k;
    if (params.mode == PatternMode::SinglePattern) {
      target.lidar_config = params.forced_profile
                                ? *params.forced_profile
                                : sample_config(rng_p, params.profiles, params.probs).name;
    } else {
      PolarMixRecord pm;
      for (int r = 0; r < params.polarmix.n_renders; ++r) {
        pm.renders.push_back(sample_config(rng_p, params.profiles, params.probs).name);
      }
      pm.sectors = sample_sectors(rng_p, params.polarmix.crop_min_deg, params.polarmix.crop_max_deg);
      target.polarmix = std::move(pm);
    }
  }
  v.view_q = apply_to_points(cloud, v.rec_q, params.profiles);
  v.view_k = apply_to_points(cloud, v.rec_k, params.profiles);
  v.boxes_q = drop_orphan_boxes(apply_to_boxes(boxes, v.rec_q), v.view_q.labels);
  v.boxes_k = drop_orphan_boxes(apply_to_boxes(boxes, v.rec_k), v.view_k.labels);
  return v;
}

// ---------------------------------------------------------------------------
// Record sidecar (JSON)

inline nlohmann::json aug_record_to_json(const AugRecord& r) {
  nlohmann::json j;
  j["flip_x"] = r.flip_x;
  j["flip_y"] = r.flip_y;
  j["rotation_z"] = r.rotation_z;
  j["translation"] = {r.translation.x, r.translation.y, r.translation.z};
  j["scale"] = r.scale;
  j["dropped_cuboids"] = nlohmann::json::array();
  for (const auto& b : r.dropped_cuboids) {
    j["dropped_cuboids"].push_back({{"min", {b.min.x, b.min.y, b.min.z}}, {"max", {b.max.x, b.max.y, b.max.z}}});
  }
  j["lidar_config"] = r.lidar_config ? nlohmann::json(*r.lidar_config) : nlohmann::json(nullptr);
  if (r.polarmix) {
    nlohmann::json pm;
    pm["renders"] = r.polarmix->renders;
    pm["sectors"] = nlohmann::json::array();
    for (const auto& s : r.polarmix->sectors) pm["sectors"].push_back({s.lo, s.hi});
    j["polarmix"] = pm;
  } else {
    j["polarmix"] = nullptr;
  }
  return j;
}

inline AugRecord aug_record_from_json(const nlohmann::json& j) {
  try {
    AugRecord r;
    r.flip_x = j.at("flip_x").get<bool>();
    r.flip_y = j.at("flip_y").get<bool>();
    r.rotation_z = j.at("rotation_z").get<double>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (t.size() != 3) throw InvalidConfigError("translation needs 3 components");
    r.translation = {t[0], t[1], t[2]};
    r.scale = j.at("scale").get<double>();
    if (!(r.scale > 0.0)) throw InvalidConfigError("scale must be positive");
    for (const auto& b : j.at("dropped_cuboids")) {
      const auto lo = b.at("min").get<std::vector<double>>();
      const auto hi = b.at("max").get<std::vector<double>>();
      r.dropped_cuboids.push_back({{lo.at(0), lo.at(1), lo.at(2)}, {hi.at(0), hi.at(1), hi.at(2)}});
    }
    if (!j.at("lidar_config").is_null()) r.lidar_config = j.at("lidar_config").get<std::string>();
    if (!j.at("polarmix").is_null()) {
      PolarMixRecord pm;
      pm.renders = j.at("polarmix").at("renders").get<std::vector<std::string>>();
      for (const auto& s : j.at("polarmix").at("sectors")) {
        const auto lo = s.at(0).get<double>(), hi = s.at(1).get<double>();
        if (!(lo >= -kPi && hi <= kPi && lo < hi)) throw InvalidConfigError("polarmix sector out of range");
        pm.sectors.push_back({lo, hi});
      }
      r.polarmix = std::move(pm);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfigError(std::string("bad augmentation record: ") + e.what());
  }
}

}  // namespace psaforge
