#pragma once

// On-disk formats:
//   scans          *.bin, consecutive little-endian float32 (x, y, z, intensity)
//   frame cache    <dir>/boxes/<frame>.txt   CSV, header + one row per box
//                  <dir>/labels/<frame>.lbl  little-endian int32 per point
//   lidar profiles JSON array of {name, H, W, f_up_deg, f_down_deg,
//                  max_range_m[, beam_elevations_deg]}

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psaforge/core.hpp"

namespace psaforge {

namespace fs = std::filesystem;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T from_le_bytes(const unsigned char* p) {
  static_assert(sizeof(T) == 4);
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                    (static_cast<std::uint32_t>(p[2]) << 16) |
                    (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<T>(u);
}

template <typename T>
void append_le_bytes(std::string& out, T value) {
  static_assert(sizeof(T) == 4);
  const auto u = std::bit_cast<std::uint32_t>(value);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xFFu));
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

inline void write_file_bytes(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

inline bool parse_int(std::string_view s, int& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

/// Shortest decimal that round-trips exactly (at most 17 significant digits).
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scans

/// Decodes a scan buffer. Intensities are divided by their maximum when that
/// maximum exceeds 1.
inline PointCloud decode_scan(std::string_view bytes, std::string frame_id = {}) {
  if (bytes.size() % 16 != 0) {
    throw MalformedScanError("scan '" + frame_id + "' has " + std::to_string(bytes.size()) +
                             " bytes, not a multiple of 16");
  }
  PointCloud cloud;
  cloud.frame_id = std::move(frame_id);
  const std::size_t n = bytes.size() / 16;
  cloud.points.reserve(n);
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  double max_intensity = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = base + 16 * i;
    Point pt{detail::from_le_bytes<float>(p), detail::from_le_bytes<float>(p + 4),
             detail::from_le_bytes<float>(p + 8), detail::from_le_bytes<float>(p + 12)};
    if (!std::isfinite(pt.x) || !std::isfinite(pt.y) || !std::isfinite(pt.z) ||
        !std::isfinite(pt.intensity)) {
      throw MalformedScanError("scan '" + cloud.frame_id + "' point " + std::to_string(i) +
                               " is not finite");
    }
    pt.intensity = std::max(0.0, pt.intensity);
    max_intensity = std::max(max_intensity, pt.intensity);
    cloud.points.push_back(pt);
  }
  if (max_intensity > 1.0) {
    for (auto& pt : cloud.points) pt.intensity /= max_intensity;
  }
  return cloud;
}

inline PointCloud read_scan(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("scan not found: " + path.string());
  return decode_scan(detail::read_file_bytes(path), path.stem().string());
}

inline std::string encode_scan(const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 16);
  for (const auto& p : cloud.points) {
    detail::append_le_bytes(out, static_cast<float>(p.x));
    detail::append_le_bytes(out, static_cast<float>(p.y));
    detail::append_le_bytes(out, static_cast<float>(p.z));
    detail::append_le_bytes(out, static_cast<float>(p.intensity));
  }
  return out;
}

inline void write_scan(const fs::path& path, const PointCloud& cloud) {
  detail::write_file_bytes(path, encode_scan(cloud));
}

/// Sorted list of `*.bin` files in `dir`.
inline std::vector<fs::path> list_scans(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bin") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Frame cache

inline constexpr std::string_view kBoxCsvHeader = "cluster_id,cx,cy,cz,dx,dy,dz,heading";

inline std::string format_box_row(const Box3D& b) {
  std::string row = std::to_string(b.cluster_id);
  for (double v : {b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.heading}) {
    row += ',';
    row += detail::format_double(v);
  }
  return row;
}

inline std::string format_boxes(const std::vector<Box3D>& boxes) {
  std::string out(kBoxCsvHeader);
  out += '\n';
  for (const auto& b : boxes) {
    out += format_box_row(b);
    out += '\n';
  }
  return out;
}

/// Parses one CSV box row (8 fields). Returns false on malformed input.
inline bool parse_box_fields(const std::vector<std::string_view>& fields, Box3D& b) {
  if (fields.size() != 8) return false;
  double* targets[] = {&b.cx, &b.cy, &b.cz, &b.dx, &b.dy, &b.dz, &b.heading};
  if (!detail::parse_int(fields[0], b.cluster_id)) return false;
  for (std::size_t k = 0; k < 7; ++k) {
    if (!detail::parse_double(fields[k + 1], *targets[k])) return false;
  }
  return true;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::vector<Box3D> parse_boxes(std::string_view text) {
  std::vector<Box3D> boxes;
  std::size_t line_no = 0;
  std::size_t start = 0;
  bool seen_header = false;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (!seen_header) {
      seen_header = true;
      if (line == kBoxCsvHeader) continue;
    }
    Box3D b;
    if (!parse_box_fields(split_csv(line), b) || !b.is_valid()) {
      throw ParseError("corrupt box record '" + std::string(line) + "'", line_no);
    }
    boxes.push_back(b);
  }
  return boxes;
}

inline std::string encode_labels(const std::vector<int>& labels) {
  std::string out;
  out.reserve(labels.size() * 4);
  for (int l : labels) detail::append_le_bytes(out, static_cast<std::int32_t>(l));
  return out;
}

inline std::vector<int> decode_labels(std::string_view bytes, const std::string& what) {
  if (bytes.size() % 4 != 0) throw MalformedScanError("label file " + what + " truncated");
  std::vector<int> labels(bytes.size() / 4);
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = detail::from_le_bytes<std::int32_t>(base + 4 * i);
    if (labels[i] < kUnlabeled) throw MalformedScanError("label below -1 in " + what);
  }
  return labels;
}

struct FrameCachePaths {
  fs::path boxes;
  fs::path labels;
};

inline FrameCachePaths frame_cache_paths(const fs::path& dir, const std::string& frame_id) {
  return {dir / "boxes" / (frame_id + ".txt"), dir / "labels" / (frame_id + ".lbl")};
}

inline FrameCachePaths write_frame_cache(const std::string& frame_id,
                                         const std::vector<Box3D>& boxes,
                                         const std::vector<int>& labels, const fs::path& dir) {
  const auto paths = frame_cache_paths(dir, frame_id);
  detail::write_file_bytes(paths.boxes, format_boxes(boxes));
  detail::write_file_bytes(paths.labels, encode_labels(labels));
  return paths;
}

struct FrameCache {
  std::vector<Box3D> boxes;
  std::vector<int> labels;
};

/// Reads a cached frame. When `expected_points` is given the label count must
/// match it.
inline FrameCache read_frame_cache(const fs::path& dir, const std::string& frame_id,
                                   std::optional<std::size_t> expected_points = std::nullopt) {
  const auto paths = frame_cache_paths(dir, frame_id);
  if (!fs::exists(paths.boxes) || !fs::exists(paths.labels)) {
    throw IoError("frame '" + frame_id + "' missing from cache " + dir.string());
  }
  FrameCache cache;
  cache.boxes = parse_boxes(detail::read_file_bytes(paths.boxes));
  cache.labels = decode_labels(detail::read_file_bytes(paths.labels), paths.labels.string());
  if (expected_points && cache.labels.size() != *expected_points) {
    throw DataError("frame '" + frame_id + "' has " + std::to_string(cache.labels.size()) +
                    " labels but the scan has " + std::to_string(*expected_points) + " points");
  }
  return cache;
}

/// Frame ids present in a cache directory, sorted.
inline std::vector<std::string> list_cached_frames(const fs::path& dir) {
  std::vector<std::string> ids;
  const fs::path boxes = dir / "boxes";
  if (!fs::is_directory(boxes)) throw IoError("no frame cache at " + dir.string());
  for (const auto& entry : fs::directory_iterator(boxes)) {
    if (entry.path().extension() == ".txt") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// LiDAR profiles

using LidarProfiles = std::vector<LidarConfig>;

inline const LidarConfig& find_profile(const LidarProfiles& profiles, std::string_view name) {
  for (const auto& p : profiles) {
    if (p.name == name) return p;
  }
  throw InvalidConfigError("unknown lidar profile '" + std::string(name) + "'");
}

inline LidarConfig lidar_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"name",       "H",           "W",
                                              "f_up_deg",   "f_down_deg",  "max_range_m",
                                              "beam_elevations_deg"};
  if (!j.is_object()) throw InvalidConfigError("lidar profile entry must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw InvalidConfigError("unknown lidar profile field '" + key + "'");
  }
  for (const char* req : {"name", "H", "W", "f_up_deg", "f_down_deg", "max_range_m"}) {
    if (!j.contains(req)) throw InvalidConfigError(std::string("lidar profile missing '") + req + "'");
  }
  LidarConfig c;
  try {
    c.name = j.at("name").get<std::string>();
    c.beams = j.at("H").get<int>();
    c.columns = j.at("W").get<int>();
    c.f_up_deg = j.at("f_up_deg").get<double>();
    c.f_down_deg = j.at("f_down_deg").get<double>();
    c.max_range = j.at("max_range_m").get<double>();
    if (j.contains("beam_elevations_deg")) {
      c.beam_elevations_deg = j.at("beam_elevations_deg").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfigError(std::string("bad lidar profile field: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json lidar_config_to_json(const LidarConfig& c) {
  nlohmann::json j = {{"name", c.name},         {"H", c.beams},
                      {"W", c.columns},         {"f_up_deg", c.f_up_deg},
                      {"f_down_deg", c.f_down_deg}, {"max_range_m", c.max_range}};
  if (!c.beam_elevations_deg.empty()) j["beam_elevations_deg"] = c.beam_elevations_deg;
  return j;
}

inline LidarProfiles parse_lidar_profiles(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidConfigError(std::string("lidar profile file does not parse: ") + e.what());
  }
  if (!j.is_array()) throw InvalidConfigError("lidar profile file must hold a JSON array");
  LidarProfiles out;
  std::set<std::string> names;
  for (const auto& entry : j) {
    auto c = lidar_config_from_json(entry);
    if (!names.insert(c.name).second) {
      throw InvalidConfigError("duplicate lidar profile name '" + c.name + "'");
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline LidarProfiles load_lidar_profiles(const fs::path& path) {
  return parse_lidar_profiles(detail::read_file_bytes(path));
}

/// Built-in v32 / v64 / o64 profiles (representative public specs for the
/// 32-beam, 64-beam and 64-channel digital sensors). Shipped as
/// data/profiles.json as well.
inline LidarProfiles default_lidar_profiles() {
  return {
      LidarConfig{"v32", 32, 2048, 10.67, -30.67, 100.0, {}},
      LidarConfig{"v64", 64, 2048, 2.0, -24.8, 120.0, {}},
      LidarConfig{"o64", 64, 2048, 22.5, -22.5, 120.0, {}},
  };
}

}  // namespace psaforge
