#pragma once

// Pseudo-box quality metrics: bird's-eye-view IoU of rotated rectangles,
// greedy one-to-one matching, precision / recall and centre error.
//
// BEV IoU is the area of the intersection of the two rotated footprints
// (convex polygon clipping) over the area of their union; height is ignored.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "psaforge/core.hpp"
#include "psaforge/io.hpp"

namespace psaforge {

namespace detail {

struct P2 {
  double x, y;
};

inline std::vector<P2> footprint(const Box3D& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double hx = b.dx / 2, hy = b.dy / 2;
  std::vector<P2> out;
  for (const auto& [u, v] : std::array<std::pair<double, double>, 4>{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}}) {
    out.push_back({b.cx + c * u - s * v, b.cy + s * u + c * v});
  }
  return out;  // counter-clockwise
}

inline double polygon_area(const std::vector<P2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

inline double cross(P2 a, P2 b, P2 p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

/// Sutherland-Hodgman: clips `subject` by the convex counter-clockwise `clip`.
inline std::vector<P2> clip_convex(std::vector<P2> subject, const std::vector<P2>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const P2 a = clip[e], b = clip[(e + 1) % clip.size()];
    std::vector<P2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const P2 p = subject[i], q = subject[(i + 1) % subject.size()];
      const double cp = cross(a, b, p), cq = cross(a, b, q);
      if (cp >= 0) out.push_back(p);
      if ((cp >= 0) != (cq >= 0)) {
        const double t = cp / (cp - cq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace detail

inline double bev_iou(const Box3D& a, const Box3D& b) {
  const auto pa = detail::footprint(a), pb = detail::footprint(b);
  const auto inter = detail::clip_convex(pa, pb);
  const double i = inter.size() >= 3 ? detail::polygon_area(inter) : 0.0;
  const double u = a.dx * a.dy + b.dx * b.dy - i;
  return u > 0.0 ? i / u : 0.0;
}

struct BoxMatch {
  std::size_t pred;
  std::size_t truth;
  double iou;
};

/// Greedy one-to-one matching in order of decreasing IoU (ties by pred, then
/// truth index); pairs below `threshold` never match.
inline std::vector<BoxMatch> match_boxes(const std::vector<Box3D>& pred, const std::vector<Box3D>& truth,
                                         double threshold) {
  std::vector<BoxMatch> cand;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = 0; j < truth.size(); ++j) {
      const double iou = bev_iou(pred[i], truth[j]);
      if (iou >= threshold && iou > 0.0) cand.push_back({i, j, iou});
    }
  }
  std::stable_sort(cand.begin(), cand.end(), [](const BoxMatch& a, const BoxMatch& b) { return a.iou > b.iou; });
  std::vector<char> used_p(pred.size(), 0), used_t(truth.size(), 0);
  std::vector<BoxMatch> out;
  for (const auto& m : cand) {
    if (used_p[m.pred] || used_t[m.truth]) continue;
    used_p[m.pred] = used_t[m.truth] = 1;
    out.push_back(m);
  }
  return out;
}

struct MatchStats {
  double threshold = 0.0;
  std::size_t predictions = 0;
  std::size_t truths = 0;
  std::size_t matched = 0;
  /// 0 when there are no predictions / no truths.
  double precision = 0.0;
  double recall = 0.0;
  /// Mean 3D centre distance over matched pairs (0 when none).
  double mean_center_error = 0.0;
};

using FrameBoxes = std::map<std::string, std::vector<Box3D>>;

/// Frames present in `truth` but not in `pred` must be handled by the caller;
/// here a frame missing from either side contributes no boxes on that side.
inline MatchStats evaluate_boxes(const FrameBoxes& pred, const FrameBoxes& truth, double threshold) {
  MatchStats s;
  s.threshold = threshold;
  double err = 0.0;
  static const std::vector<Box3D> kNone;
  std::set<std::string> ids;
  for (const auto& [id, _] : pred) ids.insert(id);
  for (const auto& [id, _] : truth) ids.insert(id);
  for (const auto& id : ids) {
    const auto ip = pred.find(id);
    const auto it = truth.find(id);
    const auto& p = ip == pred.end() ? kNone : ip->second;
    const auto& t = it == truth.end() ? kNone : it->second;
    s.predictions += p.size();
    s.truths += t.size();
    for (const auto& m : match_boxes(p, t, threshold)) {
      ++s.matched;
      err += (p[m.pred].center() - t[m.truth].center()).norm();
    }
  }
  if (s.predictions > 0) s.precision = static_cast<double>(s.matched) / static_cast<double>(s.predictions);
  if (s.truths > 0) s.recall = static_cast<double>(s.matched) / static_cast<double>(s.truths);
  if (s.matched > 0) s.mean_center_error = err / static_cast<double>(s.matched);
  return s;
}

// ---------------------------------------------------------------------------
// Truth box files: CSV with header frame_id,cx,cy,cz,dx,dy,dz,heading

inline constexpr std::string_view kTruthCsvHeader = "frame_id,cx,cy,cz,dx,dy,dz,heading";

inline std::string format_truth_boxes(const FrameBoxes& frames) {
  std::string out(kTruthCsvHeader);
  out += '\n';
  for (const auto& [id, boxes] : frames) {
    for (const auto& b : boxes) {
      out += id;
      for (double v : {b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.heading}) {
        out += ',';
        out += detail::format_double(v);
      }
      out += '\n';
    }
  }
  return out;
}

inline FrameBoxes parse_truth_boxes(std::string_view text) {
  FrameBoxes out;
  std::size_t line_no = 0, pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line != kTruthCsvHeader) throw ParseError("truth header mismatch", line_no);
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 8 || f[0].empty()) throw ParseError("truth row needs 8 fields", line_no);
    double v[7];
    for (int k = 0; k < 7; ++k) {
      if (!detail::parse_double(f[k + 1], v[k])) throw ParseError("bad number in truth row", line_no);
    }
    Box3D b{v[0], v[1], v[2], v[3], v[4], v[5], v[6], 0};
    auto& list = out[std::string(f[0])];
    b.cluster_id = static_cast<int>(list.size());
    if (b.dx > 0.0 && b.dy > 0.0) b.canonicalize();
    if (!b.is_valid()) throw ParseError("invalid truth box", line_no);
    list.push_back(b);
  }
  if (header) throw ParseError("empty truth file", 1);
  return out;
}

}  // namespace psaforge
