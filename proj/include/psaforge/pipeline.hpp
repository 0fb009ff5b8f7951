#pragma once

// Whole-pipeline plumbing shared by the command-line tool and the tests:
// the run configuration (with JSON round-trip), frame-parallel
// preprocessing, the procedural toy dataset, parameter files and sweeps.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "psaforge/augment.hpp"
#include "psaforge/boxfit.hpp"
#include "psaforge/core.hpp"
#include "psaforge/eval.hpp"
#include "psaforge/io.hpp"
#include "psaforge/ssl.hpp"
#include "psaforge/synthetic.hpp"

namespace psaforge {

// ---------------------------------------------------------------------------
// Run configuration

struct PipelineConfig {
  PseudoBoxParams preprocess{};
  LossConfig loss{};
  TrainConfig train{};
  EncoderConfig encoder{};
  PatternMode pattern = PatternMode::SinglePattern;
  std::vector<double> profile_probs = default_profile_probs();
  PolarMixParams polarmix{};
  double pattern_on_query_prob = 0.5;
  AugRanges aug{};
};

inline const char* to_string(PatternMode m) {
  switch (m) {
    case PatternMode::None: return "none";
    case PatternMode::SinglePattern: return "single";
    case PatternMode::PolarMix: return "polarmix";
  }
  return "?";
}

inline PatternMode pattern_mode_from_string(std::string_view s) {
  if (s == "none") return PatternMode::None;
  if (s == "single") return PatternMode::SinglePattern;
  if (s == "polarmix") return PatternMode::PolarMix;
  throw InvalidConfigError("unknown pattern mode '" + std::string(s) + "'");
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  using nlohmann::json;
  const auto& pp = c.preprocess;
  json j;
  j["ground"] = {{"iterations", pp.ground.iterations},
                 {"inlier_threshold", pp.ground.inlier_threshold},
                 {"zones", pp.ground.zones},
                 {"seed_fraction", pp.ground.seed_fraction},
                 {"max_tilt_deg", pp.ground.max_tilt_deg},
                 {"refine_band", pp.ground.refine_band}};
  j["cluster"] = {{"algo", pp.cluster.algo == ClusterAlgo::Dbscan ? "dbscan" : "hdbscan"},
                  {"eps", pp.cluster.eps},
                  {"min_cluster_size", pp.cluster.min_cluster_size},
                  {"min_samples", pp.cluster.min_samples}};
  j["eps_presets"] = json::object();
  for (const auto& p : kEpsPresets) j["eps_presets"][p.dataset] = p.eps;
  j["filter"] = {{"max_volume_m3", pp.filter.max_volume_m3},
                 {"max_bottom_above_ground_m", pp.filter.max_bottom_above_ground_m},
                 {"min_top_above_ground_m", pp.filter.min_top_above_ground_m}};
  j["lshape"] = {{"grid_step_deg", pp.lshape.grid_step_deg},
                 {"refine_tol_rad", pp.lshape.refine_tol_rad},
                 {"closeness_floor", pp.lshape.closeness_floor},
                 {"refine_candidates", pp.lshape.refine_candidates},
                 {"min_dim", pp.lshape.min_dim}};
  j["loss"] = {{"beta1", c.loss.beta1},
               {"beta2", c.loss.beta2},
               {"tau", c.loss.tau},
               {"tau_scene", kSceneTau},
               {"tau_cluster", kClusterTau},
               {"momentum", c.loss.momentum},
               {"queue_size", c.loss.queue_size},
               {"anchor_dim", c.loss.anchor_dim},
               {"mode", c.loss.mode == PoolMode::Scene ? "scene" : "cluster"},
               {"in_batch_negatives", c.loss.in_batch_negatives}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"sgd_momentum", c.train.sgd_momentum},
                {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},
                {"iterations", c.train.iterations},
                {"max_points", c.train.max_points}};
  j["encoder"] = {{"encoder_widths", c.encoder.encoder_widths},
                  {"reg_hidden", c.encoder.reg_hidden},
                  {"projection_dim", c.encoder.projection_dim},
                  {"coord_scale", c.encoder.coord_scale},
                  {"use_intensity", c.encoder.use_intensity}};
  j["augment"] = {{"pattern", to_string(c.pattern)},
                  {"profile_probs", c.profile_probs},
                  {"polarmix_renders", c.polarmix.n_renders},
                  {"polarmix_crop_min_deg", c.polarmix.crop_min_deg},
                  {"polarmix_crop_max_deg", c.polarmix.crop_max_deg},
                  {"pattern_on_query_prob", c.pattern_on_query_prob},
                  {"rot_z_max", c.aug.rot_z_max},
                  {"trans_max", c.aug.trans_max},
                  {"scale_min", c.aug.scale_min},
                  {"scale_max", c.aug.scale_max},
                  {"flip_prob", c.aug.flip_prob},
                  {"cuboids_min", c.aug.cuboids_min},
                  {"cuboids_max", c.aug.cuboids_max},
                  {"cuboid_size_min", c.aug.cuboid_size_min},
                  {"cuboid_size_max", c.aug.cuboid_size_max}};
  return j;
}

namespace detail {

/// Reads `key` from `obj` into `out` when present; unknown keys are errors.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& obj, std::string section) : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object()) throw InvalidConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidConfigError("config " + section_ + "." + key + ": " + e.what());
    }
  }

  void ignore(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.contains(k)) throw InvalidConfigError("unknown config key '" + section_ + "." + k + "'");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Starts from the defaults and overrides every key present. Derived,
/// read-only entries (eps presets, per-mode temperatures) are accepted but
/// not applied.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (!j.is_object()) throw InvalidConfigError("config must be a JSON object");
  auto section = [&](const char* name, auto&& fn) {
    if (!j.contains(name)) return;
    detail::JsonReader r(j.at(name), name);
    fn(r);
    r.finish();
  };
  auto& pp = c.preprocess;
  section("ground", [&](auto& r) {
    r.get("iterations", pp.ground.iterations);
    r.get("inlier_threshold", pp.ground.inlier_threshold);
    r.get("zones", pp.ground.zones);
    r.get("seed_fraction", pp.ground.seed_fraction);
    r.get("max_tilt_deg", pp.ground.max_tilt_deg);
    r.get("refine_band", pp.ground.refine_band);
  });
  section("cluster", [&](auto& r) {
    std::string algo = pp.cluster.algo == ClusterAlgo::Dbscan ? "dbscan" : "hdbscan";
    r.get("algo", algo);
    if (algo != "dbscan" && algo != "hdbscan") throw InvalidConfigError("cluster.algo must be dbscan or hdbscan");
    pp.cluster.algo = algo == "dbscan" ? ClusterAlgo::Dbscan : ClusterAlgo::Hdbscan;
    r.get("eps", pp.cluster.eps);
    r.get("min_cluster_size", pp.cluster.min_cluster_size);
    r.get("min_samples", pp.cluster.min_samples);
  });
  if (j.contains("eps_presets") && !j.at("eps_presets").is_object()) {
    throw InvalidConfigError("eps_presets must be an object");
  }
  section("filter", [&](auto& r) {
    r.get("max_volume_m3", pp.filter.max_volume_m3);
    r.get("max_bottom_above_ground_m", pp.filter.max_bottom_above_ground_m);
    r.get("min_top_above_ground_m", pp.filter.min_top_above_ground_m);
  });
  section("lshape", [&](auto& r) {
    r.get("grid_step_deg", pp.lshape.grid_step_deg);
    r.get("refine_tol_rad", pp.lshape.refine_tol_rad);
    r.get("closeness_floor", pp.lshape.closeness_floor);
    r.get("refine_candidates", pp.lshape.refine_candidates);
    r.get("min_dim", pp.lshape.min_dim);
  });
  section("loss", [&](auto& r) {
    r.get("beta1", c.loss.beta1);
    r.get("beta2", c.loss.beta2);
    r.get("tau", c.loss.tau);
    r.ignore("tau_scene");
    r.ignore("tau_cluster");
    r.get("momentum", c.loss.momentum);
    r.get("queue_size", c.loss.queue_size);
    r.get("anchor_dim", c.loss.anchor_dim);
    std::string mode = c.loss.mode == PoolMode::Scene ? "scene" : "cluster";
    r.get("mode", mode);
    if (mode != "scene" && mode != "cluster") throw InvalidConfigError("loss.mode must be scene or cluster");
    c.loss.mode = mode == "scene" ? PoolMode::Scene : PoolMode::Cluster;
    r.get("in_batch_negatives", c.loss.in_batch_negatives);
  });
  section("train", [&](auto& r) {
    r.get("learning_rate", c.train.learning_rate);
    r.get("sgd_momentum", c.train.sgd_momentum);
    r.get("weight_decay", c.train.weight_decay);
    r.get("batch_size", c.train.batch_size);
    r.get("iterations", c.train.iterations);
    r.get("max_points", c.train.max_points);
  });
  section("encoder", [&](auto& r) {
    r.get("encoder_widths", c.encoder.encoder_widths);
    r.get("reg_hidden", c.encoder.reg_hidden);
    r.get("projection_dim", c.encoder.projection_dim);
    r.get("coord_scale", c.encoder.coord_scale);
    r.get("use_intensity", c.encoder.use_intensity);
  });
  section("augment", [&](auto& r) {
    std::string pattern = to_string(c.pattern);
    r.get("pattern", pattern);
    c.pattern = pattern_mode_from_string(pattern);
    r.get("profile_probs", c.profile_probs);
    r.get("polarmix_renders", c.polarmix.n_renders);
    r.get("polarmix_crop_min_deg", c.polarmix.crop_min_deg);
    r.get("polarmix_crop_max_deg", c.polarmix.crop_max_deg);
    r.get("pattern_on_query_prob", c.pattern_on_query_prob);
    r.get("rot_z_max", c.aug.rot_z_max);
    r.get("trans_max", c.aug.trans_max);
    r.get("scale_min", c.aug.scale_min);
    r.get("scale_max", c.aug.scale_max);
    r.get("flip_prob", c.aug.flip_prob);
    r.get("cuboids_min", c.aug.cuboids_min);
    r.get("cuboids_max", c.aug.cuboids_max);
    r.get("cuboid_size_min", c.aug.cuboid_size_min);
    r.get("cuboid_size_max", c.aug.cuboid_size_max);
  });
  for (const auto& [k, _] : j.items()) {
    static const std::set<std::string> known = {"ground", "cluster", "eps_presets", "filter", "lshape",
                                                "loss",   "train",   "encoder",     "augment"};
    if (!known.contains(k)) throw InvalidConfigError("unknown config section '" + k + "'");
  }
  c.loss.validate();
  c.train.validate();
  return c;
}

inline ViewParams view_params(const PipelineConfig& c, const LidarProfiles& profiles) {
  ViewParams v;
  v.mode = c.pattern;
  v.ranges = c.aug;
  v.profiles = profiles;
  v.probs = c.profile_probs;
  v.polarmix = c.polarmix;
  v.pattern_on_query_prob = c.pattern_on_query_prob;
  return v;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Stable 64-bit FNV-1a, used to key per-frame RNG streams by frame id so
/// results do not depend on listing order or worker count.
inline std::uint64_t frame_key(std::string_view id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline SeededRng frame_rng(std::uint64_t seed, std::string_view frame_id) {
  return SeededRng(seed).stream(frame_key(frame_id));
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// thrown by any task is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct FrameSummary {
  std::string frame_id;
  bool ok = false;
  std::string error;
  std::size_t points = 0;
  PseudoBoxStats stats;
};

struct PreprocessReport {
  std::vector<FrameSummary> frames;  // sorted by frame id

  std::size_t succeeded() const {
    return static_cast<std::size_t>(std::count_if(frames.begin(), frames.end(), [](const auto& f) { return f.ok; }));
  }
};

/// Pseudo-boxes for every scan in `scan_dir`, written as a frame cache under
/// `out_dir`. Unreadable scans are recorded and skipped.
inline PreprocessReport preprocess_scans(const fs::path& scan_dir, const fs::path& out_dir,
                                         const PseudoBoxParams& params, std::uint64_t seed, int jobs) {
  const auto scans = list_scans(scan_dir);
  if (scans.empty()) throw DataError("no *.bin scans in " + scan_dir.string());
  PreprocessReport rep;
  rep.frames.resize(scans.size());
  parallel_for(scans.size(), jobs, [&](std::size_t i) {
    auto& fs_ = rep.frames[i];
    fs_.frame_id = scans[i].stem().string();
    try {
      const auto cloud = read_scan(scans[i]);
      SeededRng rng = frame_rng(seed, fs_.frame_id);
      const auto pb = generate_pseudo_boxes(cloud, rng, params);
      write_frame_cache(fs_.frame_id, pb.boxes, pb.labels, out_dir);
      fs_.points = cloud.size();
      fs_.stats = pb.stats;
      fs_.ok = true;
    } catch (const Error& e) {
      fs_.error = e.what();
    }
  });
  return rep;
}

inline std::string format_preprocess_report(const PreprocessReport& rep, const std::string& args) {
  std::ostringstream out;
  out << "# psa-forge preprocess\n";
  out << "# args: " << args << "\n";
  std::size_t ok = 0, clusters = 0, kept = 0, rv = 0, rf = 0, ru = 0;
  for (const auto& f : rep.frames) {
    if (!f.ok) continue;
    ++ok;
    clusters += f.stats.clusters;
    kept += f.stats.kept;
    rv += f.stats.rejected_volume;
    rf += f.stats.rejected_floating;
    ru += f.stats.rejected_underground;
  }
  out << "frames " << rep.frames.size() << "\n";
  out << "frames_ok " << ok << "\n";
  out << "frames_failed " << rep.frames.size() - ok << "\n";
  out << "clusters " << clusters << "\n";
  out << "clusters_per_frame " << detail::format_double(ok ? static_cast<double>(clusters) / static_cast<double>(ok) : 0.0)
      << "\n";
  out << "boxes_kept " << kept << "\n";
  out << "rejected_volume " << rv << "\n";
  out << "rejected_floating " << rf << "\n";
  out << "rejected_underground " << ru << "\n";
  for (const auto& f : rep.frames) {
    if (!f.ok) out << "failed " << f.frame_id << ": " << f.error << "\n";
  }
  return out.str();
}

inline std::string format_preprocess_csv(const PreprocessReport& rep) {
  std::ostringstream out;
  out << "frame_id,ok,points,ground_found,ground_points,clusters,rejected_volume,rejected_floating,"
         "rejected_underground,kept\n";
  for (const auto& f : rep.frames) {
    const auto& s = f.stats;
    out << f.frame_id << ',' << (f.ok ? 1 : 0) << ',' << f.points << ',' << (s.ground_found ? 1 : 0) << ','
        << s.ground_points << ',' << s.clusters << ',' << s.rejected_volume << ',' << s.rejected_floating << ','
        << s.rejected_underground << ',' << s.kept << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Cluster evaluation

struct ClusterEvalReport {
  std::vector<MatchStats> at;  // one entry per IoU threshold
  std::size_t frames = 0;
};

/// Compares cached pseudo-boxes against truth boxes. Every truth frame must
/// be cached; cached frames without truth rows count as frames with no
/// objects.
inline ClusterEvalReport cluster_eval(const fs::path& cache_dir, const FrameBoxes& truth,
                                      const std::vector<double>& thresholds = {0.3, 0.5}) {
  const auto ids = list_cached_frames(cache_dir);
  const std::set<std::string> cached(ids.begin(), ids.end());
  std::vector<std::string> missing;
  for (const auto& [id, _] : truth) {
    if (!cached.contains(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "truth frames missing from cache:";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  FrameBoxes pred;
  for (const auto& id : ids) pred[id] = read_frame_cache(cache_dir, id).boxes;
  ClusterEvalReport rep;
  rep.frames = ids.size();
  for (double t : thresholds) rep.at.push_back(evaluate_boxes(pred, truth, t));
  return rep;
}

inline std::string format_cluster_eval(const ClusterEvalReport& rep) {
  std::ostringstream out;
  out << "iou_threshold,frames,predictions,truths,matched,precision,recall,mean_center_error\n";
  for (const auto& s : rep.at) {
    out << detail::format_double(s.threshold) << ',' << rep.frames << ',' << s.predictions << ',' << s.truths << ','
        << s.matched << ',' << detail::format_double(s.precision) << ',' << detail::format_double(s.recall) << ','
        << detail::format_double(s.mean_center_error) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Procedural toy dataset

/// Scene settings of the toy dataset: coarser surfaces and ground than the
/// generator defaults keep a 300-iteration run within desk budgets.
inline SceneParams toy_scene_params() {
  SceneParams p;
  p.surface_spacing = 0.15;
  p.ground_spacing = 0.4;
  return p;
}

inline std::string synthetic_frame_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%06zu", i);
  return buf;
}

inline std::vector<SyntheticScene> synthetic_scenes(std::uint64_t seed, std::size_t n,
                                                    const SceneParams& params = toy_scene_params(),
                                                    std::size_t first = 0) {
  std::vector<SyntheticScene> out;
  for (std::size_t i = first; i < first + n; ++i) {
    const auto id = synthetic_frame_id(i);
    SeededRng rng = SeededRng(seed).stream(frame_key("scene:" + id));
    out.push_back(generate_scene(rng, params, id));
  }
  return out;
}

/// Pseudo-labelled training frame for a synthetic scene.
inline TrainFrame pseudo_frame(const SyntheticScene& scene, std::uint64_t seed, const PseudoBoxParams& params) {
  SeededRng rng = frame_rng(seed, scene.cloud.frame_id);
  const auto pb = generate_pseudo_boxes(scene.cloud, rng, params);
  TrainFrame f{scene.cloud, pb.boxes};
  f.cloud.labels = pb.labels;
  return f;
}

/// The same frame with each pseudo cluster's box replaced by the true box of
/// the object most of its points came from. Clusters dominated by ground
/// points are dropped.
inline TrainFrame truth_aligned_frame(const SyntheticScene& scene, const TrainFrame& pseudo) {
  TrainFrame out{pseudo.cloud, {}};
  std::map<int, std::map<int, std::size_t>> votes;
  for (std::size_t i = 0; i < pseudo.cloud.size(); ++i) {
    const int l = pseudo.cloud.label(i);
    if (l >= 0) ++votes[l][scene.cloud.label(i)];
  }
  std::set<int> kept;
  for (const auto& [cid, v] : votes) {
    const auto best = std::max_element(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    if (best->first < 0) continue;
    Box3D b = scene.boxes.at(static_cast<std::size_t>(best->first));
    b.cluster_id = cid;
    out.boxes.push_back(b);
    kept.insert(cid);
  }
  for (auto& l : out.cloud.labels) {
    if (l >= 0 && !kept.contains(l)) l = kUnlabeled;
  }
  return out;
}

/// Options for the desk-scale toy run. The momentum encoder moves faster
/// (m = 0.99) and the queue is shorter (1024) than the library defaults so
/// that 300 iterations over a few dozen scenes are not dominated by stale
/// keys of repeated instances.
inline PretrainOptions toy_pretrain_options(std::uint64_t seed, const PipelineConfig& cfg = {},
                                            const LidarProfiles& profiles = default_lidar_profiles()) {
  PretrainOptions opt;
  opt.loss = cfg.loss;
  opt.train = cfg.train;
  opt.encoder = cfg.encoder;
  opt.views = view_params(cfg, profiles);
  opt.seed = seed;
  opt.loss.momentum = 0.99;
  opt.loss.queue_size = 1024;
  return opt;
}

struct ToyDataset {
  std::vector<SyntheticScene> train_scenes;
  std::vector<SyntheticScene> held_scenes;
  std::vector<TrainFrame> train;
  std::vector<TrainFrame> held;
};

inline ToyDataset make_toy_dataset(std::uint64_t seed, std::size_t n_train = 64, std::size_t n_held = 4,
                                   const PseudoBoxParams& params = {}, int jobs = 1) {
  ToyDataset d;
  d.train_scenes = synthetic_scenes(seed, n_train);
  d.held_scenes = synthetic_scenes(seed, n_held, toy_scene_params(), n_train);
  d.train.resize(n_train);
  d.held.resize(n_held);
  parallel_for(n_train + n_held, jobs, [&](std::size_t i) {
    if (i < n_train) {
      d.train[i] = pseudo_frame(d.train_scenes[i], seed, params);
    } else {
      d.held[i - n_train] = pseudo_frame(d.held_scenes[i - n_train], seed, params);
    }
  });
  return d;
}

/// Mean total loss of the last `window` iterations over that of the first.
inline double loss_ratio(const std::vector<LossBreakdown>& trace, std::size_t window = 30) {
  if (trace.size() < window || window == 0) return 0.0;
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    a += trace[i].total;
    b += trace[trace.size() - 1 - i].total;
  }
  return a > 0.0 ? b / a : 0.0;
}

inline std::string format_trace_csv(const std::vector<LossBreakdown>& trace) {
  std::ostringstream out;
  out << "iter,l_con,l_reg,total\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << i << ',' << detail::format_double(trace[i].l_con) << ',' << detail::format_double(trace[i].l_reg) << ','
        << detail::format_double(trace[i].total) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Parameter files: "PSAFPRM1", u32 tensor count, then per tensor u32 name
// length, name bytes, u64 element count, float64 little-endian values.

inline std::string encode_params(NetworkParams& p) {
  static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");
  std::string out = "PSAFPRM1";
  auto put = [&](const void* data, std::size_t n) { out.append(static_cast<const char*>(data), n); };
  const auto tensors = all_tensors(p);
  const auto count = static_cast<std::uint32_t>(tensors.size());
  put(&count, 4);
  for (const auto& t : tensors) {
    const auto len = static_cast<std::uint32_t>(t.name.size());
    put(&len, 4);
    put(t.name.data(), len);
    const auto n = static_cast<std::uint64_t>(t.size);
    put(&n, 8);
    put(t.data, static_cast<std::size_t>(t.size) * sizeof(double));
  }
  return out;
}

/// Loads values into `p`, whose tensor layout must match the file.
inline void decode_params(std::string_view bytes, NetworkParams& p) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw MalformedScanError("truncated parameter file");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  if (bytes.substr(0, 8) != "PSAFPRM1") throw MalformedScanError("not a parameter file");
  pos = 8;
  std::uint32_t count = 0;
  take(&count, 4);
  auto tensors = all_tensors(p);
  if (count != tensors.size()) throw InvalidConfigError("parameter file tensor count mismatch");
  for (auto& t : tensors) {
    std::uint32_t len = 0;
    take(&len, 4);
    std::string name(len, '\0');
    take(name.data(), len);
    std::uint64_t n = 0;
    take(&n, 8);
    if (name != t.name || n != static_cast<std::uint64_t>(t.size)) {
      throw InvalidConfigError("parameter file layout mismatch at tensor '" + name + "'");
    }
    take(t.data, static_cast<std::size_t>(n) * sizeof(double));
  }
  if (pos != bytes.size()) throw MalformedScanError("trailing bytes in parameter file");
}

// ---------------------------------------------------------------------------
// Sensitivity sweeps

enum class SweepParam { Eps, ProbV32 };

struct SweepRow {
  double value = 0.0;
  std::size_t frames = 0;
  std::size_t clusters = 0;
  std::size_t boxes = 0;
  /// Empirical v32/v64/o64 frequencies (probability sweeps only).
  std::vector<double> frequencies;
  /// Mean total loss over the final iterations (NaN when no training ran).
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

struct SweepOptions {
  SweepParam param = SweepParam::Eps;
  std::vector<double> values;
  PipelineConfig config{};
  LidarProfiles profiles = default_lidar_profiles();
  std::uint64_t seed = 0;
  int jobs = 1;
  /// Toy pretraining iterations per row (0 skips training).
  int iterations = 0;
  /// Categorical draws used to measure the sampled profile frequencies.
  std::size_t draws = 100000;
};

/// Probabilities [p, (1-p)/2, (1-p)/2] for the v32 / v64 / o64 registry.
inline std::vector<double> v32_probs(double p) { return {p, (1.0 - p) / 2.0, (1.0 - p) / 2.0}; }

inline std::vector<SweepRow> run_sweep(const std::vector<PointCloud>& clouds, const SweepOptions& opt) {
  if (opt.values.empty()) throw InvalidConfigError("sweep needs at least one value");
  if (clouds.empty()) throw DataError("sweep needs at least one frame");
  for (double v : opt.values) {
    if (opt.param == SweepParam::Eps && !(v > 0.0)) throw InvalidConfigError("eps values must be > 0");
    if (opt.param == SweepParam::ProbV32 && !(v >= 0.0 && v <= 1.0)) {
      throw InvalidConfigError("prob_v32 values must lie in [0, 1]");
    }
  }
  std::vector<SweepRow> rows;
  for (double v : opt.values) {
    PipelineConfig cfg = opt.config;
    if (opt.param == SweepParam::Eps) cfg.preprocess.cluster.eps = v;
    else cfg.profile_probs = v32_probs(v);

    SweepRow row;
    row.value = v;
    row.frames = clouds.size();
    std::vector<TrainFrame> frames(clouds.size());
    parallel_for(clouds.size(), opt.jobs, [&](std::size_t i) {
      SeededRng rng = frame_rng(opt.seed, clouds[i].frame_id);
      const auto pb = generate_pseudo_boxes(clouds[i], rng, cfg.preprocess);
      frames[i] = {clouds[i], pb.boxes};
      frames[i].cloud.labels = pb.labels;
    });
    for (const auto& f : frames) {
      std::set<int> ids;
      for (int l : f.cloud.labels) {
        if (l >= 0) ids.insert(l);
      }
      row.clusters += ids.size();
      row.boxes += f.boxes.size();
    }
    if (opt.param == SweepParam::ProbV32) {
      SeededRng rng = SeededRng(opt.seed).stream(frame_key("sweep-draws"));
      std::map<std::string, std::size_t> counts;
      for (std::size_t k = 0; k < opt.draws; ++k) ++counts[sample_config(rng, opt.profiles, cfg.profile_probs).name];
      for (const auto& p : opt.profiles) {
        row.frequencies.push_back(static_cast<double>(counts[p.name]) / static_cast<double>(opt.draws));
      }
    }
    if (opt.iterations > 0) {
      auto po = toy_pretrain_options(opt.seed, cfg, opt.profiles);
      po.train.iterations = opt.iterations;
      const auto res = pretrain(frames, po);
      const std::size_t w = std::min<std::size_t>(30, res.trace.size());
      double s = 0.0;
      for (std::size_t i = res.trace.size() - w; i < res.trace.size(); ++i) s += res.trace[i].total;
      row.final_loss = s / static_cast<double>(w);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_sweep(const std::vector<SweepRow>& rows, SweepParam param, const LidarProfiles& profiles) {
  std::ostringstream out;
  out << (param == SweepParam::Eps ? "eps" : "prob_v32") << ",frames,clusters,clusters_per_frame,boxes";
  if (param == SweepParam::ProbV32) {
    for (const auto& p : profiles) out << ",freq_" << p.name;
  }
  out << ",final_loss\n";
  for (const auto& r : rows) {
    out << detail::format_double(r.value) << ',' << r.frames << ',' << r.clusters << ','
        << detail::format_double(static_cast<double>(r.clusters) / static_cast<double>(r.frames)) << ',' << r.boxes;
    for (double f : r.frequencies) out << ',' << detail::format_double(f);
    out << ',' << (std::isnan(r.final_loss) ? std::string("nan") : detail::format_double(r.final_loss)) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// PLY export (ASCII, colour per label)

inline std::string format_ply(const PointCloud& cloud) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const int l = cloud.label(i);
    int r = 128, g = 128, b = 128;
    if (l >= 0) {
      const std::uint64_t h = frame_key(std::to_string(l));
      r = static_cast<int>(64 + (h & 0x7F));
      g = static_cast<int>(64 + ((h >> 8) & 0x7F));
      b = static_cast<int>(64 + ((h >> 16) & 0x7F));
    }
    out << static_cast<float>(p.x) << ' ' << static_cast<float>(p.y) << ' ' << static_cast<float>(p.z) << ' '
        << static_cast<float>(p.intensity) << ' ' << r << ' ' << g << ' ' << b << '\n';
  }
  return out.str();
}

}  // namespace psaforge
