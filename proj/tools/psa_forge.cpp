// psa_forge: preprocess | augment | pretrain | cluster-eval | sweep | synth
//
// Exit codes: 0 success, 1 usage / configuration, 2 data error,
// 3 numerical failure.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psaforge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace psaforge;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct Globals {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string profiles_path;
  std::string args;

  LidarProfiles profiles() const {
    return profiles_path.empty() ? default_lidar_profiles() : load_lidar_profiles(profiles_path);
  }
};

void write_text(const fs::path& path, const std::string& text) { detail::write_file_bytes(path, text); }

// Flags shared by every command that runs pseudo-box generation.
struct PreprocessFlags {
  PseudoBoxParams p{};
  std::string algo = "hdbscan";
  std::string preset;

  void add(CLI::App* cmd) {
    cmd->add_option("--cluster-algo", algo, "Clustering algorithm")
        ->check(CLI::IsMember({"dbscan", "hdbscan"}))
        ->capture_default_str();
    cmd->add_option("--eps", p.cluster.eps, "Clustering epsilon in metres (presets: waymo 0.2, nuscenes 0.3, "
                                             "semantickitti 0.25)")
        ->capture_default_str();
    cmd->add_option("--eps-preset", preset, "Use a dataset epsilon preset")
        ->check(CLI::IsMember({"waymo", "nuscenes", "semantickitti"}));
    cmd->add_option("--min-cluster-size", p.cluster.min_cluster_size, "Minimum points per cluster")
        ->capture_default_str();
    cmd->add_option("--min-samples", p.cluster.min_samples, "Density neighbours (0: same as min cluster size)")
        ->capture_default_str();
    cmd->add_option("--ground-iters", p.ground.iterations, "RANSAC iterations per zone")->capture_default_str();
    cmd->add_option("--ground-threshold", p.ground.inlier_threshold, "Ground inlier distance (m)")
        ->capture_default_str();
    cmd->add_option("--ground-zones", p.ground.zones, "Concentric ground zones")->capture_default_str();
    cmd->add_option("--max-volume", p.filter.max_volume_m3, "Reject boxes above this volume (m^3)")
        ->capture_default_str();
    cmd->add_option("--max-bottom", p.filter.max_bottom_above_ground_m,
                    "Reject boxes whose bottom is this far above ground (m)")
        ->capture_default_str();
    cmd->add_option("--min-top", p.filter.min_top_above_ground_m,
                    "Reject boxes whose top is below this height above ground (m)")
        ->capture_default_str();
  }

  PseudoBoxParams resolve() const {
    PseudoBoxParams out = p;
    out.cluster.algo = algo == "dbscan" ? ClusterAlgo::Dbscan : ClusterAlgo::Hdbscan;
    for (const auto& pr : kEpsPresets) {
      if (preset == pr.dataset) out.cluster.eps = pr.eps;
    }
    return out;
  }
};

std::vector<PointCloud> load_or_synthesize(const std::string& scans, std::size_t synthetic, std::uint64_t seed) {
  std::vector<PointCloud> clouds;
  if (!scans.empty()) {
    const auto files = list_scans(scans);
    if (files.empty()) throw DataError("no *.bin scans in " + scans);
    for (const auto& f : files) clouds.push_back(read_scan(f));
  } else {
    for (auto& s : synthetic_scenes(seed, synthetic)) {
      s.cloud.labels.clear();
      clouds.push_back(std::move(s.cloud));
    }
  }
  return clouds;
}

int run_preprocess(const Globals& g, const std::string& scans, const std::string& out, const PreprocessFlags& flags,
                   bool emit_ply) {
  const auto params = flags.resolve();
  const auto rep = preprocess_scans(scans, out, params, g.seed, g.jobs);
  const auto summary = format_preprocess_report(rep, g.args);
  write_text(fs::path(out) / "summary.txt", summary);
  write_text(fs::path(out) / "frames.csv", format_preprocess_csv(rep));
  if (emit_ply) {
    for (const auto& f : rep.frames) {
      if (!f.ok) continue;
      auto cloud = read_scan(fs::path(scans) / (f.frame_id + ".bin"));
      cloud.labels = read_frame_cache(out, f.frame_id, cloud.size()).labels;
      write_text(fs::path(out) / "ply" / (f.frame_id + ".ply"), format_ply(cloud));
    }
  }
  std::cout << summary;
  for (const auto& f : rep.frames) {
    if (!f.ok) std::cerr << "warning: skipped " << f.frame_id << ": " << f.error << "\n";
  }
  return rep.succeeded() == 0 ? kExitData : 0;
}

int run_augment(const Globals& g, const std::string& scan, const std::string& profile, const std::string& mode,
                const std::string& out, bool emit_ply) {
  const auto profiles = g.profiles();
  auto cloud = read_scan(scan);
  SeededRng rng(g.seed);
  AugRanges ranges;
  ranges.cuboid_region = bounds_of(cloud);
  AugRecord rec = sample_aug(rng, ranges);
  if (mode == "single") {
    rec.lidar_config = find_profile(profiles, profile).name;
  } else if (mode == "polarmix") {
    PipelineConfig cfg;
    if (cfg.profile_probs.size() != profiles.size()) {
      throw InvalidConfigError("polarmix needs one sampling probability per profile (default registry has 3)");
    }
    PolarMixRecord pm;
    for (int r = 0; r < cfg.polarmix.n_renders; ++r) pm.renders.push_back(sample_config(rng, profiles, cfg.profile_probs).name);
    pm.sectors = sample_sectors(rng, cfg.polarmix.crop_min_deg, cfg.polarmix.crop_max_deg);
    rec.polarmix = std::move(pm);
  }
  const auto result = apply_to_points(cloud, rec, profiles);
  const auto stem = fs::path(scan).stem().string();
  write_scan(fs::path(out) / (stem + "_aug.bin"), result);
  write_text(fs::path(out) / (stem + "_aug.json"), aug_record_to_json(rec).dump(2) + "\n");
  if (emit_ply) write_text(fs::path(out) / (stem + "_aug.ply"), format_ply(result));
  std::cout << "input points " << cloud.size() << "\noutput points " << result.size() << "\n";
  return 0;
}

struct PretrainFlags {
  std::string cache, scans, out = "run";
  std::size_t synthetic = 0;
  std::size_t held_out = 4;
  std::string mode = "cluster";
  std::string pattern = "single";
  double beta1 = 1.0, beta2 = 0.5;
  double tau = 0.0;
  double key_momentum = 0.99;
  std::size_t queue = 1024;
  double lr = 0.12, sgd_momentum = 0.9, wd = 1e-4;
  int iters = 300, batch = 2;
  std::size_t max_points = 384;
  bool in_batch = false;
  bool no_intensity = false;
};

int run_pretrain(const Globals& g, const PretrainFlags& f, const PreprocessFlags& pf) {
  const auto profiles = g.profiles();
  PipelineConfig cfg;
  cfg.preprocess = pf.resolve();
  cfg.loss = LossConfig::for_mode(f.mode == "scene" ? PoolMode::Scene : PoolMode::Cluster);
  if (f.tau > 0.0) cfg.loss.tau = f.tau;
  cfg.loss.beta1 = f.beta1;
  cfg.loss.beta2 = f.beta2;
  cfg.loss.in_batch_negatives = f.in_batch;
  cfg.train.learning_rate = f.lr;
  cfg.train.sgd_momentum = f.sgd_momentum;
  cfg.train.weight_decay = f.wd;
  cfg.train.iterations = f.iters;
  cfg.train.batch_size = f.batch;
  cfg.train.max_points = f.max_points;
  cfg.encoder.use_intensity = !f.no_intensity;
  cfg.pattern = pattern_mode_from_string(f.pattern);
  if (cfg.pattern != PatternMode::None && cfg.profile_probs.size() != profiles.size()) {
    throw InvalidConfigError("pattern augmentation needs one sampling probability per profile");
  }
  auto opt = toy_pretrain_options(g.seed, cfg, profiles);
  opt.loss.momentum = f.key_momentum;
  opt.loss.queue_size = f.queue;

  std::vector<TrainFrame> data;
  ToyDataset toy;
  if (!f.cache.empty()) {
    if (f.scans.empty()) throw InvalidConfigError("--cache needs --scans (the cache stores labels and boxes only)");
    for (const auto& id : list_cached_frames(f.cache)) {
      auto cloud = read_scan(fs::path(f.scans) / (id + ".bin"));
      auto fc = read_frame_cache(f.cache, id, cloud.size());
      cloud.labels = std::move(fc.labels);
      data.push_back({std::move(cloud), std::move(fc.boxes)});
    }
  } else {
    toy = make_toy_dataset(g.seed, f.synthetic, f.held_out, cfg.preprocess, g.jobs);
    data = toy.train;
  }
  const auto res = pretrain(data, opt, [&](int it, const LossBreakdown& l) {
    if (it % 50 == 0) std::cerr << "iter " << it << " total " << l.total << "\n";
  });
  auto params = res.params;
  const fs::path out(f.out);
  write_text(out / "trace.csv", format_trace_csv(res.trace));
  detail::write_file_bytes(out / "params.bin", encode_params(params));

  std::ostringstream rep;
  rep << "# psa-forge pretrain\n# args: " << g.args << "\n";
  rep << "frames " << data.size() << "\niterations " << res.trace.size() << "\n";
  if (res.trace.size() >= 30) rep << "loss_ratio_last30_first30 " << detail::format_double(loss_ratio(res.trace)) << "\n";
  if (!toy.held.empty()) {
    std::vector<TrainFrame> truth;
    for (std::size_t i = 0; i < toy.held.size(); ++i) truth.push_back(truth_aligned_frame(toy.held_scenes[i], toy.held[i]));
    const auto ev = evaluate_regression(res.params, truth, opt.encoder, opt.loss.anchor_dim);
    rep << "heldout_clusters " << ev.clusters << "\nheldout_center_error_m " << detail::format_double(ev.mean_center_error)
        << "\n";
  }
  write_text(out / "report.txt", rep.str());
  std::cout << rep.str();
  return 0;
}

int run_cluster_eval(const std::string& cache, const std::string& truth, const std::string& out) {
  const auto t = parse_truth_boxes(detail::read_file_bytes(truth));
  const auto text = format_cluster_eval(cluster_eval(cache, t));
  if (!out.empty()) write_text(out, text);
  std::cout << text;
  return 0;
}

int run_synth(const Globals& g, const std::string& out, std::size_t frames, bool emit_ply) {
  FrameBoxes truth;
  for (const auto& s : synthetic_scenes(g.seed, frames)) {
    write_scan(fs::path(out) / "scans" / (s.cloud.frame_id + ".bin"), s.cloud);
    if (emit_ply) write_text(fs::path(out) / "ply" / (s.cloud.frame_id + ".ply"), format_ply(s.cloud));
    truth[s.cloud.frame_id] = s.boxes;
  }
  write_text(fs::path(out) / "truth.csv", format_truth_boxes(truth));
  std::cout << "wrote " << frames << " scenes to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psa-forge: pseudo-box generation, LiDAR pattern augmentation and toy SSL pretraining"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file setting any flag ([subcommand] sections)");
  Globals g;
  for (int i = 1; i < argc; ++i) g.args += (i > 1 ? " " : "") + std::string(argv[i]);
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads for frame-level parallelism")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--profiles", g.profiles_path, "LiDAR profile JSON (default: built-in v32/v64/o64)");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Fit pseudo-boxes to every scan and write a frame cache");
  std::string pre_scans, pre_out;
  bool pre_ply = false;
  PreprocessFlags pre_flags;
  pre->add_option("--scans", pre_scans, "Directory of *.bin scans")->required();
  pre->add_option("--out", pre_out, "Frame cache directory")->required();
  pre->add_flag("--emit-ply", pre_ply, "Also write labelled PLY point clouds");
  pre_flags.add(pre);

  // augment
  auto* aug = app.add_subcommand("augment", "Augment one scan and write it with its replay record");
  std::string aug_scan, aug_profile = "v32", aug_mode = "single", aug_out;
  bool aug_ply = false;
  aug->add_option("--scan", aug_scan, "Input scan")->required();
  aug->add_option("--profile", aug_profile, "Target LiDAR profile (single mode)")->capture_default_str();
  aug->add_option("--mode", aug_mode, "Pattern augmentation")
      ->check(CLI::IsMember({"none", "single", "polarmix"}))
      ->capture_default_str();
  aug->add_option("--out", aug_out, "Output directory")->required();
  aug->add_flag("--emit-ply", aug_ply, "Also write a PLY point cloud");

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "Toy joint contrastive + box-regression pretraining");
  PretrainFlags pf;
  PreprocessFlags pt_pre;
  auto* cache_opt = pt->add_option("--cache", pf.cache, "Frame cache from preprocess");
  pt->add_option("--scans", pf.scans, "Scans matching the frame cache");
  auto* synth_opt = pt->add_option("--synthetic", pf.synthetic, "Generate this many synthetic scenes instead");
  cache_opt->excludes(synth_opt);
  pt->add_option("--held-out", pf.held_out, "Extra synthetic scenes for the regression check")->capture_default_str();
  pt->add_option("--iters", pf.iters, "Iterations")->capture_default_str();
  pt->add_option("--mode", pf.mode, "Pooling level")->check(CLI::IsMember({"cluster", "scene"}))->capture_default_str();
  pt->add_option("--pattern", pf.pattern, "Beam-pattern augmentation of one view")
      ->check(CLI::IsMember({"none", "single", "polarmix"}))
      ->capture_default_str();
  pt->add_option("--beta1", pf.beta1, "Contrastive loss weight")->capture_default_str();
  pt->add_option("--beta2", pf.beta2, "Regression loss weight")->capture_default_str();
  pt->add_option("--tau", pf.tau, "Temperature (default: 0.04 cluster mode, 0.1 scene mode)");
  pt->add_option("--key-momentum", pf.key_momentum,
                 "Momentum-encoder m (toy-run default; library default 0.999)")
      ->capture_default_str();
  pt->add_option("--queue-size", pf.queue, "Negative queue length (toy-run default; library default 4096)")
      ->capture_default_str();
  pt->add_option("--lr", pf.lr, "SGD learning rate")->capture_default_str();
  pt->add_option("--sgd-momentum", pf.sgd_momentum, "SGD momentum")->capture_default_str();
  pt->add_option("--weight-decay", pf.wd, "SGD weight decay")->capture_default_str();
  pt->add_option("--batch", pf.batch, "Scenes per batch")->capture_default_str();
  pt->add_option("--max-points", pf.max_points, "Points kept per view")->capture_default_str();
  pt->add_flag("--in-batch-negatives", pf.in_batch, "Also contrast against other keys of the batch");
  pt->add_flag("--no-intensity", pf.no_intensity, "Zero the intensity input feature");
  pt->add_option("--out", pf.out, "Run directory")->capture_default_str();
  pt_pre.add(pt);

  // cluster-eval
  auto* ce = app.add_subcommand("cluster-eval", "Score cached pseudo-boxes against truth boxes (BEV IoU 0.3/0.5)");
  std::string ce_cache, ce_truth, ce_out;
  ce->add_option("--cache", ce_cache, "Frame cache")->required();
  ce->add_option("--truth", ce_truth, "Truth CSV: frame_id,cx,cy,cz,dx,dy,dz,heading")->required();
  ce->add_option("--out", ce_out, "Write the metrics CSV here too");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Sensitivity sweep over eps or the v32 sampling probability");
  std::string sw_param = "eps", sw_scans, sw_out;
  std::vector<double> sw_values;
  std::size_t sw_synth = 8, sw_draws = 100000;
  int sw_iters = 0;
  PreprocessFlags sw_pre;
  sw->add_option("--param", sw_param, "Swept parameter")->check(CLI::IsMember({"eps", "prob_v32"}))->capture_default_str();
  sw->add_option("--values", sw_values, "Values (comma separated)")->required()->delimiter(',');
  sw->add_option("--scans", sw_scans, "Scans to use (default: synthetic scenes)");
  sw->add_option("--synthetic", sw_synth, "Synthetic scenes when --scans is absent")->capture_default_str();
  sw->add_option("--iters", sw_iters, "Toy pretraining iterations per value (0: none)")->capture_default_str();
  sw->add_option("--draws", sw_draws, "Profile draws per value for prob_v32")->capture_default_str();
  sw->add_option("--out", sw_out, "Write the table here too");
  sw_pre.add(sw);

  // synth
  auto* sy = app.add_subcommand("synth", "Write procedural scenes (scans + truth boxes)");
  std::string sy_out;
  std::size_t sy_frames = 10;
  bool sy_ply = false;
  sy->add_option("--out", sy_out, "Output directory")->required();
  sy->add_option("--frames", sy_frames, "Number of scenes")->capture_default_str();
  sy->add_flag("--emit-ply", sy_ply, "Also write PLY point clouds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (pre->parsed()) return run_preprocess(g, pre_scans, pre_out, pre_flags, pre_ply);
    if (aug->parsed()) return run_augment(g, aug_scan, aug_profile, aug_mode, aug_out, aug_ply);
    if (pt->parsed()) {
      if (pf.cache.empty() && pf.synthetic == 0) throw InvalidConfigError("pretrain needs --cache or --synthetic N");
      return run_pretrain(g, pf, pt_pre);
    }
    if (ce->parsed()) return run_cluster_eval(ce_cache, ce_truth, ce_out);
    if (sw->parsed()) {
      SweepOptions so;
      so.param = sw_param == "eps" ? SweepParam::Eps : SweepParam::ProbV32;
      so.values = sw_values;
      so.config.preprocess = sw_pre.resolve();
      so.profiles = g.profiles();
      so.seed = g.seed;
      so.jobs = g.jobs;
      so.iterations = sw_iters;
      so.draws = sw_draws;
      const auto text = format_sweep(run_sweep(load_or_synthesize(sw_scans, sw_synth, g.seed), so), so.param, so.profiles);
      if (!sw_out.empty()) write_text(sw_out, text);
      std::cout << text;
      return 0;
    }
    if (sy->parsed()) return run_synth(g, sy_out, sy_frames, sy_ply);
  } catch (const InvalidConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
