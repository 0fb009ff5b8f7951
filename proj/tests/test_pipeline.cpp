#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "psaforge/pipeline.hpp"
#include "support.hpp"

using namespace psaforge;
using testing_support::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_scenes(const fs::path& dir, std::uint64_t seed, std::size_t n, FrameBoxes* truth = nullptr) {
  for (const auto& s : synthetic_scenes(seed, n)) {
    write_scan(dir / (s.cloud.frame_id + ".bin"), s.cloud);
    if (truth) (*truth)[s.cloud.frame_id] = s.boxes;
  }
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PSAFORGE_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(BevIou, Examples) {
  const Box3D a{0, 0, 0, 2, 2, 1, 0, 0};
  EXPECT_NEAR(bev_iou(a, a), 1.0, 1e-12);
  Box3D b = a;
  b.cx = 1.0;  // overlap 1 x 2 of union 6
  EXPECT_NEAR(bev_iou(a, b), 1.0 / 3.0, 1e-12);
  b.cx = 5.0;
  EXPECT_EQ(bev_iou(a, b), 0.0);
  // A square rotated 45 degrees inside another: overlap is the regular octagon.
  Box3D r = a;
  r.heading = kPi / 4;
  const double octagon = 8.0 * (std::sqrt(2.0) - 1.0);
  EXPECT_NEAR(bev_iou(a, r), octagon / (8.0 - octagon), 1e-9);
}

TEST(Matching, IdentityGivesPerfectScores) {
  FrameBoxes t{{"a", {Box3D{0, 0, 0, 4, 2, 1.5, 0, 0}, Box3D{10, 0, 0, 4, 2, 1.5, 0.3, 1}}}};
  const auto s = evaluate_boxes(t, t, 0.5);
  EXPECT_EQ(s.precision, 1.0);
  EXPECT_EQ(s.recall, 1.0);
  EXPECT_EQ(s.mean_center_error, 0.0);
}

TEST(Matching, NoPredictionsGiveZeroRecallAndPrecision) {
  FrameBoxes t{{"a", {Box3D{0, 0, 0, 4, 2, 1.5, 0, 0}}}};
  const auto s = evaluate_boxes({{"a", {}}}, t, 0.3);
  EXPECT_EQ(s.recall, 0.0);
  EXPECT_EQ(s.precision, 0.0);
}

TEST(Matching, GreedyIsOneToOne) {
  const Box3D t{0, 0, 0, 4, 2, 1, 0, 0};
  Box3D near = t, far = t;
  near.cx = 0.1;
  far.cx = 0.5;
  const auto m = match_boxes({far, near}, {t}, 0.3);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].pred, 1u);
}

TEST(TruthCsv, ParsesAndRoundTrips) {
  const std::string text = std::string(kTruthCsvHeader) + "\nf1,1,2,-1,1,4,1.5,0.5\nf1,5,5,-1,4,2,1.5,0\nf2,0,0,0,1,1,1,0\n";
  const auto t = parse_truth_boxes(text);
  ASSERT_EQ(t.at("f1").size(), 2u);
  // dy > dx is canonicalized to the long edge on dx.
  EXPECT_EQ(t.at("f1")[0].dx, 4.0);
  EXPECT_NEAR(t.at("f1")[0].heading, 0.5 - kPi / 2, 1e-12);
  EXPECT_EQ(parse_truth_boxes(format_truth_boxes(t)), t);
}

TEST(TruthCsv, BadRowsNameTheirLine) {
  try {
    parse_truth_boxes(std::string(kTruthCsvHeader) + "\nf,1,2,3,1,1,1,0\nf,1,2,3,-1,1,1,0\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_truth_boxes("id,x\n"), ParseError);
}

TEST(Config, JsonRoundTripAndDefaults) {
  const PipelineConfig c;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(j["loss"]["beta1"], 1.0);
  EXPECT_EQ(j["loss"]["beta2"], 0.5);
  EXPECT_EQ(j["filter"]["max_volume_m3"], 150.0);
  auto bad = j;
  bad["loss"]["gamma"] = 1;
  EXPECT_THROW(config_from_json(bad), InvalidConfigError);
}

TEST(Config, ModifiedValuesSurvive) {
  PipelineConfig c;
  c.preprocess.cluster.eps = 0.3;
  c.loss.tau = 0.1;
  c.pattern = PatternMode::PolarMix;
  c.profile_probs = {0.2, 0.4, 0.4};
  const auto back = config_from_json(nlohmann::json::parse(config_to_json(c).dump()));
  EXPECT_EQ(back.preprocess.cluster.eps, 0.3);
  EXPECT_EQ(back.loss.tau, 0.1);
  EXPECT_EQ(back.pattern, PatternMode::PolarMix);
  EXPECT_EQ(back.profile_probs, c.profile_probs);
}

TEST(Params, EncodeDecodeRoundTrip) {
  SeededRng rng(1);
  auto a = init_network(EncoderConfig{}, rng);
  auto b = init_network(EncoderConfig{}, rng);
  const auto bytes = encode_params(a);
  decode_params(bytes, b);
  EXPECT_EQ(encode_params(b), bytes);
  EXPECT_THROW(decode_params(bytes.substr(0, bytes.size() - 1), b), MalformedScanError);
  EXPECT_THROW(decode_params("XXXXXXXX", b), MalformedScanError);
}

TEST(Parallel, JobCountDoesNotChangeResults) {
  std::vector<int> one(50), four(50);
  parallel_for(50, 1, [&](std::size_t i) { one[i] = frame_rng(3, std::to_string(i)).uniform_int(0, 1000000); });
  parallel_for(50, 4, [&](std::size_t i) { four[i] = frame_rng(3, std::to_string(i)).uniform_int(0, 1000000); });
  EXPECT_EQ(one, four);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw DataError("boom");
               }),
               DataError);
}

TEST(Preprocess, ReportTotalsMatchPerFrameRows) {
  TempDir dir("pre");
  write_scenes(dir.path() / "scans", 1, 10);
  const auto rep = preprocess_scans(dir.path() / "scans", dir.path() / "cache", {}, 7, 2);
  ASSERT_EQ(rep.frames.size(), 10u);
  EXPECT_EQ(rep.succeeded(), 10u);
  std::size_t kept = 0;
  for (const auto& f : rep.frames) kept += f.stats.kept;
  const auto text = format_preprocess_report(rep, "preprocess --scans x --out y");
  EXPECT_NE(text.find("# args: preprocess --scans x --out y\n"), std::string::npos);
  EXPECT_NE(text.find("boxes_kept " + std::to_string(kept) + "\n"), std::string::npos);
  EXPECT_EQ(list_cached_frames(dir.path() / "cache").size(), 10u);
  std::istringstream csv(format_preprocess_csv(rep));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 11);
}

TEST(Preprocess, CorruptScanIsSkippedAndReported) {
  TempDir dir("pre");
  write_scenes(dir.path() / "scans", 2, 2);
  std::ofstream(dir.path() / "scans" / "broken.bin", std::ios::binary) << std::string(5, 'x');
  const auto rep = preprocess_scans(dir.path() / "scans", dir.path() / "cache", {}, 7, 1);
  EXPECT_EQ(rep.succeeded(), 2u);
  EXPECT_NE(format_preprocess_report(rep, "").find("failed broken:"), std::string::npos);
}

TEST(Preprocess, EmptyDirectoryIsError) {
  TempDir dir("pre");
  EXPECT_THROW(preprocess_scans(dir.path(), dir.path() / "cache", {}, 0, 1), DataError);
}

TEST(ClusterEval, SyntheticScenesScoreHigh) {
  TempDir dir("ce");
  FrameBoxes truth;
  write_scenes(dir.path() / "scans", 3, 6, &truth);
  preprocess_scans(dir.path() / "scans", dir.path() / "cache", {}, 0, 2);
  const auto rep = cluster_eval(dir.path() / "cache", truth);
  ASSERT_EQ(rep.at.size(), 2u);
  EXPECT_EQ(rep.at[0].threshold, 0.3);
  EXPECT_GE(rep.at[0].precision, 0.9);
  EXPECT_GE(rep.at[0].recall, 0.9);
  EXPECT_LE(rep.at[1].matched, rep.at[0].matched);
}

TEST(ClusterEval, TruthFramesMissingFromCacheAreNamed) {
  TempDir dir("ce");
  write_frame_cache("a", {}, {}, dir.path());
  FrameBoxes truth{{"a", {}}, {"zz_missing", {Box3D{}}}};
  try {
    cluster_eval(dir.path(), truth);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zz_missing"), std::string::npos);
  }
}

TEST(ClusterEval, CachedFramesWithoutTruthCountAsEmpty) {
  TempDir dir("ce");
  write_frame_cache("a", {Box3D{0, 0, 0, 4, 2, 1, 0, 0}}, {0}, dir.path());
  write_frame_cache("b", {Box3D{0, 0, 0, 4, 2, 1, 0, 0}}, {0}, dir.path());
  const auto rep = cluster_eval(dir.path(), {{"a", {Box3D{0, 0, 0, 4, 2, 1, 0, 0}}}});
  EXPECT_EQ(rep.at[0].predictions, 2u);
  EXPECT_EQ(rep.at[0].precision, 0.5);
  EXPECT_EQ(rep.at[0].recall, 1.0);
}

TEST(Sweep, OneRowPerValue) {
  std::vector<PointCloud> clouds;
  for (auto& s : synthetic_scenes(4, 2)) clouds.push_back(s.cloud);
  SweepOptions opt;
  opt.values = {0.2, 0.3, 0.5, 0.8};
  const auto rows = run_sweep(clouds, opt);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].value, opt.values[i]);
    EXPECT_EQ(rows[i].frames, 2u);
  }
  opt.values = {0.3};
  EXPECT_EQ(run_sweep(clouds, opt).size(), 1u);
  opt.values = {0.3, 0.0};
  EXPECT_THROW(run_sweep(clouds, opt), InvalidConfigError);
}

TEST(Sweep, MoreSeparatedBlobsNeverGainClustersAsEpsGrows) {
  // Cluster counts on well separated blobs cannot rise with a larger radius.
  SeededRng rng(5);
  std::vector<Vec3> pts;
  for (int b = 0; b < 6; ++b) {
    for (int i = 0; i < 40; ++i) pts.push_back({3.0 * b + rng.uniform(0, 0.6), rng.uniform(0, 0.6), rng.uniform(0, 0.6)});
  }
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double eps : {0.2, 0.3, 0.5, 1.0, 2.0, 4.0}) {
    const auto labels = dbscan(pts, eps, 5);
    const std::size_t n = std::set<int>(labels.begin(), labels.end()).size() - (std::count(labels.begin(), labels.end(), -1) > 0);
    EXPECT_LE(n, prev) << eps;
    prev = n;
  }
}

TEST(Sweep, ProbabilityRowsReportSampledFrequencies) {
  std::vector<PointCloud> clouds;
  for (auto& s : synthetic_scenes(4, 1)) clouds.push_back(s.cloud);
  SweepOptions opt;
  opt.param = SweepParam::ProbV32;
  opt.values = {0.0, 0.6, 1.0};
  const auto rows = run_sweep(clouds, opt);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    const auto want = v32_probs(r.value);
    ASSERT_EQ(r.frequencies.size(), 3u);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.frequencies[k], want[k], 0.01);
  }
  opt.values = {1.5};
  EXPECT_THROW(run_sweep(clouds, opt), InvalidConfigError);
}

TEST(ToyData, TruthAlignedFramesUseGeneratingBoxes) {
  const auto scenes = synthetic_scenes(6, 2);
  for (const auto& s : scenes) {
    const auto pseudo = pseudo_frame(s, 6, {});
    const auto aligned = truth_aligned_frame(s, pseudo);
    EXPECT_EQ(aligned.cloud.size(), s.cloud.size());
    for (const auto& b : aligned.boxes) {
      bool found = false;
      for (const auto& t : s.boxes) found |= t.center() == b.center() && t.dx == b.dx;
      EXPECT_TRUE(found);
    }
  }
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run_cli("--definitely-not-a-flag"), 1);
  EXPECT_EQ(run_cli("preprocess"), 1);
  EXPECT_EQ(run_cli("sweep --values 0.3,-1"), 1);
}

TEST(Cli, MissingInputIsDataError) {
  TempDir dir("cli");
  EXPECT_EQ(run_cli("preprocess --scans " + (dir.path() / "none").string() + " --out " + (dir.path() / "o").string()), 2);
}

TEST(Cli, SynthPreprocessEvalPipelineIsReproducible) {
  TempDir dir("cli");
  const auto d = dir.path().string();
  ASSERT_EQ(run_cli("--seed 3 synth --out " + d + "/data --frames 4"), 0);
  ASSERT_EQ(run_cli("--seed 3 --jobs 1 preprocess --scans " + d + "/data/scans --out " + d + "/c1"), 0);
  ASSERT_EQ(run_cli("--seed 3 --jobs 3 preprocess --scans " + d + "/data/scans --out " + d + "/c2"), 0);
  auto a = tree_contents(dir.path() / "c1"), b = tree_contents(dir.path() / "c2");
  // summary.txt records the differing command line; everything else matches.
  EXPECT_NE(a.at("summary.txt").find("--jobs 1"), std::string::npos);
  a.erase("summary.txt");
  b.erase("summary.txt");
  EXPECT_EQ(a, b);
  ASSERT_EQ(run_cli("cluster-eval --cache " + d + "/c1 --truth " + d + "/data/truth.csv --out " + d + "/m.csv"), 0);
  EXPECT_EQ(slurp(dir.path() / "m.csv").rfind("iou_threshold,", 0), 0u);
}

TEST(Cli, AugmentWritesScanAndReplayRecord) {
  TempDir dir("cli");
  const auto d = dir.path().string();
  ASSERT_EQ(run_cli("--seed 1 synth --out " + d + " --frames 1"), 0);
  const auto scan = d + "/scans/" + synthetic_frame_id(0) + ".bin";
  ASSERT_EQ(run_cli("--seed 5 augment --scan " + scan + " --profile v64 --out " + d + "/a1"), 0);
  ASSERT_EQ(run_cli("--seed 5 augment --scan " + scan + " --profile v64 --out " + d + "/a2"), 0);
  EXPECT_EQ(tree_contents(dir.path() / "a1"), tree_contents(dir.path() / "a2"));
  const auto rec = aug_record_from_json(
      nlohmann::json::parse(slurp(dir.path() / "a1" / (synthetic_frame_id(0) + "_aug.json"))));
  EXPECT_EQ(rec.lidar_config, std::optional<std::string>("v64"));
  // Replaying the record reproduces the written scan.
  const auto replay = apply_to_points(read_scan(scan), rec);
  EXPECT_EQ(read_scan(dir.path() / "a1" / (synthetic_frame_id(0) + "_aug.bin")).size(), replay.size());
  EXPECT_EQ(run_cli("augment --scan " + scan + " --profile v99 --out " + d + "/a3"), 1);  // unknown profile is a config error
}

TEST(Cli, ShortPretrainRunIsBitIdentical) {
  TempDir dir("cli");
  const auto d = dir.path().string();
  const std::string args = "--seed 2 pretrain --synthetic 4 --held-out 1 --iters 3 --max-points 64 --out ";
  ASSERT_EQ(run_cli(args + d + "/r1"), 0);
  ASSERT_EQ(run_cli(args + d + "/r2"), 0);
  EXPECT_EQ(slurp(dir.path() / "r1" / "trace.csv"), slurp(dir.path() / "r2" / "trace.csv"));
  EXPECT_EQ(slurp(dir.path() / "r1" / "params.bin"), slurp(dir.path() / "r2" / "params.bin"));
  EXPECT_EQ(run_cli("pretrain --iters 3"), 1);
}
