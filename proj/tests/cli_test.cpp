// Command layer and the geoemb binary end to end, on small synthetic inputs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "geoemb/commands.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace geoemb;
using geoemb::testing::TempDir;

namespace {

const fs::path kGolden = GEOEMB_GOLDEN_DIR;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
  Json json() const { return Json::parse(out); }
  Json error() const { return Json::parse(err); }
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

RunResult run_cli(const std::vector<std::string>& args, const TempDir& tmp, const std::string& env = {}) {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += quote(GEOEMB_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path out = tmp / "stdout.txt", err = tmp / "stderr.txt";
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = detail::read_all(out);
  r.err = detail::read_all(err);
  return r;
}

std::string text(const fs::path& p) { return detail::read_all(p); }

PipelineConfig small_pipeline(const fs::path& manifest, const fs::path& out, std::uint64_t seed) {
  PipelineConfig c;
  c.manifest = manifest;
  c.seed = seed;
  c.output_dir = out;
  c.n_pseudo_clusters = 8;
  c.refiner.epochs = 20;
  return c;
}

}  // namespace

// --- in-process commands ----------------------------------------------------

TEST(Commands, CompressIsDeterministicAndRecordsProvenance) {
  TempDir tmp("cmd_compress");
  save_embeddings(geoemb::testing::random_matrix(60, 40, 1, "m"), tmp / "x.emb");
  CompressArgs a{.in = tmp / "x.emb", .out = tmp / "a/z.emb", .k = 8, .seed = 5};
  const Json s1 = cmd_compress(a);
  EXPECT_EQ(s1["n_cols"], 8);
  const std::string first = text(tmp / "a/z.emb");
  a.out = tmp / "b/z.emb";
  cmd_compress(a);
  EXPECT_EQ(first, text(tmp / "b/z.emb"));
  EXPECT_EQ(text(tmp / "a/z.svd"), text(tmp / "b/z.svd"));
  EXPECT_TRUE(fs::exists(tmp / "a/z.quality.json"));
  EXPECT_TRUE(verify_provenance(tmp / "a/z.emb.prov.json").empty());
  const Json prov = Json::parse(text(tmp / "a/z.emb.prov.json"));
  EXPECT_EQ(prov["seed"], 5);
  EXPECT_EQ(prov["command"], "compress");
}

TEST(Commands, CompressRejectsKAboveRank) {
  TempDir tmp("cmd_compress_k");
  save_embeddings(geoemb::testing::random_matrix(10, 6, 1), tmp / "x.emb");
  CompressArgs a{.in = tmp / "x.emb", .out = tmp / "z.emb", .k = 7, .seed = 1};
  EXPECT_EQ(geoemb::testing::error_code([&] { cmd_compress(a); }), "k_out_of_range");
  EXPECT_FALSE(fs::exists(tmp / "z.emb"));
}

TEST(Commands, VerifyDetectsTampering) {
  TempDir tmp("cmd_verify");
  save_embeddings(geoemb::testing::random_matrix(20, 10, 2), tmp / "x.emb");
  cmd_compress({.in = tmp / "x.emb", .out = tmp / "z.emb", .k = 4, .seed = 1});
  EXPECT_EQ(cmd_verify(tmp / "z.emb.prov.json")["verified"], true);
  { std::ofstream(tmp / "z.emb", std::ios::app) << "x"; }
  EXPECT_EQ(geoemb::testing::error_code([&] { cmd_verify(tmp / "z.emb.prov.json"); }), "provenance_mismatch");
}

TEST(Commands, OutDirFallsBackToEnvironment) {
  ::unsetenv(kOutDirEnv);
  EXPECT_FALSE(default_out_dir(std::nullopt));
  ::setenv(kOutDirEnv, "/tmp/from_env", 1);
  EXPECT_EQ(*default_out_dir(std::nullopt), fs::path("/tmp/from_env"));
  EXPECT_EQ(*default_out_dir(fs::path("/tmp/explicit")), fs::path("/tmp/explicit"));
  ::unsetenv(kOutDirEnv);
}

TEST(Commands, PipelineComposesTheFullWidth) {
  TempDir tmp("cmd_pipeline");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 256, 3);
  const Json s = cmd_pipeline(small_pipeline(set.manifest, tmp / "out", 11));
  EXPECT_EQ(s["n_rows"], 256);
  EXPECT_EQ(s["n_cols"], 1024);
  EXPECT_TRUE(s.contains("refiner_final_loss"));
  const EmbeddingMatrix y = load_embeddings(tmp / "out/ensemble.emb");
  EXPECT_EQ(y.n_cols(), 1024u);
  EXPECT_EQ(*y.row_ids(), geoemb::testing::sample_ids(256));
  EXPECT_TRUE(verify_provenance(tmp / "out/provenance.json").empty());
  const Json prov = Json::parse(text(tmp / "out/provenance.json"));
  EXPECT_EQ(prov["params"]["stage_seeds"]["refiner"], derive_seed(11, "refiner"));
  EXPECT_EQ(prov["params"]["stage_seeds"]["compress:convnext_xxl"], derive_seed(11, "compress:convnext_xxl"));
}

TEST(Commands, PipelineWithoutRefinementKeepsCompressedSlots) {
  TempDir tmp("cmd_pipeline_norefine");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 256, 4);
  PipelineConfig c = small_pipeline(set.manifest, tmp / "out", 2);
  c.refine = false;
  cmd_pipeline(c);
  EXPECT_FALSE(fs::exists(tmp / "out/refiner.map"));
  // the spring slot must be exactly the compressed spring embeddings
  const EmbeddingMatrix y = load_embeddings(tmp / "out/ensemble.emb");
  const EmbeddingMatrix x = load_embeddings(set.manifest.parent_path() / "georsclip_spring.emb");
  const SvdModel m = load_svd_model(tmp / "out/models/georsclip_spring.svd");
  const EmbeddingMatrix z = transform(m, x);
  for (std::size_t r = 0; r < y.n_rows(); ++r)
    for (std::size_t j = 0; j < 128; ++j) ASSERT_EQ(y.at(r, 512 + j), z.at(r, j));
}

TEST(Commands, PipelineNamesTheMissingSlot) {
  TempDir tmp("cmd_pipeline_missing");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 16, 5);
  Json m = Json::parse(text(set.manifest));
  Json kept = Json::array();
  for (const auto& e : m["entries"])
    if (e["model_id"] != "vit_base_dino") kept.push_back(e);
  m["entries"] = kept;
  detail::write_all(set.manifest, m.dump());
  try {
    cmd_pipeline(small_pipeline(set.manifest, tmp / "out", 1));
    FAIL() << "expected an error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.code(), "missing_slot:vit_base_dino");
    EXPECT_EQ(e.stage(), "validate");
  }
  EXPECT_FALSE(fs::exists(tmp / "out/ensemble.emb"));
}

TEST(Commands, PipelineRequiresSeed) {
  TempDir tmp("cmd_pipeline_seed");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 16, 5);
  PipelineConfig c = small_pipeline(set.manifest, tmp / "out", 1);
  c.seed.reset();
  EXPECT_EQ(geoemb::testing::error_code([&] { cmd_pipeline(c); }), "invalid_config");
}

TEST(Commands, PipelineSearchRebuildsLayout) {
  TempDir tmp("cmd_pipeline_search");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 288, 6);
  PipelineConfig c = small_pipeline(set.manifest, tmp / "out", 3);
  c.refine = false;
  c.candidates = {{"convnext_xxl", {96, 128}}, {"vit_huge_clip", {256, 288}}};
  const Json s = cmd_pipeline(c);
  EXPECT_EQ(s["n_cols"], 1024);
  const Json plan = Json::parse(text(tmp / "out/plan.json"));
  EXPECT_EQ(plan["searched"], true);
  const std::size_t a = plan["dims"]["convnext_xxl"], b = plan["dims"]["vit_huge_clip"];
  EXPECT_EQ(a + b, 384u);
  EXPECT_EQ(plan["layout"]["slots"][1]["start"], a);
}

TEST(Commands, ConfigRejectsUnknownKeys) {
  EXPECT_EQ(geoemb::testing::error_code([] { parse_pipeline_config(Json{{"manifest", "m.json"}, {"sede", 1}}); }),
            "invalid_config");
  EXPECT_EQ(geoemb::testing::error_code([] {
              parse_pipeline_config(Json{{"manifest", "m.json"}, {"refiner", {{"epoch", 3}}}});
            }),
            "invalid_config");
  const PipelineConfig c = parse_pipeline_config(
      Json{{"manifest", "m.json"}, {"seed", 7}, {"refiner", {{"epochs", 3}, {"linkage", "average"}}}}, "/base");
  EXPECT_EQ(c.manifest, fs::path("/base/m.json"));
  EXPECT_EQ(*c.seed, 7u);
  EXPECT_EQ(c.refiner.epochs, 3);
  EXPECT_EQ(c.linkage, Linkage::average);
}

// --- the binary ---------------------------------------------------------------

TEST(Cli, VersionAndUsage) {
  TempDir tmp("cli_usage");
  const RunResult v = run_cli({"--version"}, tmp);
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(std::string(kVersion)), std::string::npos);
  EXPECT_EQ(run_cli({}, tmp).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}, tmp).code, 2);
  EXPECT_EQ(run_cli({"compress", "--in", "x.emb"}, tmp).code, 2);
  EXPECT_EQ(run_cli({"quality", "--in", "x", "--out", "y", "--dims", "4,a", "--seed", "1"}, tmp).code, 2);
}

TEST(Cli, CompressKAboveRankExitsWithJsonError) {
  TempDir tmp("cli_compress_k");
  save_embeddings(geoemb::testing::random_matrix(12, 5, 3), tmp / "x.emb");
  const RunResult r =
      run_cli({"compress", "--in", (tmp / "x.emb").string(), "--out", (tmp / "z.emb").string(), "--k", "6", "--seed", "1"},
              tmp);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(r.out.empty());
  EXPECT_EQ(r.error()["error"], "k_out_of_range");
}

TEST(Cli, MissingInputIsADomainError) {
  TempDir tmp("cli_missing");
  const RunResult r = run_cli(
      {"compress", "--in", (tmp / "nope.emb").string(), "--out", (tmp / "z.emb").string(), "--k", "2", "--seed", "1"}, tmp);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(r.error().contains("error"));
}

TEST(Cli, CompressRerunIsByteIdentical) {
  TempDir tmp("cli_compress");
  save_embeddings(geoemb::testing::random_matrix(50, 30, 8, "m"), tmp / "x.emb");
  auto run = [&](const std::string& out) {
    return run_cli({"compress", "--in", (tmp / "x.emb").string(), "--out", (tmp / out).string(), "--k", "10", "--seed",
                    "42"},
                   tmp);
  };
  const RunResult a = run("a.emb"), b = run("b.emb");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.json()["n_cols"], 10);
  EXPECT_EQ(text(tmp / "a.emb"), text(tmp / "b.emb"));
  // same as the library call
  const SvdModel m = fit_truncated_svd(load_embeddings(tmp / "x.emb"), 10, 42);
  save_embeddings(transform(m, load_embeddings(tmp / "x.emb")), tmp / "lib.emb");
  const EmbeddingMatrix cli = load_embeddings(tmp / "a.emb"), lib = load_embeddings(tmp / "lib.emb");
  EXPECT_TRUE(std::equal(cli.data().begin(), cli.data().end(), lib.data().begin(), lib.data().end()));
}

TEST(Cli, QualityReportMatchesLibrary) {
  TempDir tmp("cli_quality");
  const auto [x, truth] = geoemb::testing::blobs({{0, 0, 0, 0, 0, 0}, {6, 0, 0, 0, 0, 1}, {0, 6, 0, 1, 0, 0}}, 20, 0.5, 4);
  save_embeddings(x, tmp / "x.emb");
  const RunResult r = run_cli({"quality", "--in", (tmp / "x.emb").string(), "--out", (tmp / "q.json").string(), "--dims",
                               "2,4", "--seed", "9", "--k-clusters", "3"},
                              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  const Json got = Json::parse(text(tmp / "q.json"));
  const Json want = to_json(compression_quality(x, std::vector<std::size_t>{2, 4}, 3, 9));
  EXPECT_EQ(got, want);
}

TEST(Cli, SearchWritesPlan) {
  TempDir tmp("cli_search");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 40, 7);
  Json cands = {{"convnext_xxl", {8, 16}}, {"vit_base_dino", {8, 16}}};
  detail::write_all(tmp / "cands.json", cands.dump());
  Json m = Json::parse(text(set.manifest));
  Json kept = Json::array();
  for (const auto& e : m["entries"])
    if (e["model_id"] == "convnext_xxl" || e["model_id"] == "vit_base_dino") kept.push_back(e);
  m["entries"] = kept;
  detail::write_all(tmp / "data/two.json", m.dump());
  const RunResult r = run_cli({"search", "--manifest", (tmp / "data/two.json").string(), "--candidates",
                               (tmp / "cands.json").string(), "--budget", "24", "--out", (tmp / "plan.json").string(),
                               "--seed", "1", "--k-clusters", "4"},
                              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  const Json plan = Json::parse(text(tmp / "plan.json"));
  EXPECT_EQ(plan["table"].size(), 2u);
  const std::size_t a = plan["dims"]["convnext_xxl"], b = plan["dims"]["vit_base_dino"];
  EXPECT_EQ(a + b, 24u);
  EXPECT_EQ(r.json()["dims"], plan["dims"]);

  const RunResult none = run_cli({"search", "--manifest", (tmp / "data/two.json").string(), "--candidates",
                                  (tmp / "cands.json").string(), "--budget", "25", "--out",
                                  (tmp / "plan2.json").string(), "--seed", "1"},
                                 tmp);
  EXPECT_EQ(none.code, 1);
  EXPECT_EQ(none.error()["error"], "no_feasible_combination");
}

TEST(Cli, RefineWritesMapTraceAndLabels) {
  TempDir tmp("cli_refine");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 48, 8);
  // compress the four seasons to 16 dims first, as the pipeline would
  std::vector<std::string> args = {"refine"};
  for (const std::string season : {"spring", "summer", "fall", "winter"}) {
    const fs::path in = tmp / ("data/georsclip_" + season + ".emb");
    const fs::path out = tmp / ("c_" + season + ".emb");
    ASSERT_EQ(run_cli({"compress", "--in", in.string(), "--out", out.string(), "--k", "16", "--seed", "3"}, tmp).code, 0);
    args.insert(args.end(), {"--" + season, out.string()});
  }
  args.insert(args.end(), {"--seed", "5", "--clusters", "8", "--epochs", "30"});
  const RunResult r = run_cli(args, tmp, "GEOEMB_OUT_DIR=" + quote((tmp / "ref").string()));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"refiner.map", "loss_trace.jsonl", "pseudolabels.json", "refined_spring.emb", "provenance.json"})
    EXPECT_TRUE(fs::exists(tmp / "ref" / f)) << f;
  std::istringstream trace(text(tmp / "ref/loss_trace.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(trace, line)) ++lines;
  EXPECT_EQ(lines, 30);
  const LinearMap map = load_linear_map(tmp / "ref/refiner.map");
  EXPECT_EQ(map.dim(), 16u);
  EXPECT_EQ(run_cli({"verify", "--provenance", (tmp / "ref/provenance.json").string()}, tmp).code, 0);

  // no --out-dir and no environment fallback is a usage error
  args.pop_back();
  EXPECT_EQ(run_cli(args, tmp, "env -u GEOEMB_OUT_DIR").code, 2);
}

TEST(Cli, ComposeSlicesAreBitExact) {
  TempDir tmp("cli_compose");
  const EmbeddingMatrix a = geoemb::testing::random_matrix(9, 3, 1, "a");
  const EmbeddingMatrix b = geoemb::testing::random_matrix(9, 5, 2, "b");
  save_embeddings(a, tmp / "a.emb");
  save_embeddings(b, tmp / "b.emb");
  detail::write_all(tmp / "layout.json", to_json(layout_from_widths({{"a", 3}, {"b", 5}})).dump());
  const RunResult r = run_cli({"compose", "--layout", (tmp / "layout.json").string(), "--in",
                               "a=" + (tmp / "a.emb").string(), "--in", "b=" + (tmp / "b.emb").string(), "--out",
                               (tmp / "y.emb").string()},
                              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  const EmbeddingMatrix y = load_embeddings(tmp / "y.emb");
  ASSERT_EQ(y.n_cols(), 8u);
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at(i, j), a.at(i, j));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(i, 3 + j), b.at(i, j));
  }
  const RunResult missing = run_cli({"compose", "--layout", (tmp / "layout.json").string(), "--in",
                                     "a=" + (tmp / "a.emb").string(), "--out", (tmp / "y2.emb").string()},
                                    tmp);
  EXPECT_EQ(missing.code, 1);
  EXPECT_EQ(missing.error()["error"], "missing_slot:b");
}

TEST(Cli, EvaluateScoresTasksAndBoard) {
  TempDir tmp("cli_evaluate");
  const auto [x, truth] = geoemb::testing::blobs({{3, 0, 0}, {0, 3, 0}, {0, 0, 3}}, 30, 0.3, 2);
  EmbeddingMatrix xf(x.n_rows(), x.n_cols(), std::vector<float>(x.data().begin(), x.data().end()), "ens",
                     geoemb::testing::sample_ids(x.n_rows()));
  save_embeddings(xf, tmp / "ens.emb");
  std::string cls = "sample_id,target\n", reg = "sample_id,target\n";
  for (std::size_t i = 0; i < x.n_rows(); ++i) {
    const std::string id = geoemb::testing::sample_ids(x.n_rows())[i];
    cls += id + "," + std::to_string(truth[i]) + "\n";
    reg += id + "," + std::to_string(2.0 * x.at(i, 0) - x.at(i, 2)) + "\n";
  }
  detail::write_all(tmp / "cls.csv", cls);
  detail::write_all(tmp / "reg.csv", reg);
  const Json tasks = {{"tasks",
                       {{{"name", "land_cover"}, {"kind", "classification"}, {"features", "@ensemble"}, {"targets", "cls.csv"}},
                        {{"name", "elevation"}, {"kind", "regression"}, {"features", "@ensemble"}, {"targets", "reg.csv"}}}}};
  detail::write_all(tmp / "tasks.json", tasks.dump());
  const Json board = {{"teams", {"other", "third"}}, {"tasks", {"land_cover", "elevation"}}, {"scores", {{0.5, 0.5}, {0.9, 0.2}}}};
  detail::write_all(tmp / "board.json", board.dump());
  const RunResult r = run_cli({"evaluate", "--tasks", (tmp / "tasks.json").string(), "--out", (tmp / "rep.json").string(),
                               "--seed", "4", "--features", (tmp / "ens.emb").string(), "--leaderboard",
                               (tmp / "board.json").string()},
                              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  const Json rep = Json::parse(text(tmp / "rep.json"));
  EXPECT_GT(r.json()["q_mean"].get<double>(), 0.9);
  EXPECT_EQ(rep["q_mean"], r.json()["q_mean"]);
  EXPECT_TRUE(rep.contains("leaderboard"));

  const RunResult again = run_cli({"evaluate", "--tasks", (tmp / "tasks.json").string(), "--out",
                                   (tmp / "rep2.json").string(), "--seed", "4", "--features", (tmp / "ens.emb").string(),
                                   "--leaderboard", (tmp / "board.json").string()},
                                  tmp);
  EXPECT_EQ(text(tmp / "rep.json"), text(tmp / "rep2.json"));
  (void)again;
}

TEST(Cli, AdaptMatchesGoldenReport) {
  TempDir tmp("cli_adapt");
  std::vector<float> data(4 * 3 * 3 * 3);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i) * 0.25f - 3.0f;
  save_conv_weight(ConvWeight(4, 3, 3, 3, data), tmp / "w.cw4d");
  const RunResult r = run_cli({"adapt", "--in", (tmp / "w.cw4d").string(), "--out", (tmp / "w128.cw4d").string(),
                               "--target-in", "128", "--policy", "preserve_sum"},
                              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.json()["report"], Json::parse(text(kGolden / "adapt_3_to_128_preserve_sum.json")));
  const ConvWeight w = load_conv_weight(tmp / "w128.cw4d");
  EXPECT_EQ(w.in_channels(), 128u);
  EXPECT_EQ(w.at(1, 127, 2, 0), data[((1 * 3 + 127 % 3) * 3 + 2) * 3 + 0] * 0.0234375f);
}

TEST(Cli, CaptionsMatchGoldenFiles) {
  TempDir tmp("cli_caption");
  const std::string meta = (kGolden / "metadata.csv").string();
  RunResult r = run_cli({"caption", "--metadata", meta, "--out", (tmp / "ll.txt").string(), "--kind", "latlon",
                         "--decimal-places", "1"},
                        tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(text(tmp / "ll.txt"), text(kGolden / "captions_latlon_1dp.txt"));
  r = run_cli({"caption", "--metadata", meta, "--out", (tmp / "rg.txt").string(), "--kind", "regression",
               "--decimal-places", "2", "--corrected-spelling"},
              tmp);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(text(tmp / "rg.txt"), text(kGolden / "captions_regression_2dp_corrected.txt"));
}

TEST(Cli, PipelineRunsTwiceIdentically) {
  TempDir tmp("cli_pipeline");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 256, 12);
  const Json cfg = {{"manifest", set.manifest.string()},
                    {"seed", 21},
                    {"refiner", {{"n_pseudo_clusters", 6}, {"epochs", 15}}}};
  detail::write_all(tmp / "cfg.json", cfg.dump());
  const RunResult a = run_cli({"pipeline", "--config", (tmp / "cfg.json").string(), "--out-dir", (tmp / "a").string()}, tmp);
  const RunResult b = run_cli({"pipeline", "--config", (tmp / "cfg.json").string(), "--out-dir", (tmp / "b").string()}, tmp);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.json()["n_cols"], 1024);
  EXPECT_EQ(a.json()["outputs"], b.json()["outputs"]);
  EXPECT_EQ(text(tmp / "a/ensemble.emb"), text(tmp / "b/ensemble.emb"));
  EXPECT_EQ(text(tmp / "a/provenance.json"), text(tmp / "b/provenance.json"));

  // a different seed changes the outputs
  const RunResult c = run_cli(
      {"pipeline", "--config", (tmp / "cfg.json").string(), "--out-dir", (tmp / "c").string(), "--seed", "22"}, tmp);
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_NE(a.json()["outputs"], c.json()["outputs"]);
}

TEST(Cli, PipelineMissingSlotReportsStage) {
  TempDir tmp("cli_pipeline_missing");
  const auto set = geoemb::testing::write_synthetic_manifest(tmp / "data", 16, 13);
  Json m = Json::parse(text(set.manifest));
  Json kept = Json::array();
  for (const auto& e : m["entries"])
    if (e["model_id"] != "vit_base_dino") kept.push_back(e);
  m["entries"] = kept;
  detail::write_all(set.manifest, m.dump());
  detail::write_all(tmp / "cfg.json", Json{{"manifest", set.manifest.string()}, {"seed", 1}}.dump());
  const RunResult r = run_cli({"pipeline", "--config", (tmp / "cfg.json").string(), "--out-dir", (tmp / "o").string()}, tmp);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.error()["error"], "missing_slot:vit_base_dino");
  EXPECT_EQ(r.error()["stage"], "validate");

  detail::write_all(tmp / "bad.json", R"({"manifest": "m.json", "sed": 1})");
  const RunResult bad = run_cli({"pipeline", "--config", (tmp / "bad.json").string()}, tmp);
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(bad.error()["error"], "invalid_config");
  EXPECT_EQ(bad.error()["stage"], "config");
}
