#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "geniedrive/cli/cli.hpp"
#include "geniedrive/core/errors.hpp"

using namespace geniedrive;
using namespace geniedrive::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = GENIEDRIVE_FIXTURES;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "geniedrive");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("geniedrive_cli_" + name);
  fs::remove_all(p);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// Relative path -> contents of every regular file below `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

std::vector<std::string> fixture_args(const fs::path& out) {
  return {"--config", (kFixtures / "config.json").string(), "--data", (kFixtures / "data").string(),
          "--out",    out.string()};
}

using Args = std::vector<std::string>;

Args operator+(Args a, const Args& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

// ---- usage and exit codes ---------------------------------------------------------

TEST(Dispatch, UnknownSubcommandPrintsUsage) {
  auto r = run({"teleport"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("gen-data"), std::string::npos);
  EXPECT_NE(r.err.find("pipeline"), std::string::npos);
}

TEST(Dispatch, MissingSubcommandIsUsageError) { EXPECT_EQ(run({}).code, 2); }

TEST(Dispatch, HelpExitsZero) { EXPECT_EQ(run({"--help"}).code, 0); }

TEST(Dispatch, BadConfigExitsTwoAndLeavesManifest) {
  auto dir = scratch("badcfg");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"vae": {"chanels": 8}})";
  auto r = run({"gen-data", "--config", (dir / "cfg.json").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, 2);
  auto m = read_json(dir / "run" / "manifests" / "gen-data.json");
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["failed_stage"], "config");
  EXPECT_NE(m["error"].get<std::string>().find("chanels"), std::string::npos);
}

TEST(Dispatch, MissingArtifactIsRuntimeError) {
  auto dir = scratch("noart");
  auto r = run({"train-vae", "--out", dir.string(), "--data", (dir / "nowhere").string()});
  EXPECT_EQ(r.code, 1);
  auto m = read_json(dir / "manifests" / "train-vae.json");
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["failed_stage"], "train-vae");
  EXPECT_FALSE(m["config_hash"].get<std::string>().empty());
}

// ---- config -------------------------------------------------------------------------

TEST(RunConfig, RoundTripAndHash) {
  auto c = RunConfig::defaults();
  auto j = c.to_json();
  EXPECT_EQ(RunConfig::from_json(j).to_json(), j);
  EXPECT_EQ(config_hash(j), config_hash(RunConfig::from_json(j).to_json()));
  EXPECT_EQ(config_hash(j).size(), 16u);
  auto d = c;
  d.train_e2e.lr *= 2;
  EXPECT_NE(config_hash(d.to_json()), config_hash(j));
}

TEST(RunConfig, HashIgnoresKeyOrderAndOmittedDefaults) {
  auto a = RunConfig::from_json(json::parse(R"({"seed": 3, "splits": {"val": 2, "train": 4}})"));
  auto b = RunConfig::from_json(json::parse(R"({"splits": {"train": 4, "val": 2, "test": 16}, "seed": 3})"));
  EXPECT_EQ(config_hash(a.to_json()), config_hash(b.to_json()));
  EXPECT_EQ(a.train_vae.seed, 3u);
}

TEST(RunConfig, RejectsUnknownKeysTypesAndMismatches) {
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"sceen": {}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"scene": {"HH": 8}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"splits": {"train": "many"}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"render": {"alpha": 0}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"train_pred": {"epochs": 0}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"vae": {"H": 16}})")), ConfigError);
  // Grid-derived sections follow the scene.
  auto c = RunConfig::from_json(json::parse(R"({"scene": {"H": 16, "W": 16, "D": 4}})"));
  EXPECT_EQ(c.vae.H, 16);
  EXPECT_EQ(c.predictor.h, 4);
}

TEST(RunConfig, FixtureConfigLoads) {
  auto c = RunConfig::load(kFixtures / "config.json");
  EXPECT_EQ(c.scene.H, 16);
  EXPECT_EQ(c.video.frames, c.eval.future);
  EXPECT_THROW(RunConfig::load(kFixtures / "absent.json"), ConfigError);
}

// ---- commands ---------------------------------------------------------------------------

TEST(GenData, SameSeedGivesIdenticalBytes) {
  auto a = scratch("gen_a"), b = scratch("gen_b");
  const auto cfg = (kFixtures / "config.json").string();
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "7", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "7", "--out", b.string()}).code, 0);
  auto ta = tree(a / "data"), tb = tree(b / "data");
  EXPECT_FALSE(ta.empty());
  EXPECT_EQ(ta, tb);
  auto c = scratch("gen_c");
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "8", "--out", c.string()}).code, 0);
  EXPECT_NE(tree(c / "data"), ta);
  EXPECT_EQ(read_json(a / "manifests" / "gen-data.json")["seed"], 7);
}

TEST(GenData, HonorsDataDirEnvironment) {
  auto out = scratch("env_out"), data = scratch("env_data");
  setenv("GENIEDRIVE_DATA_DIR", data.c_str(), 1);
  auto r = run({"gen-data", "--config", (kFixtures / "config.json").string(), "--out", out.string()});
  unsetenv("GENIEDRIVE_DATA_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(data / "train" / "seq_0000" / "manifest"));
  EXPECT_FALSE(fs::exists(out / "data"));
}

TEST(Eval, FixturesPrintReport) {
  auto out = scratch("eval");
  auto r = run(Args{"eval"} + fixture_args(out) + std::vector<std::string>{"--vae", (kFixtures / "vae").string(), "--pred",
                                                                       (kFixtures / "pred").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto printed = json::parse(r.out)["eval"];
  EXPECT_EQ(printed["horizons"].size(), 3u);
  EXPECT_GT(printed["params"]["vae"].get<int64_t>(), 0);
  EXPECT_EQ(read_json(out / "eval" / "report.json"), printed);
  EXPECT_EQ(read_json(out / "manifests" / "eval.json")["status"], "ok");
}

TEST(Rollout, PastFourFutureSix) {
  auto out = scratch("rollout");
  const std::vector<std::string> models = {"--vae", (kFixtures / "vae").string(), "--pred",
                                           (kFixtures / "pred").string()};
  auto r = run(Args{"rollout", "--past", "4", "--future", "6"} + fixture_args(out) + models);
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = read_json(out / "rollout" / "rollout.json");
  EXPECT_EQ(j["past"], 4);
  EXPECT_EQ(j["future"], 6);
  ASSERT_EQ(j["steps"].size(), 6u);
  EXPECT_DOUBLE_EQ(j["steps"][5]["seconds"].get<double>(), 3.0);
  EXPECT_TRUE(fs::exists(out / "rollout" / "forecast" / "manifest"));

  // Does not fit a 10-frame sequence.
  EXPECT_EQ(run(Args{"rollout", "--past", "4", "--future", "12"} + fixture_args(out) + models).code, 2);

  // Rendering and editing the forecast.
  ASSERT_EQ(run(Args{"render"} + fixture_args(out)).code, 0);
  EXPECT_TRUE(fs::exists(out / "render" / "cond_manifest"));
  auto e = run(Args{"edit", "--op", "remove", "--box", "0,0,0,16,16,4"} + fixture_args(out));
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_GT(json::parse(e.out)["edit"]["changed_voxels"].get<int64_t>(), 0);
  EXPECT_TRUE(fs::exists(out / "edit" / "render" / "cond_manifest"));
  EXPECT_EQ(run(Args{"edit", "--op", "insert", "--box", "0,0,0,2,2,1"} + fixture_args(out)).code, 2);
  EXPECT_EQ(run(Args{"edit", "--op", "paint", "--box", "0,0,0,2,2,1"} + fixture_args(out)).code, 2);
  EXPECT_EQ(run(Args{"edit", "--op", "remove", "--box", "0,0,0"} + fixture_args(out)).code, 2);
}

TEST(Pipeline, ResumesFromMissingStage) {
  auto out = scratch("pipeline");
  const auto cfg = (kFixtures / "config.json").string();
  auto first = run({"pipeline", "--config", cfg, "--out", out.string()});
  ASSERT_EQ(first.code, 0) << first.err;
  auto m = read_json(out / "manifests" / "pipeline.json");
  ASSERT_EQ(m["stages"].size(), pipeline_stages().size());
  for (size_t i = 0; i < pipeline_stages().size(); ++i) {
    EXPECT_EQ(m["stages"][i]["name"], pipeline_stages()[i]);
    EXPECT_EQ(m["stages"][i]["status"], "ran");
  }
  EXPECT_TRUE(fs::exists(out / "report.json"));
  EXPECT_TRUE(fs::exists(out / "samples" / "video.f32"));

  fs::remove_all(out / "render");
  ASSERT_EQ(run({"pipeline", "--config", cfg, "--out", out.string()}).code, 0);
  m = read_json(out / "manifests" / "pipeline.json");
  for (const auto& s : m["stages"]) {
    const bool before = s["name"] == "gen-data" || s["name"] == "train-vae" || s["name"] == "train-pred" ||
                        s["name"] == "train-e2e" || s["name"] == "rollout";
    EXPECT_EQ(s["status"], before ? "skipped" : "ran") << s["name"];
  }

  // A different config must not reuse these artifacts.
  EXPECT_EQ(run({"pipeline", "--config", cfg, "--seed", "5", "--out", out.string()}).code, 2);
}

TEST(Pipeline, StageOrderPutsOccupancyBeforeVideo) {
  const auto& s = pipeline_stages();
  auto pos = [&](const std::string& n) { return std::find(s.begin(), s.end(), n) - s.begin(); };
  EXPECT_LT(pos("train-e2e"), pos("rollout"));
  EXPECT_LT(pos("rollout"), pos("render"));
  EXPECT_LT(pos("render"), pos("sample-video"));
  EXPECT_LT(pos("train-video"), pos("sample-video"));
  EXPECT_EQ(s.back(), "eval");
}
