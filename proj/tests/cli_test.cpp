#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dynprop/cli.hpp"

namespace fs = std::filesystem;
using namespace dynprop;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> v;
  std::stringstream ss(s);
  std::string l;
  while (std::getline(ss, l))
    if (!l.empty()) v.push_back(l);
  return v;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dynprop_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

// Shared tiny dataset and checkpoints, built once.
class CliFixture : public ::testing::Test {
 protected:
  static fs::path root, data, query_dir, dyn_dir, indiv_dir;

  static void SetUpTestSuite() {
    root = scratch("shared");
    data = root / "data";
    ASSERT_EQ(run({"gen-data", "--out", data.string(), "--train", "16", "--val", "6", "--seed", "3"}).code, 0);
    query_dir = root / "sw";
    dyn_dir = root / "dyn";
    indiv_dir = root / "ind";
    const std::vector<std::string> common = {"--steps", "2", "--batch", "1", "--log-every", "1", "--data", data.string()};
    auto train = [&](std::vector<std::string> a, const fs::path& out) {
      a.insert(a.begin(), "train");
      a.insert(a.end(), common.begin(), common.end());
      a.push_back("--out");
      a.push_back(out.string());
      auto r = run(a);
      ASSERT_EQ(r.code, 0) << r.err;
    };
    train({"--mode", "switchable", "--distill", "on"}, query_dir);
    train({"--mode", "dynamic"}, dyn_dir);
    train({"--mode", "individual", "--proposals", "10"}, indiv_dir);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }
};

fs::path CliFixture::root, CliFixture::data, CliFixture::query_dir, CliFixture::dyn_dir, CliFixture::indiv_dir;

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(run({}).code, kExitUsage); }

TEST(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(run({"gen-data", "--out", scratch("unk").string(), "--bogus", "1"}).code, kExitUsage);
}

TEST(Cli, HelpListsEveryTrainFlag) {
  const auto r = run({"train", "--help"});
  EXPECT_EQ(r.code, kExitOk);
  for (const char* flag : {"--mode", "--arch", "--proposals", "--theta", "--k", "--distill", "--steps", "--seed",
                           "--data", "--out", "--sampling", "--oracle-count"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
}

TEST(Cli, GenDataDefaultCounts) {
  const fs::path dir = scratch("gen_default");
  ASSERT_EQ(run({"gen-data", "--out", dir.string()}).code, 0);
  const auto m = read_manifest(dir);
  EXPECT_EQ(m.train, 2000u);
  EXPECT_EQ(m.val, 500u);
  EXPECT_EQ(lines(slurp(dir / "train.jsonl")).size(), 2000u);
  EXPECT_EQ(lines(slurp(dir / "val.jsonl")).size(), 500u);
  EXPECT_TRUE(fs::exists(dir / "run_config.json"));
  fs::remove_all(dir);
}

TEST(Cli, GenDataSameSeedIsByteIdentical) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  ASSERT_EQ(run({"gen-data", "--out", a.string(), "--train", "30", "--val", "10", "--seed", "9"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--out", b.string(), "--train", "30", "--val", "10", "--seed", "9"}).code, 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "manifest.json"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, GenDataRejectsNonEmptyDirWithoutForce) {
  const fs::path dir = scratch("gen_force");
  ASSERT_EQ(run({"gen-data", "--out", dir.string(), "--train", "4", "--val", "2"}).code, 0);
  const auto r = run({"gen-data", "--out", dir.string(), "--train", "4", "--val", "2"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--force"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", dir.string(), "--train", "4", "--val", "2", "--force"}).code, 0);
  fs::remove_all(dir);
}

TEST(Cli, GenDataRejectsZeroMaxObjects) {
  EXPECT_EQ(run({"gen-data", "--out", scratch("gen_zero").string(), "--max-objects", "0"}).code, kExitUsage);
}

TEST(Cli, TrainMissingDatasetIsDataError) {
  const fs::path out = scratch("train_nodata");
  EXPECT_EQ(run({"train", "--data", (out / "missing").string(), "--out", out.string(), "--steps", "1"}).code,
            kExitData);
  fs::remove_all(out);
}

TEST_F(CliFixture, DistillOnTwoStageRejected) {
  const fs::path out = scratch("bad_combo");
  const auto r = run({"train", "--mode", "switchable", "--distill", "on", "--arch", "two_stage", "--data",
                      data.string(), "--out", out.string(), "--steps", "1"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_FALSE(r.err.empty());
  fs::remove_all(out);
}

TEST_F(CliFixture, BadOnOffRejected) {
  const fs::path out = scratch("bad_onoff");
  EXPECT_EQ(run({"train", "--distill", "yes", "--data", data.string(), "--out", out.string()}).code, kExitUsage);
  fs::remove_all(out);
}

TEST_F(CliFixture, OracleCountNeedsDynamicMode) {
  const fs::path out = scratch("bad_oracle");
  EXPECT_EQ(run({"train", "--oracle-count", "--data", data.string(), "--out", out.string()}).code, kExitUsage);
  fs::remove_all(out);
}

TEST_F(CliFixture, IndividualProposalsMapToBaseline) {
  const auto cfg = nlohmann::json::parse(slurp(indiv_dir / "run_config.json"));
  EXPECT_EQ(cfg["model"]["proposals"], 10);
  EXPECT_EQ(cfg["model"]["theta"], 1);
  EXPECT_EQ(cfg["model"]["mode"], "individual");
  EXPECT_EQ(load_checkpoint(indiv_dir / "model.dynp").config().proposals, 10);
}

TEST_F(CliFixture, TrainWritesSidecarLogAndCheckpoint) {
  const auto cfg = nlohmann::json::parse(slurp(query_dir / "run_config.json"));
  EXPECT_EQ(cfg["command"], "train");
  EXPECT_EQ(cfg["distill"], true);
  EXPECT_EQ(cfg["model"]["theta"], 4);
  EXPECT_EQ(cfg["lr_drop_at"], 0.8);
  EXPECT_EQ(cfg["lr_drop"], 0.1);
  EXPECT_TRUE(fs::exists(query_dir / "model.dynp"));
  const auto log = lines(slurp(query_dir / "train_log.csv"));
  EXPECT_EQ(log.size(), 3u);  // header + 2 steps
}

TEST_F(CliFixture, TrainTwiceGivesIdenticalCheckpoint) {
  const fs::path out = scratch("train_again");
  ASSERT_EQ(run({"train", "--mode", "switchable", "--distill", "on", "--steps", "2", "--batch", "1", "--log-every",
                 "1", "--data", data.string(), "--out", out.string()})
                .code,
            0);
  EXPECT_EQ(slurp(out / "model.dynp"), slurp(query_dir / "model.dynp"));
  fs::remove_all(out);
}

TEST_F(CliFixture, EvalConfigAllEmitsFourRows) {
  const fs::path out = root / "eval_all.csv";
  ASSERT_EQ(run({"eval", "--ckpt", (query_dir / "model.dynp").string(), "--data", data.string(), "--config", "all",
                 "--out", out.string()})
                .code,
            0);
  const auto rows = lines(slurp(out));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], kEvalHeader);
  const auto side = nlohmann::json::parse(slurp(out.string() + ".run_config.json"));
  EXPECT_EQ(side["command"], "eval");
  EXPECT_EQ(side["selection"]["config_all"], true);
}

TEST_F(CliFixture, EvalTwiceIsIdentical) {
  const fs::path a = root / "eval_a.csv", b = root / "eval_b.csv";
  const std::string ckpt = (dyn_dir / "model.dynp").string();
  ASSERT_EQ(run({"eval", "--ckpt", ckpt, "--data", data.string(), "--proposals", "auto,10", "--oracle-count", "--out",
                 a.string()})
                .code,
            0);
  ASSERT_EQ(run({"eval", "--ckpt", ckpt, "--data", data.string(), "--proposals", "auto,10", "--oracle-count", "--out",
                 b.string()})
                .code,
            0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(lines(slurp(a)).size(), 4u);
}

TEST_F(CliFixture, AutoRejectedForIndividualModel) {
  EXPECT_EQ(run({"eval", "--ckpt", (indiv_dir / "model.dynp").string(), "--data", data.string(), "--proposals", "auto",
                 "--out", (root / "x.csv").string()})
                .code,
            kExitUsage);
}

TEST_F(CliFixture, ProposalsOutOfRangeRejected) {
  const std::string ckpt = (query_dir / "model.dynp").string();
  for (const char* p : {"0", "41", "ten", "10x"})
    EXPECT_EQ(run({"eval", "--ckpt", ckpt, "--data", data.string(), "--proposals", p, "--out",
                   (root / "x.csv").string()})
                  .code,
              kExitUsage)
        << p;
}

TEST_F(CliFixture, CountBenchSweepHeaders) {
  const std::string ckpt = (dyn_dir / "model.dynp").string();
  const fs::path c = root / "count.csv", b = root / "bench.csv", s = root / "sweep.csv";
  ASSERT_EQ(run({"count", "--ckpt", ckpt, "--data", data.string(), "--out", c.string()}).code, 0);
  ASSERT_EQ(run({"bench", "--ckpt", ckpt, "--data", data.string(), "--proposals", "10,40", "--images", "2",
                 "--repeats", "1", "--out", b.string()})
                .code,
            0);
  ASSERT_EQ(run({"sweep", "--ckpt", ckpt, "--data", data.string(), "--from", "10", "--to", "30", "--step", "10",
                 "--images", "2", "--repeats", "1", "--out", s.string()})
                .code,
            0);
  auto rc = lines(slurp(c)), rb = lines(slurp(b)), rs = lines(slurp(s));
  ASSERT_EQ(rc.size(), 2u);
  EXPECT_EQ(rc[0], kCountHeader);
  ASSERT_EQ(rb.size(), 3u);
  EXPECT_EQ(rb[0], kBenchHeader);
  ASSERT_EQ(rs.size(), 4u);
  EXPECT_EQ(rs[0], kSweepHeader);
  for (const auto& p : {c, b, s}) EXPECT_TRUE(fs::exists(p.string() + ".run_config.json")) << p;
}

TEST_F(CliFixture, SweepBadRangeIsUsageError) {
  EXPECT_EQ(run({"sweep", "--ckpt", (dyn_dir / "model.dynp").string(), "--data", data.string(), "--from", "30",
                 "--to", "10", "--out", (root / "s.csv").string()})
                .code,
            kExitUsage);
}

TEST_F(CliFixture, BadSplitIsUsageError) {
  EXPECT_EQ(run({"count", "--ckpt", (dyn_dir / "model.dynp").string(), "--data", data.string(), "--split", "test",
                 "--out", (root / "c.csv").string()})
                .code,
            kExitUsage);
}

TEST_F(CliFixture, CorruptCheckpointIsCheckpointError) {
  const fs::path bad = root / "bad.dynp";
  std::string bytes = slurp(query_dir / "model.dynp");
  bytes.resize(bytes.size() / 2);
  std::ofstream(bad, std::ios::binary) << bytes;
  const auto r = run({"eval", "--ckpt", bad.string(), "--data", data.string(), "--out", (root / "e.csv").string()});
  EXPECT_EQ(r.code, kExitCheckpoint);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
}

TEST_F(CliFixture, MissingCheckpointIsCheckpointError) {
  EXPECT_EQ(run({"eval", "--ckpt", (root / "nope.dynp").string(), "--data", data.string(), "--out",
                 (root / "e.csv").string()})
                .code,
            kExitCheckpoint);
}
