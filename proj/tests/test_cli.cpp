#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ulpt/cli.hpp"

namespace fs = std::filesystem;
using ulpt::cli::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream os, es;
  const int code = ulpt::cli::run(args, os, es);
  return {code, os.str(), es.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ulpt_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, CountsOnlyMatchesParameterFormulas) {
  const auto dir = scratch("counts");
  const auto r = run({"ablate", "--counts-only", "--n", "100", "--d", "768", "--modes", "ulpt", "vanilla_pt", "--ranks",
                      "2", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = json::parse(r.out);
  EXPECT_EQ(s["counts"][0]["param_count"], 1736);
  EXPECT_EQ(s["counts"][1]["param_count"], 76800);
}

TEST(Cli, TrainWritesSummaryTraceAndCheckpoint) {
  const auto dir = scratch("train");
  const auto r = run({"train", "--n", "4", "--r", "2", "--d", "8", "--steps", "200", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = json::parse(slurp(dir / "train_summary.json"));
  EXPECT_EQ(s["param_count"], 4 * 2 + 2 * 8);
  EXPECT_TRUE(s["monotone"].get<bool>());
  EXPECT_LT(s["final_loss"].get<double>(), s["initial_loss"].get<double>());
  EXPECT_TRUE(fs::exists(dir / "train_trace.csv"));
  const auto ck = ulpt::load(dir / "train_prompt.ulpt");
  EXPECT_EQ(ck.n, 4u);
}

TEST(Cli, ZeroRateKeepsLossFlat) {
  const auto dir = scratch("zero");
  const auto r = run({"train", "--d", "8", "--lr", "0", "--steps", "30", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = json::parse(r.out);
  EXPECT_EQ(s["final_loss"], s["initial_loss"]);
}

TEST(Cli, ReplayIsByteIdentical) {
  const auto a = scratch("replay_a");
  const auto b = scratch("replay_b");
  ASSERT_EQ(run({"train", "--mode", "ulpt_no_scale", "--d", "8", "--steps", "100", "--line-search", "--out",
                 a.string()})
                .code,
            0);
  const auto r = run({"replay", "--config", (a / "train_config.json").string(), "--out", b.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(a / "train_summary.json"), slurp(b / "train_summary.json"));
  EXPECT_EQ(slurp(a / "train_prompt.ulpt"), slurp(b / "train_prompt.ulpt"));
}

TEST(Cli, ReplayOfJlAndGradcheck) {
  for (std::vector<std::string> args :
       {std::vector<std::string>{"jl", "--what", "rank", "tail", "--trials", "2000", "--tail-ranks", "1", "4"},
        std::vector<std::string>{"gradcheck", "--instances", "3", "--modes", "ulpt", "tune_p_frozen_z"}}) {
    const auto a = scratch("rp_a_" + args[0]);
    const auto b = scratch("rp_b_" + args[0]);
    args.push_back("--out");
    args.push_back(a.string());
    ASSERT_EQ(run(args).code, 0);
    ASSERT_EQ(run({"replay", "--config", (a / (args[0] + "_config.json")).string(), "--out", b.string()}).code, 0);
    EXPECT_EQ(slurp(a / (args[0] + "_summary.json")), slurp(b / (args[0] + "_summary.json")));
  }
}

TEST(Cli, CsvFormat) {
  const auto dir = scratch("csv");
  const auto r = run({"ablate", "--counts-only", "--format", "csv", "--modes", "ulpt", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("mode,n,r,d,param_count\n", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "ablate_counts.csv"));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("codes");
  EXPECT_EQ(run({"train", "--r", "40", "--d", "8", "--out", dir.string()}).code, 2);
  EXPECT_EQ(run({"train", "--lr", "fast", "--out", dir.string()}).code, 2);
  EXPECT_EQ(run({"train", "--bogus", "--out", dir.string()}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"analyze-dims", "--checkpoint", (dir / "missing.ulpt").string(), "--out", dir.string()}).code, 4);
  EXPECT_EQ(run({"registry", "--action", "report", "--dir", (dir / "none").string(), "--out", dir.string()}).code, 4);
  const auto div = run({"train", "--d", "8", "--optimizer", "gd", "--lr", "1e6", "--steps", "200", "--out",
                        dir.string()});
  EXPECT_EQ(div.code, 3);
  const json s = json::parse(slurp(dir / "train_summary.json"));
  EXPECT_TRUE(s["diverged"].get<bool>());
  EXPECT_TRUE(fs::exists(dir / "train_trace.csv"));
}

TEST(Cli, CorruptCheckpointIsIoError) {
  const auto dir = scratch("corrupt");
  ASSERT_EQ(run({"train", "--d", "8", "--steps", "10", "--out", dir.string()}).code, 0);
  std::string bytes = slurp(dir / "train_prompt.ulpt");
  bytes[40] ^= 1;
  std::ofstream(dir / "bad.ulpt", std::ios::binary) << bytes;
  EXPECT_EQ(run({"analyze-dims", "--checkpoint", (dir / "bad.ulpt").string(), "--out", dir.string()}).code, 4);
}

TEST(Cli, RegistryAddReportRemove) {
  const auto dir = scratch("registry");
  const auto reg = dir / "reg";
  ASSERT_EQ(run({"train", "--d", "8", "--steps", "10", "--out", dir.string()}).code, 0);
  const auto ck = (dir / "train_prompt.ulpt").string();
  ASSERT_EQ(run({"registry", "--action", "add", "--dir", reg.string(), "--task-id", "a", "--checkpoint", ck, "--out",
                 dir.string()})
                .code,
            0);
  ASSERT_EQ(run({"registry", "--action", "add", "--dir", reg.string(), "--task-id", "b", "--checkpoint", ck, "--out",
                 dir.string()})
                .code,
            0);
  auto r = run({"registry", "--action", "report", "--dir", reg.string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["task_count"], 2);
  r = run({"registry", "--action", "remove", "--dir", reg.string(), "--task-id", "a", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["task_count"], 1);
  EXPECT_FALSE(fs::exists(reg / "a.ulpt"));
}

TEST(Cli, RegistrySimulateRatio) {
  const auto dir = scratch("simulate");
  const auto r = run({"registry", "--action", "simulate", "--n", "100", "--r", "2", "--d", "768", "--tasks", "20",
                      "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(json::parse(r.out)["savings_ratio"].get<double>(), 1736.0 / 76800.0, 1e-12);
}

TEST(Cli, AnalyzeDimsFromRunDirectory) {
  const auto dir = scratch("dims");
  ASSERT_EQ(run({"train", "--d", "16", "--steps", "10", "--out", dir.string()}).code, 0);
  const auto r = run({"analyze-dims", "--run", dir.string(), "--k", "5", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(run({"analyze-dims", "--run", dir.string(), "--k", "17", "--out", dir.string()}).code, 2);
}

TEST(Cli, TunePvsZBudgets) {
  const auto dir = scratch("tune");
  const auto r = run({"tune-p-vs-z", "--budgets", "1000", "1736", "3136", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rows = json::parse(r.out)["budgets"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[0]["tune_z_rank"].is_null());
  EXPECT_TRUE(rows[0]["tune_p_rank"].is_null());
  EXPECT_EQ(rows[1]["tune_z_rank"], 2);
  EXPECT_TRUE(rows[1]["tune_p_rank"].is_null());
  EXPECT_EQ(rows[2]["tune_z_rank"], 16);
  EXPECT_EQ(rows[2]["tune_p_rank"], 2);
  EXPECT_EQ(rows[2]["tune_p_params"], 3072);
}

TEST(Cli, OutDirFromEnvironment) {
  const auto dir = scratch("env");
  ::setenv("ULPT_OUT_DIR", dir.string().c_str(), 1);
  const auto r = run({"jl", "--what", "rank"});
  ::unsetenv("ULPT_OUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "jl_summary.json"));
  EXPECT_TRUE(fs::exists(dir / "jl_config.json"));
}
