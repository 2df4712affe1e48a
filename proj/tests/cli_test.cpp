// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the bsim binary: exit codes, error lines, and outputs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out;  // stdout and stderr, interleaved
};

Result run(const std::string& args) {
  const std::string cmd = std::string(BSIM_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bsim-cli-test-" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kSmall =
    " --ranks 2 --batch 4 --group 2 --group-pre 2 --max-len 64 --threads 2 --seed 7";

TEST(Cli, ZeroStepsIsAValidationError) {
  const auto r = run("run --steps 0 --out " + scratch("zero").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("error code=1 kind=validation"), std::string::npos) << r.out;
}

TEST(Cli, EtaOutsideTailBatchingIsRejected) {
  const auto r = run("run --mode bubblespec --eta 1.5 --out " + scratch("eta").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("eta"), std::string::npos) << r.out;
}

TEST(Cli, UnknownModeIsRejected) {
  const auto r = run("run --mode warp --out " + scratch("mode").string());
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, RunWritesReportsAndPools) {
  const auto dir = scratch("run");
  const auto r = run("run --mode bubblespec --steps 3" + kSmall + " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("bubblespec"), std::string::npos);
  std::ifstream in(dir / "report.jsonl");
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(in, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 5u);
  EXPECT_EQ(recs.front().at("type"), "config");
  EXPECT_EQ(recs[1].at("type"), "step");
  EXPECT_EQ(recs.back().at("type"), "summary");
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "bubble_series.csv"));
  EXPECT_TRUE(fs::exists(dir / "pools" / "step-1.pools"));
}

TEST(Cli, RunIsDeterministic) {
  const auto a = scratch("det-a"), b = scratch("det-b");
  ASSERT_EQ(run("run --steps 2" + kSmall + " --out " + a.string()).code, 0);
  ASSERT_EQ(run("run --steps 2" + kSmall + " --threads 1 --out " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "report.jsonl"), slurp(b / "report.jsonl"));
  EXPECT_EQ(slurp(a / "pools" / "step-2.pools"), slurp(b / "pools" / "step-2.pools"));
}

TEST(Cli, ConfigFileSetsOptions) {
  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "run.toml");
    cfg << "mode = \"baseline\"\nranks = 2\nbatch = 4\ngroup = 2\nmax-len = 32\nsteps = 1\n";
  }
  const auto r = run("run --config " + (dir / "run.toml").string() + " --out " + (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream in(dir / "out" / "report.jsonl");
  std::string line;
  std::getline(in, line);
  const auto cfg = nlohmann::json::parse(line);
  EXPECT_EQ(cfg.at("mode"), "baseline");
  EXPECT_EQ(cfg.at("ranks"), 2);
  EXPECT_EQ(cfg.at("max_len"), 32);
}

TEST(Cli, ShippedConfigsParse) {
  for (const char* name : {"default.toml", "sparse-tail.toml", "uniform.toml"}) {
    const auto path = fs::path(BSIM_SOURCE_DIR) / "configs" / name;
    ASSERT_TRUE(fs::exists(path)) << path;
    const auto r = run("run --config " + path.string() + " --steps 1" + kSmall + " --out " +
                       scratch(std::string("shipped-") + name).string());
    EXPECT_EQ(r.code, 0) << name << ": " << r.out;
  }
}

TEST(Cli, TailBatchingWritesRounds) {
  const auto dir = scratch("tail");
  const auto r = run("run --mode tail-batching --eta 1.3 --steps 3" + kSmall + " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("rounded up"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "rounds.csv"));
}

TEST(Cli, VerifyPassesAndFaultInjectionFails) {
  const auto ok = run("verify --suite all");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("max TV distance"), std::string::npos);
  const auto bad = run("verify --suite lossless --inject-fault residual-norm");
  EXPECT_EQ(bad.code, 3) << bad.out;
  EXPECT_NE(bad.out.find("kind=verification"), std::string::npos);
}

TEST(Cli, ComparePrintsSpeedup) {
  const auto base = scratch("cmp-base"), spec = scratch("cmp-spec");
  ASSERT_EQ(run("run --mode baseline --steps 3" + kSmall + " --out " + base.string()).code, 0);
  ASSERT_EQ(run("run --mode bubblespec --steps 3" + kSmall + " --out " + spec.string()).code, 0);
  const auto r = run("compare " + (base / "report.jsonl").string() + " " + (spec / "report.jsonl").string() +
                     " --from-step 1");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("alpha"), std::string::npos);
  EXPECT_NE(r.out.find("predicted speedup"), std::string::npos);
  EXPECT_EQ(r.out.find("warning"), std::string::npos) << r.out;

  const auto other = scratch("cmp-other");
  ASSERT_EQ(run("run --mode baseline --steps 3 --max-len 48 --ranks 2 --batch 4 --group 2 --out " + other.string()).code,
            0);
  const auto w = run("compare " + (base / "report.jsonl").string() + " " + (other / "report.jsonl").string());
  EXPECT_EQ(w.code, 0);
  EXPECT_NE(w.out.find("warning: configs differ"), std::string::npos) << w.out;
}

TEST(Cli, CompareMissingFileFails) {
  const auto r = run("compare /nonexistent/report.jsonl");
  EXPECT_EQ(r.code, 1);
}

}  // namespace
