#include "cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace sft {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code = 0;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sft");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("sft_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string out(const std::string& sub = "") const { return (dir_ / sub).string(); }
  fs::path dir_;
};

TEST_F(Cli, CounterexampleWritesCertifiedTriple) {
  const auto r = run_cli({"counterexample", "--out", out()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("PASS midpoint_exceeds_endpoints"), std::string::npos);
  const json j = json::parse(slurp(dir_ / "counterexample.json"));
  EXPECT_EQ(j["subcommand"], "counterexample");
  EXPECT_EQ(j["version"], kVersion);
  EXPECT_EQ(j["seed"], 0);
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_TRUE(j["config"].contains("m"));
  for (const auto& [k, v] : j["verdicts"].items()) EXPECT_TRUE(v.get<bool>()) << k;

  const auto rows = parse_csv(slurp(dir_ / "counterexample.csv"));
  ASSERT_EQ(rows.size(), 4u);  // header + a, mid, b
  double f_end = 0.0, f_mid = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double f = std::stod(rows[i][3]);
    EXPECT_DOUBLE_EQ(f, counterexample_f(std::stod(rows[i][1]), std::stod(rows[i][2])));
    if (i == 2) f_mid = f;
    else f_end = std::max(f_end, f);
  }
  EXPECT_GT(f_mid - f_end, 1e-3);
}

TEST_F(Cli, GradcheckIsByteIdenticalAcrossRuns) {
  const auto a = run_cli({"gradcheck", "--seed", "7", "--seeds", "1", "--out", out("a")});
  const auto b = run_cli({"gradcheck", "--seed", "7", "--seeds", "1", "--out", out("b")});
  ASSERT_EQ(a.code, 0) << a.err << a.out;
  ASSERT_EQ(b.code, 0);
  const auto ca = slurp(dir_ / "a" / "gradcheck.csv");
  EXPECT_FALSE(ca.empty());
  EXPECT_EQ(ca, slurp(dir_ / "b" / "gradcheck.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "gradcheck.json"), slurp(dir_ / "b" / "gradcheck.json"));
  // 3 modes × 2 LN × sampled × rpe, one seed each
  EXPECT_EQ(parse_csv(ca).size(), 1u + 24u);
}

TEST_F(Cli, BenchTimeRowStructure) {
  const auto r = run_cli({"bench-time", "--n", "64", "--k", "2,4,8,16,32", "--d", "8", "--heads", "2", "--reps", "2",
                          "--warmup", "0", "--out", out()});
  ASSERT_NE(r.code, 2) << r.err;
  const auto rows = parse_csv(slurp(dir_ / "bench-time.csv"));
  ASSERT_EQ(rows.size(), 7u);
  const std::vector<std::string> ks{"2", "4", "8", "16", "32"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rows[i + 1][0], "sft");
    EXPECT_EQ(rows[i + 1][2], ks[i]);
  }
  EXPECT_EQ(rows[6][0], "reference");
  EXPECT_EQ(rows[6][2], "64");
}

TEST_F(Cli, UsageErrorsExitTwo) {
  auto r = run_cli({"counterexample", "--bogus", "1", "--out", out()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(run_cli({"no-such-command"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"counterexample", "--m", "abc", "--out", out()}).code, 2);
  // engine-level argument errors
  r = run_cli({"pseudoconvexity", "--groups", "w_v", "--pairs", "1", "--out", out()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unsupported group"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "counterexample.json"));
}

TEST_F(Cli, HelpAndVersionExitZero) {
  auto r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("bench-flops"), std::string::npos);
  r = run_cli({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(kVersion), std::string::npos);
}

TEST_F(Cli, FailedVerdictExitsOne) {
  const auto r = run_cli({"rotation-invariance", "--clouds", "2", "--rotations", "2", "--n-tokens", "16", "--d", "8",
                          "--k", "4", "--tol", "0", "--out", out()});
  EXPECT_EQ(r.code, 1) << r.err;
  EXPECT_NE(r.out.find("FAIL outputs_rotation_invariant"), std::string::npos);
  const json j = json::parse(slurp(dir_ / "rotation-invariance.json"));
  EXPECT_FALSE(j["pass"].get<bool>());
}

TEST_F(Cli, ConfigPrecedence) {
  fs::create_directories(dir_);
  const auto cfg = dir_ / "cfg.json";
  std::ofstream(cfg) << R"({"m": 12.5, "seed": 3})";

  ASSERT_EQ(run_cli({"counterexample", "--config", cfg.string(), "--out", out("file")}).code, 0);
  json j = json::parse(slurp(dir_ / "file" / "counterexample.json"));
  EXPECT_EQ(j["config"]["m"], 12.5);
  EXPECT_EQ(j["seed"], 3);

  ASSERT_EQ(run_cli({"counterexample", "--config", cfg.string(), "--m", "15", "--out", out("flag")}).code, 0);
  j = json::parse(slurp(dir_ / "flag" / "counterexample.json"));
  EXPECT_EQ(j["config"]["m"], 15.0);

  ASSERT_EQ(run_cli({"counterexample", "--out", out("default")}).code, 0);
  j = json::parse(slurp(dir_ / "default" / "counterexample.json"));
  EXPECT_EQ(j["config"]["m"], 20.0);

  std::ofstream(dir_ / "bad_key.json") << R"({"nope": 1})";
  EXPECT_EQ(run_cli({"counterexample", "--config", (dir_ / "bad_key.json").string(), "--out", out()}).code, 2);
  std::ofstream(dir_ / "bad.json") << "{";
  EXPECT_EQ(run_cli({"counterexample", "--config", (dir_ / "bad.json").string(), "--out", out()}).code, 2);
  std::ofstream(dir_ / "array.json") << "[1]";
  EXPECT_EQ(run_cli({"counterexample", "--config", (dir_ / "array.json").string(), "--out", out()}).code, 2);
  EXPECT_EQ(run_cli({"counterexample", "--config", (dir_ / "missing.json").string(), "--out", out()}).code, 2);
}

TEST_F(Cli, ListOptionsFromConfig) {
  fs::create_directories(dir_);
  std::ofstream(dir_ / "a.json") << R"({"ns": "8,16,32,64", "trials": 2})";
  std::ofstream(dir_ / "b.json") << R"({"ns": [8, 16, 32, 64], "trials": 2})";
  ASSERT_NE(run_cli({"gradnorm-scaling", "--config", (dir_ / "a.json").string(), "--out", out("a")}).code, 2);
  ASSERT_NE(run_cli({"gradnorm-scaling", "--config", (dir_ / "b.json").string(), "--out", out("b")}).code, 2);
  EXPECT_EQ(slurp(dir_ / "a" / "gradnorm-scaling.csv"), slurp(dir_ / "b" / "gradnorm-scaling.csv"));
  const json j = json::parse(slurp(dir_ / "a" / "gradnorm-scaling.json"));
  EXPECT_EQ(j["config"]["ns"], json::array({8, 16, 32, 64}));
}

TEST_F(Cli, OutputDirectoryFromEnvironment) {
  ::setenv("SFT_OUT_DIR", out("env").c_str(), 1);
  const auto r = run_cli({"counterexample"});
  ::unsetenv("SFT_OUT_DIR");
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "env" / "counterexample.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "env" / "counterexample.json"));
  EXPECT_EQ(cli::default_out_dir(), "sft_out");
}

TEST_F(Cli, CsvEmbedsConfigAndVerdict) {
  ASSERT_EQ(run_cli({"bench-flops", "--n", "64", "--rates", "0.125,0.25,0.5", "--out", out()}).code == 2, false);
  const auto rows = parse_csv(slurp(dir_ / "bench-flops.csv"));
  ASSERT_GE(rows.size(), 4u);
  const auto& h = rows[0];
  ASSERT_GE(h.size(), 4u);
  EXPECT_EQ(h[h.size() - 4], "seed");
  EXPECT_EQ(h[h.size() - 3], "version");
  EXPECT_EQ(h[h.size() - 2], "config");
  EXPECT_EQ(h[h.size() - 1], "pass");
  const json summary = json::parse(slurp(dir_ / "bench-flops.json"));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), h.size());
    EXPECT_EQ(json::parse(rows[i][h.size() - 2]), summary["config"]);
    EXPECT_EQ(rows[i].back(), summary["pass"].get<bool>() ? "true" : "false");
    EXPECT_EQ(rows[i][h.size() - 3], kVersion);
  }
}

// ---------------------------------------------------------------------------

TEST(Csv, QuotingRoundTrip) {
  CsvTable t({"a", "b"});
  t.add({"plain", "has,comma"});
  t.add({"has \"quote\"", "line\nbreak"});
  t.add({"", "{\"k\": [1, 2]}"});
  const auto rows = parse_csv(t.str());
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], t.header());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(rows[i + 1], t.rows()[i]);
  EXPECT_EQ(csv_field("x"), "x");
  EXPECT_EQ(csv_field("a\"b"), "\"a\"\"b\"");
  EXPECT_THROW(t.add({"one"}), std::invalid_argument);
  EXPECT_THROW(parse_csv("\"open"), std::runtime_error);
}

TEST(Csv, NumberFormatRoundTrips) {
  Rng rng(0);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<int>(rng.below(40)) - 20);
    EXPECT_EQ(std::stod(fmt(v)), v);
  }
}

}  // namespace
}  // namespace sft
