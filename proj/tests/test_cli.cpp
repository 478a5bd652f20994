#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "castformer/cli.hpp"
#include "castformer/errors.hpp"

using namespace castformer;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_without_wall_clock(const fs::path& log) {
  std::vector<std::string> out;
  std::istringstream is(read_bytes(log));
  std::string line;
  while (std::getline(is, line)) out.push_back(line.substr(0, line.rfind('\t')));
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("castformer_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string data() {
    const auto p = (dir / "syn.jsonl").string();
    if (!fs::exists(p)) {
      auto r = cli({"gen-data", "--out", p, "--samples", "50", "--frames", "20", "--fps", "4", "--seed", "3"});
      EXPECT_EQ(r.code, 0) << r.err;
    }
    return p;
  }

  std::vector<std::string> small(std::vector<std::string> args) {
    for (const char* kv : {"encoder.d_model=8", "encoder.heads=2", "encoder.layers=1", "encoder.ffn_dim=16",
                           "rsf.heads=2", "cpe.heads=2", "train.chunk_len=4", "train.epochs=3",
                           "metrics.fps=4"}) {
      args.push_back("--set");
      args.push_back(kv);
    }
    return args;
  }

  fs::path dir;
};

}  // namespace

TEST_F(CliTest, GenDataWritesOneLinePerSampleDeterministically) {
  const auto a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
  ASSERT_EQ(cli({"gen-data", "--out", a, "--samples", "30", "--frames", "10", "--seed", "5"}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--out", b, "--samples", "30", "--frames", "10", "--seed", "5"}).code, 0);
  const auto bytes = read_bytes(a);
  EXPECT_EQ(std::count(bytes.begin(), bytes.end(), '\n'), 30);
  EXPECT_EQ(bytes, read_bytes(b));
  EXPECT_TRUE(fs::exists(a + ".manifest"));
  EXPECT_NE(read_bytes(a + ".manifest").find("samples=30"), std::string::npos);
}

TEST_F(CliTest, GenDataShiftedSplit) {
  const auto p = (dir / "s.jsonl").string();
  ASSERT_EQ(cli({"gen-data", "--out", p, "--samples", "20", "--frames", "10", "--spurious", "1.0", "--shifted-test"}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "s.shifted.jsonl"));
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(cli({"gen-data", "--out", "/proc/definitely/not/here.jsonl", "--samples", "3"}).code, 2);
  auto r = cli({"train", "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no dataset"), std::string::npos);
  r = cli({"ablate", "--variants", "rsf,wings", "--data", data()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("rsf+cpe"), std::string::npos) << r.err;
  r = cli({"train", "--data", data(), "--set", "encoder.colour=blue"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("encoder.colour"), std::string::npos);
  EXPECT_EQ(cli({"no-such-command"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(CliTest, ConfigFileErrorsCarryLineNumbers) {
  std::ofstream(dir / "bad.cfg") << "# comment\ntrain.lr=0.01\nencoder.layers=many\n";
  auto r = cli({"train", "--config", (dir / "bad.cfg").string(), "--data", data()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":3:"), std::string::npos) << r.err;
}

TEST_F(CliTest, GradCheckPassesAndCatchesFaults) {
  auto ok = cli({"grad-check"});
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("end-to-end"), std::string::npos);
  auto bad = cli({"grad-check", "--inject-fault", "orthogonalize:1.5"});
  EXPECT_EQ(bad.code, 4);
  EXPECT_NE(bad.err.find("cpe"), std::string::npos) << bad.err;
  EXPECT_EQ(cli({"grad-check", "--dropout-train"}).code, 4);
}

TEST_F(CliTest, ResumeMatchesUninterruptedRun) {
  const auto d = data();
  const auto full = (dir / "full").string(), part = (dir / "part").string();
  ASSERT_EQ(cli(small({"train", "--data", d, "--out", full, "--quiet", "--set", "train.epochs=4"})).code, 0);
  ASSERT_EQ(cli(small({"train", "--data", d, "--out", part, "--quiet", "--set", "train.epochs=4", "--stop-after", "2"})).code, 0);
  ASSERT_EQ(cli(small({"train", "--data", d, "--out", part, "--quiet", "--set", "train.epochs=4", "--resume",
                       part + "/checkpoint.bin"}))
                .code,
            0);
  EXPECT_EQ(read_bytes(full + "/checkpoint.bin"), read_bytes(part + "/checkpoint.bin"));
  EXPECT_EQ(lines_without_wall_clock(full + "/train.log"), lines_without_wall_clock(part + "/train.log"));
}

TEST_F(CliTest, EvalWritesOneBlockPerHorizon) {
  const auto d = data();
  const auto run = (dir / "run").string();
  ASSERT_EQ(cli(small({"train", "--data", d, "--out", run, "--quiet"})).code, 0);
  const auto rep = (dir / "report").string();
  auto r = cli({"eval", "--model", run, "--truncate-seconds", "0,1,2,3,4", "--report", rep});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(read_bytes(rep + ".json"));
  ASSERT_EQ(j.at("horizons").size(), 5u);
  EXPECT_EQ(j.at("horizons")[4].at("frames"), 4);
  EXPECT_TRUE(fs::exists(rep + ".txt"));

  auto plain = cli({"eval", "--model", run});
  auto k0 = cli({"eval", "--model", run, "--truncate-seconds", "0"});
  EXPECT_EQ(plain.out, k0.out);

  EXPECT_EQ(cli({"eval", "--model", run, "--truncate-seconds", "5"}).code, 2);
}

TEST_F(CliTest, InspectTraceAndAblate) {
  const auto d = data();
  const auto run = (dir / "run").string();
  ASSERT_EQ(cli(small({"train", "--data", d, "--out", run, "--quiet"})).code, 0);
  const auto trace = (dir / "trace.json").string();
  ASSERT_EQ(cli({"inspect-trace", "--model", run, "--out", trace, "--samples", "2"}).code, 0);
  const auto t = read_bytes(trace);
  EXPECT_NE(t.find("attention_in"), std::string::npos) << t.substr(0, 300);

  const auto out = (dir / "abl").string();
  auto r = cli(small({"ablate", "--data", d, "--variants", "tbase,full,alpha:0", "--out", out,
                      "--set", "train.epochs=1"}));
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(read_bytes(out + ".json"));
  EXPECT_EQ(j.size(), 3u);
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(DivergenceError("x", 3)), 3);
  EXPECT_EQ(exit_code_for(NumericError("x")), 3);
  EXPECT_EQ(exit_code_for(VerificationError("x")), 4);
  EXPECT_EQ(exit_code_for(UnreliableCheckError("x")), 4);
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(Variants, GroupsExpand) {
  EXPECT_EQ(expand_variants("modules").size(), 8u);
  EXPECT_EQ(expand_variants("alpha-sweep").size(), 5u);
  EXPECT_EQ(expand_variants("attention").size(), 3u);
  EXPECT_THROW(expand_variants("bogus"), ConfigError);
}
