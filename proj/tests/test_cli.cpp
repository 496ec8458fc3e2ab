#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "dphdun/image_io.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("dphdun_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_ / "gt");
    for (int i = 0; i < 3; ++i) {
      dphdun::io::write_pgm(root_ / "gt" / ("img" + std::to_string(i) + ".pgm"),
                            dphdun::io::synthetic_scene(16 + 8 * i, 24, static_cast<std::uint64_t>(i)));
    }
    std::ofstream(root_ / "cfg.json") << R"({"block_size": 4, "stages": 2, "channels": 4, "rrm_blocks": 1,
      "patch_size": 16, "steps": 4, "gamma": 0.5, "lr": 0.001, "seed": 5})";
    const auto r = run("train --config cfg.json --checkpoint model.ckpt --image gt/img0.pgm --log train.csv");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static CliResult run(const std::string& args) {
    const std::string cmd = "cd '" + root_.string() + "' && '" DPHDUN_CLI_PATH "' " + args + " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    CliResult r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(root_ / "stdout.txt"), slurp(root_ / "stderr.txt")};
    fs::remove(root_ / "stdout.txt");
    fs::remove(root_ / "stderr.txt");
    return r;
  }

  static std::vector<std::string> listing() {
    std::vector<std::string> names;
    for (const auto& e : fs::recursive_directory_iterator(root_)) names.push_back(e.path().string());
    std::sort(names.begin(), names.end());
    return names;
  }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, TrainWritesCheckpointAndLog) {
  EXPECT_TRUE(fs::exists(root_ / "model.ckpt"));
  auto rows = parse_csv(slurp(root_ / "train.csv"));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"step", "loss", "psnr"}));
}

TEST_F(Cli, ReconstructWithGuidanceDump) {
  auto r = run("reconstruct --checkpoint model.ckpt --input gt/img1.pgm --output rec.pgm --dump-guidance g");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rec = dphdun::io::read_pgm(root_ / "rec.pgm");
  EXPECT_EQ(rec.height, 24u);
  EXPECT_EQ(rec.width, 24u);
  auto mask = dphdun::io::read_pgm(root_ / "g_hard_mask.pgm");
  std::size_t ones = 0;
  for (double v : mask.pixels) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    ones += v == 1.0;
  }
  EXPECT_GT(ones, 0u);
  EXPECT_LT(ones, mask.pixels.size());
  EXPECT_TRUE(fs::exists(root_ / "g_soft_map.pgm"));
  EXPECT_NE(r.out.find("psnr_db,"), std::string::npos);
}

TEST_F(Cli, EvaluateReportSchemaAndMeans) {
  auto r = run("evaluate --checkpoint model.ckpt --data gt --report report.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = parse_csv(slurp(root_ / "report.csv"));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"image", "psnr_db", "ssim", "identical"}));
  EXPECT_EQ(rows[1][0], "img0.pgm");
  EXPECT_EQ(rows[3][0], "img2.pgm");
  EXPECT_EQ(rows[4][0], "mean");
  double p = 0, s = 0;
  for (int i = 1; i <= 3; ++i) {
    p += std::stod(rows[i][1]);
    s += std::stod(rows[i][2]);
    EXPECT_GE(std::stod(rows[i][2]), -1.0);
    EXPECT_LE(std::stod(rows[i][2]), 1.0);
  }
  EXPECT_NEAR(std::stod(rows[4][1]), p / 3, 1e-9);
  EXPECT_NEAR(std::stod(rows[4][2]), s / 3, 1e-9);
  const auto json = slurp(root_ / "report.csv.json");
  EXPECT_NE(json.find("\"seconds\""), std::string::npos);
  EXPECT_NE(json.find("\"config\""), std::string::npos);
}

TEST_F(Cli, EvaluatePerfectPredictionsAreFlaggedIdentical) {
  auto r = run("evaluate --data gt --predictions gt --report same.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = parse_csv(slurp(root_ / "same.csv"));
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][3], "1") << rows[i][0];
}

TEST_F(Cli, NoiseSweepZeroRowEqualsNoiselessEvaluation) {
  auto e = run("evaluate --checkpoint model.ckpt --data gt --report clean.csv");
  ASSERT_EQ(e.code, 0) << e.err;
  auto s = run("sweep --axis noise --values 0,0.001,0.002,0.003,0.004 --checkpoint model.ckpt --data gt "
               "--output noise.csv");
  ASSERT_EQ(s.code, 0) << s.err;
  auto clean = parse_csv(slurp(root_ / "clean.csv"));
  auto sweep = parse_csv(slurp(root_ / "noise.csv"));
  ASSERT_EQ(sweep.size(), 6u);
  EXPECT_EQ(sweep[1][0], "noise");
  EXPECT_EQ(sweep[1][1], "0");
  EXPECT_EQ(sweep[1][2], clean.back()[1]);
  EXPECT_EQ(sweep[1][3], clean.back()[2]);
}

TEST_F(Cli, TrainingSweepEmitsOneRowPerValue) {
  auto r = run("sweep --axis rho --values 0.25,1.0 --config cfg.json --image gt/img0.pgm --steps 2");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = parse_csv(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "rho");
  EXPECT_EQ(rows[2][1], "1.0");
  auto split = run("sweep --axis split --values 1:1,1:3 --config cfg.json --image gt/img0.pgm --steps 1");
  ASSERT_EQ(split.code, 0) << split.err;
  EXPECT_EQ(parse_csv(split.out).size(), 3u);
}

TEST_F(Cli, MalformedConfigFailsWithoutWritingFiles) {
  std::ofstream(root_ / "bad.json") << "{\"stages\": 2";
  const auto before = listing();
  auto r = run("train --config bad.json --checkpoint never.ckpt --image gt/img0.pgm --log never.csv");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("configuration"), std::string::npos);
  EXPECT_EQ(listing(), before);
  auto s = run("sweep --axis stages --values 1 --config bad.json --image gt/img0.pgm --output never.csv");
  EXPECT_NE(s.code, 0);
  EXPECT_EQ(listing(), before);
  fs::remove(root_ / "bad.json");
}

TEST_F(Cli, ErrorsHaveDistinctMessagesAndNonzeroExit) {
  auto missing = run("reconstruct --checkpoint model.ckpt --input nope.pgm --output x.pgm");
  EXPECT_NE(missing.code, 0);
  EXPECT_NE(missing.err.find("input"), std::string::npos);

  auto no_ckpt = run("evaluate --checkpoint nope.ckpt --data gt");
  EXPECT_NE(no_ckpt.code, 0);
  EXPECT_NE(no_ckpt.err.find("checkpoint"), std::string::npos);

  auto bytes = slurp(root_ / "model.ckpt");
  const std::uint32_t v = 9;
  std::memcpy(bytes.data() + 8, &v, 4);
  std::ofstream(root_ / "future.ckpt", std::ios::binary) << bytes;
  auto version = run("evaluate --checkpoint future.ckpt --data gt");
  EXPECT_NE(version.code, 0);
  EXPECT_NE(version.err.find("version 9"), std::string::npos);
  EXPECT_NE(version.err.find("version 1"), std::string::npos);

  std::ofstream(root_ / "unknown.json") << R"({"stagez": 3})";
  auto unknown = run("train --config unknown.json --checkpoint x.ckpt --image gt/img0.pgm");
  EXPECT_NE(unknown.code, 0);
  EXPECT_NE(unknown.err.find("stagez"), std::string::npos);

  EXPECT_NE(missing.code, no_ckpt.code);
  EXPECT_NE(no_ckpt.code, unknown.code);
  EXPECT_NE(run("sweep --axis bogus --values 1").code, 0);
  EXPECT_NE(run("").code, 0);
  EXPECT_FALSE(fs::exists(root_ / "x.ckpt"));
}
