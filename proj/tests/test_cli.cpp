#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "atlas_replay/continual.hpp"
#include "atlas_replay/experiment.hpp"
#include "fixtures.hpp"

using namespace atlas_replay;
namespace fs = std::filesystem;

namespace {

// Runs the CLI with `args` from `cwd`; returns the exit status.
int cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" ATLAS_REPLAY_CLI "' " + args + " > cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Corpus and atlas shared by the pipeline tests: 3 domains, 10 cases each.
void prepare(const fs::path& dir) {
  ASSERT_EQ(cli(dir, "gen-data --seed 3 --domains 3 --cases 10 --out corpus"), 0) << slurp(dir / "cli.log");
  ASSERT_EQ(cli(dir, "build-atlas --corpus corpus --r 3 --seed 1 --out atlas.bin"), 0) << slurp(dir / "cli.log");
}

}  // namespace

TEST(Cli, ZeroEpochsWritesInitialization) {
  fixtures::TempDir dir("cli_zero");
  prepare(dir.path());
  ASSERT_EQ(cli(dir.path(), "train --method atlas-replay,ewc --corpus corpus --atlas atlas.bin --order 2 --epochs 0 "
                            "--seed 5 --no-single --out run"),
            0)
      << slurp(dir / "cli.log");
  for (Method m : {Method::atlas_replay, Method::ewc_seg}) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.epochs = 0;
    cfg.seed = 5;
    const auto atlas = load_atlas((dir / "atlas.bin").string());
    ContinualTrainer fresh(cfg, &atlas);
    const auto ck = load_checkpoint((method_dir(dir / "run", m) / "stage_1" / "checkpoint.bin").string());
    EXPECT_EQ(ck.parameter_bytes(), fresh.checkpoint().parameter_bytes()) << method_name(m);
    EXPECT_FALSE(fs::exists(method_dir(dir / "run", m) / "single_1"));
  }
}

TEST(Cli, PipelineReportHasMethodsTimesStagesTimesTasksRows) {
  fixtures::TempDir dir("cli_pipeline");
  prepare(dir.path());
  ASSERT_EQ(cli(dir.path(), "train --method atlas-replay,sequential --corpus corpus --atlas atlas.bin --order 1,2,3 "
                            "--epochs 1 --seed 5 --out run"),
            0)
      << slurp(dir / "cli.log");
  ASSERT_EQ(cli(dir.path(), "evaluate --runs run --corpus corpus --out report.csv --overlays ov --summary summary.csv"), 0)
      << slurp(dir / "cli.log");
  const auto report = slurp(dir / "report.csv");
  const auto rows = lines_of(report);
  ASSERT_EQ(rows.size(), 1u + 2u * 3u * 3u);
  EXPECT_EQ(rows[0], "method,stage,task,dice,bwt,fwt");
  EXPECT_EQ(rows[1].substr(0, 17), "atlas-replay,1,1,");
  EXPECT_EQ(rows[10].substr(0, 15), "sequential,1,1,");
  EXPECT_EQ(lines_of(slurp(dir / "summary.csv")).size(), 3u);

  // Every overlay is a well-formed 64x64 P5 image.
  std::size_t pgms = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "ov")) {
    if (!e.is_regular_file()) continue;
    ++pgms;
    const auto bytes = slurp(e.path());
    std::istringstream in(bytes);
    std::string magic;
    std::size_t w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    in.get();
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 64u);
    EXPECT_EQ(h, 64u);
    EXPECT_EQ(maxv, 255u);
    EXPECT_EQ(bytes.size(), static_cast<std::size_t>(in.tellg()) + w * h);
  }
  // 2 methods x 3 stages x 3 tasks x 2 validation cases.
  EXPECT_EQ(pgms, 36u);

  // Re-evaluating the saved checkpoints reproduces the report byte for byte.
  ASSERT_EQ(cli(dir.path(), "evaluate --runs run/sequential run/atlas-replay --corpus corpus --out again.csv"), 0);
  const auto again = lines_of(slurp(dir / "again.csv"));
  ASSERT_EQ(again.size(), rows.size());
  for (std::size_t i = 1; i <= 9; ++i) EXPECT_EQ(again[i], rows[i + 9]);
  ASSERT_EQ(cli(dir.path(), "evaluate --runs run --corpus corpus --out third.csv"), 0);
  EXPECT_EQ(slurp(dir / "third.csv"), report);
}

TEST(Cli, PipelineIsDeterministicUnderOneSeed) {
  fixtures::TempDir a("cli_det_a"), b("cli_det_b");
  for (const auto* d : {&a, &b}) {
    prepare(d->path());
    ASSERT_EQ(cli(d->path(), "train --method rwalk,atlas-replay --corpus corpus --atlas atlas.bin --epochs 1 --seed 9 "
                             "--out run"),
              0);
    ASSERT_EQ(cli(d->path(), "evaluate --runs run --corpus corpus --out report.csv"), 0);
  }
  EXPECT_EQ(slurp(a / "atlas.bin"), slurp(b / "atlas.bin"));
  EXPECT_EQ(slurp(a / "run/rwalk/stage_3/checkpoint.bin"), slurp(b / "run/rwalk/stage_3/checkpoint.bin"));
  EXPECT_EQ(slurp(a / "report.csv"), slurp(b / "report.csv"));
}

TEST(Cli, AblateLossEmitsOneRowPerWeight) {
  fixtures::TempDir dir("cli_ablate");
  prepare(dir.path());
  ASSERT_EQ(cli(dir.path(), "ablate-loss --ce-weights 0,1,2 --corpus corpus --atlas atlas.bin --order 1 --epochs 1 "
                            "--seed 2 --out ablation"),
            0)
      << slurp(dir / "cli.log");
  const auto rows = lines_of(slurp(dir / "ablation/ablation.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "ce_weight,dice_A,mean_dice");
  EXPECT_EQ(rows[1].substr(0, 2), "0,");
  EXPECT_EQ(rows[3].substr(0, 2), "2,");
}

TEST(Cli, SweepMarksExactlyOneBest) {
  fixtures::TempDir dir("cli_sweep");
  prepare(dir.path());
  ASSERT_EQ(cli(dir.path(), "sweep --method ewc --param ewc_lambda --values 0.4,2.2 --corpus corpus --order 1,2 "
                            "--epochs 1 --seed 2 --out sweep"),
            0)
      << slurp(dir / "cli.log");
  const auto rows = lines_of(slurp(dir / "sweep/sweep.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "param,value,final_mean_dice,mean_bwt,mean_fwt,score,best");
  const int best = (rows[1].back() == '1') + (rows[2].back() == '1');
  EXPECT_EQ(best, 1);
}

TEST(Cli, ProbeWritesPerDomainRows) {
  fixtures::TempDir dir("cli_probe");
  prepare(dir.path());
  ASSERT_EQ(cli(dir.path(), "probe-privacy --atlas atlas.bin --corpus corpus --trials 2 --attacker random --out probe.csv"), 0);
  const auto rows = lines_of(slurp(dir / "probe.csv"));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[4].substr(0, 6), "all,6,");
}

TEST(Cli, UsageErrorsExitTwoOtherErrorsExitOne) {
  fixtures::TempDir dir("cli_errors");
  EXPECT_EQ(cli(dir.path(), ""), 2);
  EXPECT_EQ(cli(dir.path(), "frobnicate"), 2);
  EXPECT_EQ(cli(dir.path(), "gen-data --seed 1 --out c --bogus"), 2);
  EXPECT_EQ(cli(dir.path(), "build-atlas --corpus missing --seed 1 --out a.bin"), 2);
  EXPECT_EQ(cli(dir.path(), "probe-privacy --atlas missing.bin --corpus . --out p.csv"), 2);
  EXPECT_EQ(cli(dir.path(), "gen-data --out c"), 2);
  ASSERT_EQ(cli(dir.path(), "gen-data --seed 1 --domains 1 --cases 9 --out c"), 0);
  EXPECT_EQ(cli(dir.path(), "train --method ilt --corpus c --seed 1 --out r"), 2);
  EXPECT_EQ(cli(dir.path(), "train --method atlas-replay --corpus c --seed 1 --out r"), 2);
  // A corrupt atlas is a format error, not a usage error.
  std::ofstream(dir / "bad.bin") << "not an atlas";
  EXPECT_EQ(cli(dir.path(), "probe-privacy --atlas bad.bin --corpus c --out p.csv"), 1);
  const auto log = lines_of(slurp(dir / "cli.log"));
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].substr(0, 7), "error: ");
  // Order naming a task the corpus lacks.
  EXPECT_EQ(cli(dir.path(), "train --method sequential --corpus c --order 1,2 --seed 1 --epochs 0 --out r"), 1);
  EXPECT_EQ(cli(dir.path(), "gen-data --help"), 0);
}
