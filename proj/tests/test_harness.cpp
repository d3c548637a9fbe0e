#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fanfreq/harness.hpp"
#include "fanfreq/pgm.hpp"

using namespace fanfreq;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fanfreq_h_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct CliResult {
  int code = -1;
  std::string output;
};

/// Runs the CLI with stdout and stderr captured together.
CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(FANFREQ_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seg = SegConfig{2, 4};
  cfg.fan_arch = FanArch{4};
  return cfg;
}

const MultiSiteDataset& tiny_dataset() {
  static const MultiSiteDataset ds = generate_dataset(default_styles(), 5, 42, 32);
  return ds;
}

}  // namespace

TEST(Config, ParsesKeyValueLinesWithComments) {
  std::istringstream in("# header\nlr = 0.01\n  epochs=3  # trailing\n\nfreeze_fan = on\n");
  const ConfigMap m = parse_config(in);
  EXPECT_EQ(m.size(), 3u);
  TrainConfig cfg;
  apply_config(m, cfg);
  EXPECT_EQ(cfg.lr, 0.01);
  EXPECT_EQ(cfg.epochs, 3u);
  EXPECT_TRUE(cfg.freeze_fan);
}

TEST(Config, LaterLinesOverrideEarlierOnes) {
  std::istringstream in("alpha = 0.05\nalpha = 0.15\n");
  TrainConfig cfg;
  apply_config(parse_config(in), cfg);
  EXPECT_EQ(cfg.alpha, 0.15);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  TrainConfig cfg;
  EXPECT_THROW(apply_config({{"learning_rate", "1"}}, cfg), UsageError);
  EXPECT_THROW(apply_config({{"lr", "fast"}}, cfg), UsageError);
  EXPECT_THROW(apply_config({{"lr", "0.1x"}}, cfg), UsageError);
  EXPECT_THROW(apply_config({{"freeze_fan", "maybe"}}, cfg), UsageError);
  std::istringstream no_eq("lr 0.1\n");
  EXPECT_THROW(parse_config(no_eq), UsageError);
  std::istringstream empty_value("lr =\n");
  EXPECT_THROW(parse_config(empty_value), UsageError);
}

TEST(Config, MissingFileIsIoError) { EXPECT_THROW(load_config("/nonexistent/cfg.txt"), IoError); }

TEST(Modes, FlagsMapToModes) {
  EXPECT_EQ(mode_from_flags(false, false), Mode::kBaseline);
  EXPECT_EQ(mode_from_flags(true, false), Mode::kFan);
  EXPECT_EQ(mode_from_flags(true, true), Mode::kFanDc);
  EXPECT_THROW(mode_from_flags(false, true), UsageError);
  const TrainConfig fan = configure_mode(TrainConfig{}, Mode::kFan);
  EXPECT_TRUE(fan.use_fan);
  EXPECT_FALSE(fan.use_dc);
  EXPECT_EQ(fan.lambda, 0.0);
}

TEST(Gradcheck, DefaultSuitePasses) {
  const auto results = run_gradcheck(default_grad_cases());
  EXPECT_GE(results.size(), 20u);
  for (const auto& r : results) EXPECT_TRUE(r.passed()) << r.name << " " << r.max_rel_error;
}

TEST(Gradcheck, DetectsCorruptedConvolutionBackward) {
  // Forward is correct but the weight gradient is scaled by 1.1.
  const ConvFn broken = [](Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Var y = ops::conv2d(x, w, b, stride, pad);
    const Var w_scaled = ops::scale(w, 1.1);
    const Var skew = ops::conv2d(x, ops::sub(w_scaled, w), ops::scale(b, 0.0), stride, pad);
    const Tensor frozen = skew.tensor();
    return ops::sub(ops::add(y, skew), y.tape->constant(frozen));
  };
  bool caught = false;
  for (const auto& r : run_gradcheck(default_grad_cases(broken), {1})) {
    if (r.name.rfind("conv2d", 0) == 0) caught = caught || !r.passed();
  }
  EXPECT_TRUE(caught);
}

TEST(Parallel, RunsEveryIndexOnceAndPropagatesErrors) {
  std::vector<int> hits(50, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw NumericalError("boom");
               }),
               NumericalError);
}

TEST(Parallel, ThreadCountHonoursEnvironment) {
  setenv("FANFREQ_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3u);
  setenv("FANFREQ_THREADS", "zero", 1);
  EXPECT_GE(worker_threads(), 1u);
  unsetenv("FANFREQ_THREADS");
}

TEST(Loso, WritesRunArtifacts) {
  const auto dir = scratch_dir("loso");
  const LosoResult r = run_loso(tiny_dataset(), 2, Mode::kFanDc, tiny_config(), dir);
  EXPECT_EQ(r.held_out, 2);
  EXPECT_EQ(r.report.rows.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "curves.csv"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint" / "manifest.txt"));
  std::ifstream metrics(dir / "metrics.csv");
  std::string header, row;
  std::getline(metrics, header);
  std::getline(metrics, row);
  EXPECT_EQ(header, kMetricsHeader);
  EXPECT_EQ(row.rfind("fan+dc,2,0.1,", 0), 0u) << row;
  fs::remove_all(dir);
}

TEST(Loso, RotationCoversEverySiteAndMode) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  const auto runs = run_rotation(tiny_dataset(), {Mode::kBaseline, Mode::kFan}, cfg, 2);
  ASSERT_EQ(runs.size(), 8u);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    EXPECT_EQ(runs[i].held_out, static_cast<int>(i / 2) + 1);
    EXPECT_EQ(runs[i].mode, i % 2 == 0 ? Mode::kBaseline : Mode::kFan);
  }
  // With no training, identity FAN and the baseline see the same input.
  const auto means = mean_dice_by_mode(runs);
  EXPECT_NEAR(means.at(Mode::kBaseline), means.at(Mode::kFan), 1e-6);
}

TEST(AblateAlpha, SingleAlphaAndFailuresAreRecorded) {
  const auto rows = ablate_alpha(tiny_dataset(), 4, {0.1, 0.7}, tiny_config(), {}, 1);
  ASSERT_EQ(rows.size(), 2u);
  ASSERT_TRUE(rows[0].result.has_value());
  EXPECT_EQ(rows[0].result->alpha, 0.1);
  EXPECT_FALSE(rows[1].result.has_value());
  EXPECT_FALSE(rows[1].error.empty());
  std::ostringstream csv;
  write_alpha_csv(csv, rows);
  EXPECT_NE(csv.str().find("0.7,nan,nan,nan,failed"), std::string::npos) << csv.str();
  std::ostringstream md;
  write_alpha_markdown(md, rows);
  EXPECT_NE(md.str().find("| 0.1 |"), std::string::npos);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("no-such-command").code, 1);
  EXPECT_EQ(run_cli("loso --data x").code, 1);
  const auto r = run_cli("style-swap --target a.pgm --source b.pgm --out c.pgm --alpha 0.6");
  EXPECT_EQ(r.code, 1) << r.output;
}

TEST(Cli, HelpExitsWithZero) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("gen-data"), std::string::npos);
}

TEST(Cli, MissingInputsExitWithTwo) {
  const auto r = run_cli("style-swap --target /nonexistent/a.pgm --source /nonexistent/b.pgm --out /tmp/x.pgm");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("/nonexistent/a.pgm"), std::string::npos);
  EXPECT_EQ(run_cli("loso --data /nonexistent/ds --hold-out 1 --out /tmp/run").code, 2);
}

TEST(Cli, GenDataWritesManifestAndStyleSwapRuns) {
  const auto dir = scratch_dir("cli");
  const auto gen = run_cli("gen-data --sites 3 --n 4 --size 32 --out " + (dir / "ds").string());
  ASSERT_EQ(gen.code, 0) << gen.output;
  std::ifstream manifest(dir / "ds" / "manifest.txt");
  std::size_t lines = 0;
  for (std::string line; std::getline(manifest, line);) lines += line.empty() ? 0 : 1;
  EXPECT_EQ(lines, 12u);

  const auto swap = run_cli("style-swap --target " + (dir / "ds/site_1/img_0.pgm").string() + " --source " +
                            (dir / "ds/site_3/img_0.pgm").string() + " --out " + (dir / "out.pgm").string());
  ASSERT_EQ(swap.code, 0) << swap.output;
  EXPECT_TRUE(fs::exists(dir / "out_panel.pgm"));
  const io::PgmImage panel = io::load_pgm(dir / "out_panel.pgm");
  EXPECT_EQ(panel.pixels.width(), 96u);
  EXPECT_EQ(panel.pixels.height(), 32u);
  fs::remove_all(dir);
}

TEST(Cli, LosoRunsFromConfigFileWithFlagOverride) {
  const auto dir = scratch_dir("cli_loso");
  write_dataset(dir / "ds", tiny_dataset());
  std::ofstream(dir / "run.cfg") << "epochs = 5\nlr = 0.05\nbatch_size = 4\ndepth = 2\nbase_channels = 4\n";
  const auto r = run_cli("loso --data " + (dir / "ds").string() + " --hold-out 3 --fan on --dc off --quiet --config " +
                         (dir / "run.cfg").string() + " --epochs 1 --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("fan,3,0.1,"), std::string::npos) << r.output;
  std::ifstream curves(dir / "run" / "curves.csv");
  std::size_t rows = 0;
  for (std::string line; std::getline(curves, line);) ++rows;
  EXPECT_EQ(rows, 3u);  // header, epoch 0, epoch 1
  EXPECT_EQ(run_cli("loso --data " + (dir / "ds").string() + " --hold-out 3 --fan off --dc on --out " +
                    (dir / "bad").string())
                .code,
            1);
  fs::remove_all(dir);
}

TEST(Cli, GradcheckSucceeds) {
  const auto r = run_cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}
