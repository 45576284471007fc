#include "apma/checkpoint.hpp"
#include "apma/plot.hpp"
#include "apma/run.hpp"
#include "apma/workflow.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <opencv2/imgcodecs.hpp>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace apma;
using namespace apma::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args) {
  const auto log = fs::temp_directory_path() / "apma_cli_output.txt";
  const std::string cmd = std::string(APMA_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(log)};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

std::string manifest_value(const fs::path& dir, const std::string& key) {
  return parse_kv(read_text(dir / "manifest.txt")).at(key);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch_dir("cli");
    write_text(root_ / "tiny.cfg", tiny_run_config(1).to_text());
    const auto r = run("synth --config " + (root_ / "tiny.cfg").string() + " --out " + (root_ / "data").string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static std::string cfg() { return " --config " + (root_ / "tiny.cfg").string() + " "; }
  static std::string data() { return " --data " + (root_ / "data").string() + " "; }
  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, SynthWritesSplitsWithConfiguredCounts) {
  const auto c = tiny_run_config(1).synth;
  const std::pair<const char*, std::size_t> splits[] = {
      {"source", c.n_train_source}, {"target_train", c.n_train_target}, {"target_test", c.n_test_target}};
  for (const auto& [split, n] : splits) {
    const auto st = load_split(root_ / "data", split, true);
    EXPECT_EQ(st.depth(), n) << split;
    EXPECT_EQ(st.width(), c.canvas_size);
  }
  EXPECT_TRUE(fs::exists(root_ / "data" / "manifest.txt"));
}

TEST_F(Cli, SynthSameSeedSameDigests) {
  const auto a = root_ / "synth_a", b = root_ / "synth_b", c = root_ / "synth_c";
  ASSERT_EQ(run("synth" + cfg() + "--out " + a.string()).code, 0);
  ASSERT_EQ(run("synth" + cfg() + "--out " + b.string()).code, 0);
  ASSERT_EQ(run("synth" + cfg() + "--seed 999 --out " + c.string()).code, 0);
  for (const char* k : {"digest.source", "digest.target_train", "digest.target_test"}) {
    EXPECT_EQ(manifest_value(a, k), manifest_value(b, k));
    EXPECT_NE(manifest_value(a, k), manifest_value(c, k));
  }
}

TEST_F(Cli, ManifestIsAppendOnly) {
  const auto d = root_ / "synth_twice";
  ASSERT_EQ(run("synth" + cfg() + "--out " + d.string()).code, 0);
  ASSERT_EQ(run("synth" + cfg() + "--out " + d.string()).code, 0);
  const auto text = read_text(d / "manifest.txt");
  std::size_t records = 0;
  for (std::size_t p = 0; (p = text.find("# record", p)) != std::string::npos; ++p) ++records;
  EXPECT_EQ(records, 2u);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("synth").code, 1);
  const auto bad = run("synth --set train.bogus=1 --out " + (root_ / "x").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.output.find("train.bogus"), std::string::npos) << bad.output;
  const auto zero = run("synth" + cfg() + "--set synth.n_test_target=0 --out " + (root_ / "zero").string());
  EXPECT_EQ(zero.code, 1);
  EXPECT_NE(zero.output.find("n_test_target"), std::string::npos) << zero.output;
}

TEST_F(Cli, DataErrors) {
  EXPECT_EQ(run("pretrain" + cfg() + "--data /nonexistent/apma --out " + (root_ / "p").string()).code, 2);
  const auto bad = root_ / "bad_data";
  fs::create_directories(bad / "source" / "images");
  write_text(bad / "source" / "images" / "0000.png", "not a png");
  EXPECT_EQ(run("pretrain" + cfg() + "--data " + bad.string() + " --out " + (root_ / "p2").string()).code, 2);
}

TEST_F(Cli, NumericalFailureExitsWithThree) {
  const auto r = run("adapt" + cfg() + data() + "--set train.lr0=1e300 --out " + (root_ / "nan").string());
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(read_text(root_ / "nan" / "report.txt").find("failed"), std::string::npos);
}

TEST_F(Cli, PretrainAdaptResumeEval) {
  const auto pre = root_ / "pre", full = root_ / "full", split = root_ / "split";
  ASSERT_EQ(run("pretrain" + cfg() + data() + "--out " + pre.string()).code, 0);
  EXPECT_TRUE(fs::exists(pre / "ckpt_0.tar"));
  ASSERT_EQ(run("adapt" + cfg() + data() + "--out " + full.string()).code, 0);
  ASSERT_EQ(run("adapt" + cfg() + data() + "--stop-at 6 --out " + split.string()).code, 0);
  ASSERT_EQ(run("adapt" + cfg() + data() + "--from " + (split / "ckpt_6.tar").string() + " --out " + split.string()).code, 0);
  EXPECT_EQ(read_text(full / "history.csv"), read_text(split / "history.csv"));
  EXPECT_EQ(read_text(full / "ckpt_10.tar"), read_text(split / "ckpt_10.tar"));

  const auto e = run("eval" + cfg() + data() + "--checkpoint " + (full / "ckpt_10.tar").string());
  ASSERT_EQ(e.code, 0) << e.output;
  const auto rows = lines(read_text(full / "metrics.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  EXPECT_EQ(rows[1].rfind("full,ckpt_10.tar,target_test,0.5,", 0), 0u) << rows[1];
}

TEST_F(Cli, AblateProducesSixRowsDeterministically) {
  const auto a = root_ / "abl_a", b = root_ / "abl_b";
  const auto r = run("ablate" + cfg() + data() + "--out " + a.string());
  ASSERT_EQ(r.code, 0) << r.output;
  ASSERT_EQ(run("ablate" + cfg() + data() + "--out " + b.string()).code, 0);
  const auto table = read_text(a / "ablation.csv");
  EXPECT_EQ(table, read_text(b / "ablation.csv"));
  const auto rows = lines(table);
  ASSERT_EQ(rows.size(), 7u);
  const char* names[] = {"No adaptation", "EN", "DE_feat", "DE_pred", "EN+DE_feat", "EN+DE_feat+DE_pred"};
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(rows[i + 1].rfind(std::string(names[i]) + ",", 0), 0u) << rows[i + 1];
    EXPECT_NE(rows[i + 1].find(",ok"), std::string::npos) << rows[i + 1];
  }
  const auto en = parse_history_csv(read_text(a / "en" / "history.csv"));
  for (const auto& h : en) EXPECT_GT(h.loss.rec, 0.0);
  const auto report = parse_kv(read_text(a / "en" / "report.txt"));
  EXPECT_EQ(report.at("d_pred_updates"), "0");
  EXPECT_EQ(report.at("d_feat_updates"), "0");
}

TEST_F(Cli, PlotPanelLayout) {
  const auto a = root_ / "plot_a", b = root_ / "plot_b", out = root_ / "plots";
  for (const auto& d : {a, b}) {
    ASSERT_EQ(run("adapt" + cfg() + data() + "--out " + d.string()).code, 0);
    ASSERT_EQ(run("eval" + cfg() + data() + "--checkpoint " + (d / "ckpt_10.tar").string()).code, 0);
  }
  const auto r = run("plot" + cfg() + data() + "--runs " + a.string() + " " + b.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto test = load_split(root_ / "data", "target_test", true);
  EXPECT_TRUE(fs::exists(out / "loss_plot_a.png"));
  for (std::size_t i = 0; i < test.depth(); ++i) {
    const auto panel = cv::imread((out / ("panel_" + detail::section_name(i))).string(), cv::IMREAD_UNCHANGED);
    ASSERT_FALSE(panel.empty());
    const int W = static_cast<int>(test.width());
    EXPECT_EQ(panel.cols, 4 * W + 3 * kPanelGap);
    EXPECT_EQ(panel.rows, static_cast<int>(test.height()));
    const auto& gt = (*test.labels)[i];
    for (int y = 0; y < panel.rows; ++y)
      for (int x = 0; x < W; ++x) {
        ASSERT_EQ(panel.at<std::uint8_t>(y, W + kPanelGap + x), gt.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) * 255);
        ASSERT_EQ(panel.at<std::uint8_t>(y, x), quantize(test.sections[i].at(static_cast<std::size_t>(y), static_cast<std::size_t>(x))));
      }
  }
  EXPECT_EQ(lines(read_text(out / "panel_columns.txt")).at(0), "input,gt," + a.string() + "," + b.string());
}

TEST_F(Cli, PlotRequiresHistoryAndMetrics) {
  const auto d = root_ / "no_metrics";
  ASSERT_EQ(run("adapt" + cfg() + data() + "--out " + d.string()).code, 0);
  const auto r = run("plot" + cfg() + data() + "--runs " + d.string() + " --out " + (root_ / "plots2").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("metrics.csv"), std::string::npos) << r.output;
}
