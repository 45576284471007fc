#include "apma/config.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace apma;
using namespace apma::testing;

TEST(Config, DefaultsMatchDocumentedValues) {
  const RunConfig c;
  EXPECT_EQ(std::stod(c.get("train.lr0")), 0.0002);
  EXPECT_EQ(c.get("train.poly_power"), "0.9");
  EXPECT_EQ(std::stod(c.get("train.lambda_rec")), 0.001);
  EXPECT_EQ(std::stod(c.get("train.lambda_feat")), 0.001);
  EXPECT_EQ(std::stod(c.get("train.lambda_pred")), 0.001);
  EXPECT_EQ(c.get("train.adam_beta1"), "0.9");
  EXPECT_EQ(c.get("train.adam_beta2"), "0.999");
  EXPECT_EQ(c.get("arch.base_width"), "16");
  EXPECT_EQ(c.get("arch.depth"), "3");
  EXPECT_EQ(c.get("eval.threshold"), "0.5");
  EXPECT_EQ(c.train.total_iters, 2000u);
  EXPECT_EQ(c.train.pretrain_iters, 500u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTripIsExact) {
  RunConfig a;
  a.train.lr0 = 0.1 + 0.2;
  a.train.seed = 0xFFFFFFFFFFFFFFFFULL;
  a.synth.target_shift.invert = true;
  a.eval.overlap = 7;
  RunConfig b;
  b.apply_text(a.to_text());
  EXPECT_EQ(b.to_text(), a.to_text());
  EXPECT_EQ(b.train.lr0, a.train.lr0);
  EXPECT_EQ(b.train.seed, a.train.seed);
  EXPECT_EQ(b.digest(), a.digest());
  b.train.lr0 = 3e-4;
  EXPECT_NE(b.digest(), a.digest());
}

TEST(Config, ParsesCommentsBlankLinesAndBooleans) {
  RunConfig c;
  c.apply_text("# comment\n\n  train.en = false \ntrain.de_pred=0\ntrain.augment = true\nsynth.seed = 42\n");
  EXPECT_FALSE(c.train.ablation.en);
  EXPECT_FALSE(c.train.ablation.de_pred);
  EXPECT_TRUE(c.train.augment);
  EXPECT_EQ(c.synth.seed, 42u);
}

TEST(Config, ErrorsNameKeyAndLine) {
  RunConfig c;
  try {
    c.apply_text("train.lr0 = 1e-3\ntrain.bogus = 1\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("run.cfg:2"), std::string::npos) << m;
    EXPECT_NE(m.find("train.bogus"), std::string::npos) << m;
  }
  EXPECT_THROW(c.apply_text("train.total_iters = -3\n"), ConfigError);
  EXPECT_THROW(c.apply_text("train.total_iters = 12abc\n"), ConfigError);
  EXPECT_THROW(c.apply_text("train.en = maybe\n"), ConfigError);
  EXPECT_THROW(c.apply_text("no equals sign\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_file("/nonexistent/apma.cfg"), ConfigError);
}

TEST(Config, ValidateCrossFieldConstraints) {
  RunConfig c;
  c.train.patch = 60;
  EXPECT_THROW(c.validate(), ConfigError);
  c.train.patch = 128;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.synth.n_test_target = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, FromFile) {
  const auto dir = scratch_dir("config_file");
  std::ofstream(dir / "a.cfg") << "arch.depth = 2\ntrain.patch = 32\n";
  const auto c = RunConfig::from_file(dir / "a.cfg");
  EXPECT_EQ(c.arch.depth, 2u);
  EXPECT_EQ(c.train.patch, 32u);
}

TEST(Config, FormatDoubleRoundTrips) {
  for (double v : {0.0, 1.0, -2.5, 1e-300, 0.1 + 0.2, 2e-4 * 0.5, 123456789.123456789})
    EXPECT_EQ(std::stod(format_double(v)), v) << format_double(v);
}

TEST(Config, ParseKv) {
  const auto kv = parse_kv("# x\na = 1\n b=two words \n");
  EXPECT_EQ(kv.at("a"), "1");
  EXPECT_EQ(kv.at("b"), "two words");
}
