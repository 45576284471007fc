#include "apma/datapipe.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <set>

using namespace apma;
using namespace apma::testing;
namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& p, int h, int w, std::uint8_t v) {
  fs::create_directories(p.parent_path());
  ASSERT_TRUE(cv::imwrite(p.string(), cv::Mat(h, w, CV_8U, cv::Scalar(v))));
}

ImageStack random_stack(std::size_t d, std::size_t h, std::size_t w, Rng& rng) {
  ImageStack st;
  st.labels.emplace();
  for (std::size_t i = 0; i < d; ++i) {
    Image im(h, w);
    Mask m(h, w);
    for (std::size_t k = 0; k < h * w; ++k) {
      im.px[k] = static_cast<float>(rng.uniform_int(0, 255)) / 255.f;
      m.px[k] = rng.uniform() < 0.3 ? 1 : 0;
    }
    st.sections.push_back(im);
    st.labels->push_back(m);
  }
  return st;
}

// Independent transform oracle: k counter-clockwise quarter turns, then a horizontal mirror for d >= 4.
cv::Mat oracle_transform(const cv::Mat& src, int d) {
  cv::Mat out = src.clone();
  for (int k = 0; k < d % 4; ++k) {
    cv::Mat r;
    cv::rotate(out, r, cv::ROTATE_90_COUNTERCLOCKWISE);
    out = r;
  }
  if (d >= 4) {
    cv::Mat f;
    cv::flip(out, f, 1);
    out = f;
  }
  return out;
}

}  // namespace

TEST(LoadStack, MaxValueScalesToOne) {
  const auto dir = scratch_dir("load_max");
  for (int i = 0; i < 3; ++i) write_png(dir / detail::section_name(static_cast<std::size_t>(i)), 64, 64, 255);
  const auto st = load_stack(dir);
  EXPECT_EQ(st.axis_meta(), (AxisMeta{3, 64, 64}));
  for (const auto& s : st.sections)
    for (float v : s.px) EXPECT_EQ(v, 1.f);
  EXPECT_FALSE(st.has_labels());
}

TEST(LoadStack, FullScaleVolumeAxisMeta) {
  const auto dir = scratch_dir("load_full");
  for (std::size_t i = 0; i < 165; ++i) write_png(dir / detail::section_name(i), 1024, 768, 0);
  EXPECT_EQ(load_stack(dir).axis_meta(), (AxisMeta{165, 1024, 768}));
  fs::remove_all(dir);
}

TEST(LoadStack, DimensionMismatchNamesIndex) {
  const auto dir = scratch_dir("load_mismatch");
  for (std::size_t i = 0; i < 4; ++i) write_png(dir / detail::section_name(i), 64, i == 2 ? 63 : 64, 10);
  try {
    load_stack(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos) << e.what();
  }
}

TEST(LoadStack, MissingPathAndLabelCount) {
  EXPECT_THROW(load_stack("/nonexistent/apma"), DataError);
  const auto dir = scratch_dir("load_labels");
  for (std::size_t i = 0; i < 3; ++i) write_png(dir / "img" / detail::section_name(i), 8, 8, 0);
  for (std::size_t i = 0; i < 2; ++i) write_png(dir / "lab" / detail::section_name(i), 8, 8, 255);
  EXPECT_THROW(load_stack(dir / "img", dir / "lab"), DataError);
}

TEST(LoadStack, LabelsBinarizedAt127) {
  const auto dir = scratch_dir("load_bin");
  write_png(dir / "img" / "0000.png", 4, 4, 0);
  write_png(dir / "img" / "0001.png", 4, 4, 0);
  write_png(dir / "lab" / "0000.png", 4, 4, 127);
  write_png(dir / "lab" / "0001.png", 4, 4, 128);
  const auto st = load_stack(dir / "img", dir / "lab");
  EXPECT_EQ((*st.labels)[0].count(), 0u);
  EXPECT_EQ((*st.labels)[1].count(), 16u);
}

TEST(LoadStack, MultiPageTiff) {
  const auto dir = scratch_dir("load_tiff");
  std::vector<cv::Mat> pages = {cv::Mat(8, 6, CV_8U, cv::Scalar(0)), cv::Mat(8, 6, CV_8U, cv::Scalar(51))};
  ASSERT_TRUE(cv::imwritemulti((dir / "stack.tif").string(), pages));
  const auto st = load_stack(dir / "stack.tif");
  EXPECT_EQ(st.axis_meta(), (AxisMeta{2, 8, 6}));
  EXPECT_EQ(st.sections[1].px[0], 51.f / 255.f);
}

TEST(SaveStack, RoundTripIsExact) {
  Rng rng(1);
  const auto st = random_stack(3, 9, 13, rng);
  const auto dir = scratch_dir("roundtrip");
  save_stack(st, dir / "img", dir / "lab");
  const auto back = load_stack(dir / "img", dir / "lab");
  EXPECT_EQ(back.sections, st.sections);
  EXPECT_EQ(*back.labels, *st.labels);
  EXPECT_EQ(back.digest(), st.digest());
}

TEST(SplitTargetX, TwoThirdsFraction) {
  Rng rng(2);
  const auto st = random_stack(2, 4, 1024, rng);
  const auto [train, test] = split_target_x(st, 0.67);
  EXPECT_EQ(train.width(), 686u);
  EXPECT_EQ(test.width(), 338u);
  // column-count oracle: every column lands in exactly one part, in order
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 1024; ++x) {
        const float v = x < 686 ? train.sections[s].at(y, x) : test.sections[s].at(y, x - 686);
        const auto m = x < 686 ? (*train.labels)[s].at(y, x) : (*test.labels)[s].at(y, x - 686);
        ASSERT_EQ(v, st.sections[s].at(y, x));
        ASSERT_EQ(m, (*st.labels)[s].at(y, x));
      }
}

TEST(SplitTargetX, HalvesAndErrors) {
  Rng rng(3);
  const auto st = random_stack(2, 5, 100, rng);
  const auto [a, b] = split_target_x(st, 0.5);
  EXPECT_EQ(a.width(), 50u);
  EXPECT_EQ(b.width(), 50u);
  EXPECT_EQ(a.width() + b.width(), st.width());
  EXPECT_EQ(a.depth(), 2u);
  EXPECT_THROW(split_target_x(st, 1.0), std::invalid_argument);
  EXPECT_THROW(split_target_x(st, 0.0), std::invalid_argument);
  EXPECT_THROW(split_target_x(st, 0.001), DataError);
}

TEST(Normalize, Examples) {
  Image a(1, 3);
  a.px = {10, 20, 30};
  EXPECT_EQ(normalize(a).px, (std::vector<float>{0.f, 0.5f, 1.f}));
  Image c(2, 2, 7.f);
  EXPECT_EQ(normalize(c).px, std::vector<float>(4, 0.f));
  Image r(1, 5);
  r.px = {0.f, 0.25f, 0.5f, 0.75f, 1.f};
  EXPECT_EQ(normalize(r).px, r.px);
  Image bad(1, 2);
  bad.px = {0.f, NAN};
  EXPECT_THROW(normalize(bad), DataError);
}

TEST(ImageStack, ValidateNamesOffender) {
  Rng rng(4);
  auto st = random_stack(3, 4, 4, rng);
  EXPECT_NO_THROW(st.validate());
  (*st.labels)[1].px[0] = 2;
  EXPECT_THROW(st.validate(), DataError);
  (*st.labels)[1].px[0] = 1;
  st.sections[2].px[3] = 1.5f;
  EXPECT_THROW(st.validate(), DataError);
}

TEST(SampleBatch, ShapesAndDeterminism) {
  Rng data(5);
  const auto src = random_stack(3, 80, 90, data), tgt = random_stack(2, 70, 100, data);
  const SampleOptions opt{64, 4, true};
  Rng a(42), b(42);
  const auto x = sample_batch(src, tgt.strip_labels(), opt, a);
  const auto y = sample_batch(src, tgt.strip_labels(), opt, b);
  for (const auto* t : {&x.x_s, &x.y_s, &x.x_t}) EXPECT_EQ(t->shape(), (Shape{4, 1, 64, 64}));
  EXPECT_EQ(x.x_s.vec(), y.x_s.vec());
  EXPECT_EQ(x.y_s.vec(), y.y_s.vec());
  EXPECT_EQ(x.x_t.vec(), y.x_t.vec());
  EXPECT_EQ(a.state(), b.state());
  for (std::size_t i = 0; i < x.y_s.size(); ++i) ASSERT_TRUE(x.y_s[i] == 0.f || x.y_s[i] == 1.f);
}

TEST(SampleBatch, Errors) {
  Rng data(6);
  const auto src = random_stack(1, 32, 32, data);
  Rng rng(1);
  EXPECT_THROW(sample_batch(src, src.strip_labels(), {64, 2, false}, rng), DataError);
  ImageStack unl = src;
  unl.labels.reset();
  EXPECT_THROW(sample_batch(unl, src.strip_labels(), {16, 2, false}, rng), DataError);
}

TEST(SampleBatch, AugmentedCropsMatchTransformOracle) {
  Rng data(7);
  const auto src = random_stack(2, 40, 40, data), tgt = random_stack(2, 40, 40, data);
  const std::size_t P = 16;
  const SampleOptions opt{P, 24, true};
  Rng rng(9), replay(9);
  const auto b = sample_batch(src, tgt.strip_labels(), opt, rng);
  std::set<int> seen;
  for (std::size_t i = 0; i < opt.n; ++i) {
    const auto c = detail::draw_crop(replay, src.depth(), 40, 40, P, true);
    seen.insert(c.transform);
    cv::Mat img(40, 40, CV_32F), lab(40, 40, CV_8U);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        img.at<float>(y, x) = src.sections[c.section].at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        lab.at<std::uint8_t>(y, x) = (*src.labels)[c.section].at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      }
    const cv::Rect roi(static_cast<int>(c.x), static_cast<int>(c.y), static_cast<int>(P), static_cast<int>(P));
    const cv::Mat ei = oracle_transform(img(roi), c.transform), el = oracle_transform(lab(roi), c.transform);
    for (int y = 0; y < static_cast<int>(P); ++y)
      for (int x = 0; x < static_cast<int>(P); ++x) {
        ASSERT_EQ(b.x_s.at(i, 0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), ei.at<float>(y, x));
        ASSERT_EQ(b.y_s.at(i, 0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), el.at<std::uint8_t>(y, x));
      }
  }
  EXPECT_GE(seen.size(), 4u);
}

TEST(SampleBatch, NoAugmentationCopiesCropVerbatim) {
  Rng data(8);
  const auto src = random_stack(1, 20, 20, data);
  Rng rng(3), replay(3);
  const auto b = sample_source(src, {8, 1, false}, rng);
  const auto c = detail::draw_crop(replay, 1, 20, 20, 8, false);
  EXPECT_EQ(c.transform, 0);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(b.x_s.at(0, 0, y, x), src.sections[0].at(c.y + y, c.x + x));
}
