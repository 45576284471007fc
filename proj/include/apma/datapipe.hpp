#pragma once

// Image stacks: loading, normalization, splitting, minibatch sampling, and a
// synthetic source/target generator with a purely visual domain gap.

#include "apma/random.hpp"
#include "apma/tensor.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One grayscale section, values in [0,1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> px;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), px(h * w, fill) {}
  float& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// One binary label section, values in {0,1}.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), px(h * w, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(px.begin(), px.end(), std::uint8_t{1})); }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct AxisMeta {
  std::size_t depth = 0, height = 0, width = 0;
  friend bool operator==(const AxisMeta&, const AxisMeta&) = default;
};

class UnlabeledStack;

/// Ordered sections with optional per-section labels.
struct ImageStack {
  std::vector<Image> sections;
  std::optional<std::vector<Mask>> labels;

  std::size_t depth() const { return sections.size(); }
  std::size_t height() const { return sections.empty() ? 0 : sections.front().height; }
  std::size_t width() const { return sections.empty() ? 0 : sections.front().width; }
  AxisMeta axis_meta() const { return {depth(), height(), width()}; }
  bool has_labels() const { return labels.has_value(); }

  /// Throws DataError naming the first offending section.
  void validate() const {
    for (std::size_t i = 0; i < sections.size(); ++i) {
      const auto& s = sections[i];
      if (s.height != height() || s.width != width())
        throw DataError("section " + std::to_string(i) + " is " + std::to_string(s.height) + "x" +
                        std::to_string(s.width) + ", expected " + std::to_string(height()) + "x" +
                        std::to_string(width()));
      for (float v : s.px)
        if (!(v >= 0.f && v <= 1.f)) throw DataError("section " + std::to_string(i) + " has a value outside [0,1]");
    }
    if (!labels) return;
    if (labels->size() != sections.size())
      throw DataError("label count " + std::to_string(labels->size()) + " does not match section count " +
                      std::to_string(sections.size()));
    for (std::size_t i = 0; i < labels->size(); ++i) {
      const auto& m = (*labels)[i];
      if (m.height != height() || m.width != width())
        throw DataError("label " + std::to_string(i) + " dimensions differ from its section");
      for (auto v : m.px)
        if (v > 1) throw DataError("label " + std::to_string(i) + " is not binary");
    }
  }

  UnlabeledStack strip_labels() const;

  /// Digest over dimensions, gray values, and labels.
  std::uint64_t digest() const {
    Fnv1a h;
    const std::array<std::uint64_t, 3> dims{depth(), height(), width()};
    h.update(dims.data(), sizeof(dims));
    for (const auto& s : sections) h.update(s.px.data(), s.px.size() * sizeof(float));
    if (labels)
      for (const auto& m : *labels) h.update(m.px.data(), m.px.size());
    return h.value();
  }
};

/// A label-free view of a stack. Training code only ever receives target data in this form.
class UnlabeledStack {
 public:
  UnlabeledStack() = default;
  explicit UnlabeledStack(std::vector<Image> sections) : sections_(std::move(sections)) {}

  const std::vector<Image>& sections() const { return sections_; }
  std::size_t depth() const { return sections_.size(); }
  std::size_t height() const { return sections_.empty() ? 0 : sections_.front().height; }
  std::size_t width() const { return sections_.empty() ? 0 : sections_.front().width; }

 private:
  std::vector<Image> sections_;
};

inline UnlabeledStack ImageStack::strip_labels() const { return UnlabeledStack(sections); }

// ---------------------------------------------------------------------------
// Normalization, splitting.

/// Per-section min-max scaling to [0,1]; constant sections become all zeros.
inline Image normalize(const Image& section) {
  Image out(section.height, section.width);
  if (section.px.empty()) return out;
  for (std::size_t i = 0; i < section.px.size(); ++i)
    if (!std::isfinite(section.px[i])) throw DataError("normalize: non-finite value at pixel " + std::to_string(i));
  const auto [lo, hi] = std::minmax_element(section.px.begin(), section.px.end());
  const double mn = *lo, range = static_cast<double>(*hi) - mn;
  if (range == 0) return out;
  for (std::size_t i = 0; i < section.px.size(); ++i)
    out.px[i] = static_cast<float>((section.px[i] - mn) / range);
  return out;
}

/// Cuts every section at column floor(train_fraction * width): left part for training, right part for testing.
inline std::pair<ImageStack, ImageStack> split_target_x(const ImageStack& stack, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("train_fraction must lie in (0,1), got " + std::to_string(train_fraction));
  const std::size_t w = stack.width(), h = stack.height();
  if (w < 2) throw DataError("split_target_x: stack width must be >= 2");
  const auto b = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(w)));
  if (b == 0 || b >= w) throw DataError("split_target_x: fraction leaves an empty part");
  ImageStack train, test;
  auto cut = [&](const auto& src, auto& left, auto& right) {
    using Px = std::decay_t<decltype(src)>;
    left = Px(h, b);
    right = Px(h, w - b);
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(src.px.begin() + static_cast<long>(y * w), b, left.px.begin() + static_cast<long>(y * b));
      std::copy_n(src.px.begin() + static_cast<long>(y * w + b), w - b,
                  right.px.begin() + static_cast<long>(y * (w - b)));
    }
  };
  for (const auto& s : stack.sections) {
    cut(s, train.sections.emplace_back(), test.sections.emplace_back());
  }
  if (stack.labels) {
    train.labels.emplace();
    test.labels.emplace();
    for (const auto& m : *stack.labels) cut(m, train.labels->emplace_back(), test.labels->emplace_back());
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Disk I/O: directories of zero-padded 8-bit PNGs or a multi-page TIFF.

namespace detail {

inline bool is_tiff(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".tif" || ext == ".tiff";
}

inline std::vector<cv::Mat> read_pages(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw DataError("path does not exist: " + path.string());
  std::vector<cv::Mat> pages;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (std::size_t i = 0; i < files.size(); ++i) {
      cv::Mat m = cv::imread(files[i].string(), cv::IMREAD_GRAYSCALE);
      if (m.empty()) throw DataError("section " + std::to_string(i) + ": cannot read " + files[i].string());
      pages.push_back(m);
    }
  } else if (is_tiff(path)) {
    if (!cv::imreadmulti(path.string(), pages, cv::IMREAD_GRAYSCALE))
      throw DataError("cannot read multi-page TIFF " + path.string());
  } else {
    throw DataError("expected a PNG directory or a TIFF file: " + path.string());
  }
  if (pages.empty()) throw DataError("no sections found in " + path.string());
  for (std::size_t i = 0; i < pages.size(); ++i)
    if (pages[i].depth() != CV_8U) throw DataError("section " + std::to_string(i) + " is not 8-bit");
  return pages;
}

inline void check_dims(const std::vector<cv::Mat>& pages, const char* what) {
  for (std::size_t i = 1; i < pages.size(); ++i)
    if (pages[i].rows != pages[0].rows || pages[i].cols != pages[0].cols)
      throw DataError(std::string(what) + " " + std::to_string(i) + " is " + std::to_string(pages[i].rows) + "x" +
                      std::to_string(pages[i].cols) + ", expected " + std::to_string(pages[0].rows) + "x" +
                      std::to_string(pages[0].cols));
}

inline std::string section_name(std::size_t i) {
  std::string s = std::to_string(i);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s + ".png";
}

}  // namespace detail

/// Loads sections (scaled by 1/255) and optional labels (binarized at > 127).
inline ImageStack load_stack(const std::filesystem::path& path,
                             const std::optional<std::filesystem::path>& label_path = std::nullopt) {
  const auto pages = detail::read_pages(path);
  detail::check_dims(pages, "section");
  ImageStack st;
  for (const auto& m : pages) {
    Image img(static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols));
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x)
        img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(m.at<std::uint8_t>(y, x)) / 255.f;
    st.sections.push_back(std::move(img));
  }
  if (label_path) {
    const auto lp = detail::read_pages(*label_path);
    if (lp.size() != pages.size())
      throw DataError("label count " + std::to_string(lp.size()) + " does not match section count " +
                      std::to_string(pages.size()) + " (first unmatched index " +
                      std::to_string(std::min(lp.size(), pages.size())) + ")");
    st.labels.emplace();
    for (std::size_t i = 0; i < lp.size(); ++i) {
      if (lp[i].rows != pages[i].rows || lp[i].cols != pages[i].cols)
        throw DataError("label " + std::to_string(i) + " dimensions differ from its section");
      Mask mk(static_cast<std::size_t>(lp[i].rows), static_cast<std::size_t>(lp[i].cols));
      for (int y = 0; y < lp[i].rows; ++y)
        for (int x = 0; x < lp[i].cols; ++x)
          mk.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = lp[i].at<std::uint8_t>(y, x) > 127 ? 1 : 0;
      st.labels->push_back(std::move(mk));
    }
  }
  return st;
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

/// Writes `0000.png`, `0001.png`, ... into `dir` (and binary 0/255 labels into `label_dir`).
inline void save_stack(const ImageStack& stack, const std::filesystem::path& dir,
                       const std::optional<std::filesystem::path>& label_dir = std::nullopt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t i = 0; i < stack.sections.size(); ++i) {
    const auto& s = stack.sections[i];
    cv::Mat m(static_cast<int>(s.height), static_cast<int>(s.width), CV_8U);
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) m.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x)) = quantize(s.at(y, x));
    if (!cv::imwrite((dir / detail::section_name(i)).string(), m))
      throw DataError("cannot write " + (dir / detail::section_name(i)).string());
  }
  if (label_dir && stack.labels) {
    fs::create_directories(*label_dir);
    for (std::size_t i = 0; i < stack.labels->size(); ++i) {
      const auto& mk = (*stack.labels)[i];
      cv::Mat m(static_cast<int>(mk.height), static_cast<int>(mk.width), CV_8U);
      for (std::size_t y = 0; y < mk.height; ++y)
        for (std::size_t x = 0; x < mk.width; ++x)
          m.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x)) = mk.at(y, x) ? 255 : 0;
      if (!cv::imwrite((*label_dir / detail::section_name(i)).string(), m))
        throw DataError("cannot write label " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Minibatch sampling.

template <typename T>
struct TrainBatch {
  Tensor<T> x_s;  // N x 1 x P x P
  Tensor<T> y_s;  // N x 1 x P x P, binary
  Tensor<T> x_t;  // N x 1 x P x P
};

/// Applies dihedral transform `d` (0..7: d%4 quarter turns counter-clockwise, mirrored when d >= 4)
/// to a square side x side patch.
template <typename In, typename Out>
void dihedral(const In* src, std::size_t side, int d, Out* dst) {
  const std::size_t m = side - 1;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      std::size_t sy = y, sx = d >= 4 ? m - x : x;
      for (int r = 0; r < d % 4; ++r) {
        const std::size_t ny = sx, nx = m - sy;
        sy = ny;
        sx = nx;
      }
      dst[y * side + x] = static_cast<Out>(src[sy * side + sx]);
    }
}

struct SampleOptions {
  std::size_t patch = 64;
  std::size_t n = 4;
  bool augment = false;
};

namespace detail {

struct CropSpec {
  std::size_t section, y, x;
  int transform;
};

inline CropSpec draw_crop(Rng& rng, std::size_t depth, std::size_t h, std::size_t w, std::size_t patch, bool augment) {
  CropSpec c{};
  c.section = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(depth) - 1));
  c.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - patch)));
  c.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - patch)));
  c.transform = augment ? static_cast<int>(rng.uniform_int(0, 7)) : 0;
  return c;
}

template <typename Px, typename T>
void write_crop(const Px& src, const CropSpec& c, std::size_t patch, T* dst) {
  std::vector<T> tmp(patch * patch);
  for (std::size_t y = 0; y < patch; ++y)
    for (std::size_t x = 0; x < patch; ++x) tmp[y * patch + x] = static_cast<T>(src.at(c.y + y, c.x + x));
  dihedral(tmp.data(), patch, c.transform, dst);
}

}  // namespace detail

/// Draws n independent crops from each domain. Source crops come with their labels.
template <typename T = float>
TrainBatch<T> sample_batch(const ImageStack& source, const UnlabeledStack& target, const SampleOptions& opt, Rng& rng) {
  if (!source.has_labels()) throw DataError("sample_batch: source stack has no labels");
  const std::size_t p = opt.patch;
  if (p == 0 || p > std::min(source.height(), source.width()) || p > std::min(target.height(), target.width()))
    throw DataError("sample_batch: patch " + std::to_string(p) + " exceeds a section dimension");
  if (source.depth() == 0 || target.depth() == 0) throw DataError("sample_batch: empty stack");
  const Shape sh{opt.n, 1, p, p};
  TrainBatch<T> b{Tensor<T>(sh), Tensor<T>(sh), Tensor<T>(sh)};
  for (std::size_t i = 0; i < opt.n; ++i) {
    const auto c = detail::draw_crop(rng, source.depth(), source.height(), source.width(), p, opt.augment);
    detail::write_crop(source.sections[c.section], c, p, b.x_s.sample(i));
    detail::write_crop((*source.labels)[c.section], c, p, b.y_s.sample(i));
  }
  for (std::size_t i = 0; i < opt.n; ++i) {
    const auto c = detail::draw_crop(rng, target.depth(), target.height(), target.width(), p, opt.augment);
    detail::write_crop(target.sections()[c.section], c, p, b.x_t.sample(i));
  }
  return b;
}

/// Source-only batch for supervised pretraining (x_t left empty).
template <typename T = float>
TrainBatch<T> sample_source(const ImageStack& source, const SampleOptions& opt, Rng& rng) {
  if (!source.has_labels()) throw DataError("sample_source: source stack has no labels");
  const std::size_t p = opt.patch;
  if (p == 0 || p > std::min(source.height(), source.width()))
    throw DataError("sample_source: patch " + std::to_string(p) + " exceeds a section dimension");
  const Shape sh{opt.n, 1, p, p};
  TrainBatch<T> b{Tensor<T>(sh), Tensor<T>(sh), Tensor<T>()};
  for (std::size_t i = 0; i < opt.n; ++i) {
    const auto c = detail::draw_crop(rng, source.depth(), source.height(), source.width(), p, opt.augment);
    detail::write_crop(source.sections[c.section], c, p, b.x_s.sample(i));
    detail::write_crop((*source.labels)[c.section], c, p, b.y_s.sample(i));
  }
  return b;
}

}  // namespace apma
