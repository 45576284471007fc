#pragma once

// Synthetic source/target stacks. Both domains share one label process
// (random ellipses); only the rendering differs, so the domain gap is purely
// visual.

#include "apma/datapipe.hpp"
#include "apma/random.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

struct TextureSpec {
  double frequency = 0.0625;  // cycles per pixel
  double amplitude = 0.12;
};

struct ShiftSpec {
  bool invert = false;         // swap foreground/background brightness
  double frequency_delta = 0;  // added to the texture frequency
  double noise_sigma = 0;      // additive Gaussian noise, clamped afterwards
  double contrast_scale = 1;   // multiplies the foreground/background gap

  bool is_identity() const { return !invert && frequency_delta == 0 && noise_sigma == 0 && contrast_scale == 1; }
};

struct SynthConfig {
  std::size_t canvas_size = 96;
  std::size_t blob_count_min = 2, blob_count_max = 6;
  double blob_radius_min = 4, blob_radius_max = 10;
  double membrane_width = 1.5;
  double background_level = 0.45;
  double foreground_contrast = 0.2;
  double membrane_depth = 0.25;
  TextureSpec source_texture{};
  ShiftSpec target_shift{false, 0.09375, 0.1, 0.3};
  std::size_t n_train_source = 48, n_train_target = 48, n_test_target = 24;
  std::uint64_t seed = 7;

  /// Throws std::invalid_argument for configurations that cannot guarantee
  /// a label fraction strictly inside (0, 0.5) on every section.
  void validate() const {
    if (canvas_size < 8) throw std::invalid_argument("synth.canvas_size must be >= 8");
    if (blob_count_min < 1) throw std::invalid_argument("synth.blob_count_min must be >= 1 (empty sections possible)");
    if (blob_count_max < blob_count_min) throw std::invalid_argument("synth.blob_count range is empty");
    if (!(blob_radius_min >= 1.0)) throw std::invalid_argument("synth.blob_radius_min must be >= 1");
    if (blob_radius_max < blob_radius_min) throw std::invalid_argument("synth.blob_radius range is empty");
    const double max_area = static_cast<double>(blob_count_max) * std::numbers::pi * blob_radius_max * blob_radius_max;
    const double canvas = static_cast<double>(canvas_size * canvas_size);
    if (max_area >= 0.5 * canvas)
      throw std::invalid_argument("synth blobs can cover half the canvas; reduce blob_count_max or blob_radius_max");
    if (source_texture.frequency < 0 || source_texture.amplitude < 0 || target_shift.noise_sigma < 0)
      throw std::invalid_argument("synth texture/noise parameters must be non-negative");
    if (source_texture.frequency + target_shift.frequency_delta < 0)
      throw std::invalid_argument("synth target texture frequency would be negative");
    if (n_train_source == 0 || n_train_target == 0) throw std::invalid_argument("synth training counts must be >= 1");
    if (n_test_target == 0) throw std::invalid_argument("synth.n_test_target must be >= 1 (evaluation impossible)");
  }
};

struct SynthDomains {
  ImageStack source;
  ImageStack target_train;
  ImageStack target_test;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Sum of four random plane waves at the given frequency, scaled to [-1, 1].
inline std::vector<double> plane_waves(Rng& rng, std::size_t size, double freq) {
  constexpr int kWaves = 4;
  std::vector<double> t(size * size, 0.0);
  for (int k = 0; k < kWaves; ++k) {
    const double th = rng.uniform(0, std::numbers::pi), ph = rng.uniform(0, 2 * std::numbers::pi);
    const double kx = 2 * std::numbers::pi * freq * std::cos(th), ky = 2 * std::numbers::pi * freq * std::sin(th);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        t[y * size + x] += std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + ph) / kWaves;
  }
  return t;
}

struct Layout {
  Mask mask;
  std::vector<std::uint8_t> membrane;
};

// Ellipses at random centers, semi-axes, and orientations; pixel (x, y) is sampled at its integer coordinates.
inline Layout draw_layout(const SynthConfig& cfg, Rng& rng) {
  const std::size_t S = cfg.canvas_size;
  Layout L{Mask(S, S), std::vector<std::uint8_t>(S * S, 0)};
  const auto count = rng.uniform_int(static_cast<std::int64_t>(cfg.blob_count_min), static_cast<std::int64_t>(cfg.blob_count_max));
  for (std::int64_t b = 0; b < count; ++b) {
    const double cx = rng.uniform(0, static_cast<double>(S)), cy = rng.uniform(0, static_cast<double>(S));
    const double ra = rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max);
    const double rb = rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max);
    const double th = rng.uniform(0, std::numbers::pi);
    const double c = std::cos(th), s = std::sin(th);
    const double outer = 1.0 + cfg.membrane_width / std::min(ra, rb);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double u = (dx * c + dy * s) / ra, v = (-dx * s + dy * c) / rb;
        const double r = u * u + v * v;
        if (r <= 1.0)
          L.mask.at(y, x) = 1;
        else if (r <= outer * outer)
          L.membrane[y * S + x] = 1;
      }
  }
  return L;
}

inline Image render(const SynthConfig& cfg, const Layout& L, const ShiftSpec& shift, Rng& rng) {
  const std::size_t S = cfg.canvas_size;
  const double freq = cfg.source_texture.frequency + shift.frequency_delta;
  const double amp = cfg.source_texture.amplitude;
  const auto bg_tex = plane_waves(rng, S, freq);
  const auto fg_tex = plane_waves(rng, S, 2 * freq);
  Image img(S, S);
  const double base = cfg.background_level;
  const double fg_level = base + cfg.foreground_contrast * shift.contrast_scale;
  const double mem_level = base - cfg.membrane_depth;
  for (std::size_t i = 0; i < S * S; ++i) {
    double v;
    if (L.mask.px[i])
      v = fg_level + 0.5 * amp * fg_tex[i];
    else if (L.membrane[i])
      v = mem_level;
    else
      v = base + amp * bg_tex[i];
    if (shift.invert) v = 1.0 - v;
    if (shift.noise_sigma > 0) v += rng.normal(0.0, shift.noise_sigma);
    img.px[i] = static_cast<float>(quantize(static_cast<float>(v))) / 255.f;  // 8-bit grid, so a PNG round trip is lossless
  }
  return img;
}

inline ImageStack synth_stack(const SynthConfig& cfg, std::size_t n, const ShiftSpec& shift, std::uint64_t stream) {
  Rng rng(splitmix64(cfg.seed ^ splitmix64(stream)));
  ImageStack st;
  st.labels.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    auto layout = draw_layout(cfg, rng);
    st.sections.push_back(render(cfg, layout, shift, rng));
    st.labels->push_back(std::move(layout.mask));
  }
  return st;
}

}  // namespace detail

/// Generates labeled source, target-train, and target-test stacks. Target labels
/// exist for evaluation only; training code receives target data label-stripped.
inline SynthDomains synth_domains(const SynthConfig& cfg) {
  cfg.validate();
  SynthDomains d;
  d.source = detail::synth_stack(cfg, cfg.n_train_source, ShiftSpec{false, 0, 0, 1}, 1);
  d.target_train = detail::synth_stack(cfg, cfg.n_train_target, cfg.target_shift, 2);
  d.target_test = detail::synth_stack(cfg, cfg.n_test_target, cfg.target_shift, 3);
  return d;
}

}  // namespace apma
