#pragma once

// Tiled inference over full sections and Dice/Jaccard scoring.

#include "apma/datapipe.hpp"
#include "apma/nets.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

/// Pixel-level confusion counts.
struct Confusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Percentages. Both masks empty counts as a perfect score.
struct DiceJaccard {
  double dsc = 100;
  double jac = 100;
};

inline DiceJaccard scores(const Confusion& c) {
  const std::uint64_t denom_j = c.tp + c.fp + c.fn;
  if (denom_j == 0) return {100.0, 100.0};
  const double tp = static_cast<double>(c.tp);
  return {100.0 * 2.0 * tp / (2.0 * tp + static_cast<double>(c.fp + c.fn)), 100.0 * tp / static_cast<double>(denom_j)};
}

inline Confusion confusion(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("dice_jaccard: mask shapes differ (" + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + ")");
  Confusion c;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    const auto p = pred.px[i], g = gt.px[i];
    if (p > 1 || g > 1) throw DataError("dice_jaccard: non-binary mask value at pixel " + std::to_string(i));
    if (p && g)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

inline DiceJaccard dice_jaccard(const Mask& pred, const Mask& gt) { return scores(confusion(pred, gt)); }

/// mask = p > threshold (strict).
inline Mask binarize(const Image& p, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw std::invalid_argument("threshold must lie in [0,1], got " + std::to_string(threshold));
  Mask m(p.height, p.width);
  for (std::size_t i = 0; i < p.px.size(); ++i) m.px[i] = static_cast<double>(p.px[i]) > threshold ? 1 : 0;
  return m;
}

struct EvalOptions {
  double threshold = 0.5;
  std::size_t tile = 64;
  std::size_t overlap = 32;
  std::size_t tile_batch = 8;
  bool per_section = false;  // mean of per-section scores instead of global counts
};

namespace detail {

// Index into [0, n) under symmetric reflection without edge repetition (period 2n - 2).
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  long r = i % period;
  if (r < 0) r += period;
  return static_cast<std::size_t>(r < static_cast<long>(n) ? r : period - r);
}

inline std::vector<std::size_t> tile_origins(std::size_t padded, std::size_t tile, std::size_t stride) {
  std::vector<std::size_t> o;
  for (std::size_t p = 0; p + tile <= padded; p += stride) o.push_back(p);
  return o;
}

// Smallest length >= max(n, tile) reachable as tile + k * stride.
inline std::size_t padded_extent(std::size_t n, std::size_t tile, std::size_t stride) {
  if (n <= tile) return tile;
  return tile + (n - tile + stride - 1) / stride * stride;
}

}  // namespace detail

/// Foreground probabilities for every section. Sections are reflect-padded on the
/// bottom/right to a whole number of tile strides; overlapping tiles are averaged.
template <typename T>
std::vector<Image> tiled_inference(const NetworkBundle<T>& bundle, const std::vector<Image>& sections,
                                   const EvalOptions& opt) {
  const std::size_t tile = opt.tile;
  if (tile == 0 || tile % bundle.arch.stride_multiple())
    throw std::invalid_argument("tile " + std::to_string(tile) + " must be a positive multiple of " +
                                std::to_string(bundle.arch.stride_multiple()));
  if (opt.overlap >= tile) throw std::invalid_argument("tile overlap must be smaller than the tile");
  const std::size_t stride = tile - opt.overlap;
  const std::size_t batch = std::max<std::size_t>(1, opt.tile_batch);
  NoGradGuard no_grad;
  std::vector<Image> out;
  out.reserve(sections.size());
  for (const auto& sec : sections) {
    const std::size_t H = sec.height, W = sec.width;
    const std::size_t Hp = detail::padded_extent(H, tile, stride), Wp = detail::padded_extent(W, tile, stride);
    std::vector<double> acc(Hp * Wp, 0.0);
    std::vector<std::uint32_t> cnt(Hp * Wp, 0);
    struct Origin {
      std::size_t y, x;
    };
    std::vector<Origin> origins;
    for (auto y : detail::tile_origins(Hp, tile, stride))
      for (auto x : detail::tile_origins(Wp, tile, stride)) origins.push_back({y, x});
    for (std::size_t first = 0; first < origins.size(); first += batch) {
      const std::size_t nb = std::min(batch, origins.size() - first);
      Tensor<T> x(Shape{nb, 1, tile, tile}, uninit);
      for (std::size_t b = 0; b < nb; ++b) {
        const auto [oy, ox] = origins[first + b];
        for (std::size_t y = 0; y < tile; ++y) {
          const std::size_t sy = detail::reflect_index(static_cast<long>(oy + y), H);
          for (std::size_t xx = 0; xx < tile; ++xx)
            x.at(b, 0, y, xx) = static_cast<T>(sec.at(sy, detail::reflect_index(static_cast<long>(ox + xx), W)));
        }
      }
      const auto p = forward_ge(bundle, Var<T>::constant(std::move(x))).p.value();
      for (std::size_t b = 0; b < nb; ++b) {
        const auto [oy, ox] = origins[first + b];
        for (std::size_t y = 0; y < tile; ++y)
          for (std::size_t xx = 0; xx < tile; ++xx) {
            acc[(oy + y) * Wp + ox + xx] += static_cast<double>(p.at(b, 0, y, xx));
            ++cnt[(oy + y) * Wp + ox + xx];
          }
      }
    }
    Image prob(H, W);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        prob.at(y, xx) = static_cast<float>(acc[y * Wp + xx] / cnt[y * Wp + xx]);
    out.push_back(std::move(prob));
  }
  return out;
}

struct Provenance {
  std::string config_digest;
  std::string checkpoint;
  std::uint64_t seed = 0;
};

struct MetricsReport {
  double dsc = 0;
  double jac = 0;
  double threshold = 0.5;
  std::uint64_t n_pixels = 0;
  Confusion counts;
  Provenance provenance;
};

/// Scores precomputed probability maps against labels.
inline MetricsReport score_probabilities(const std::vector<Image>& probs, const std::vector<Mask>& labels,
                                         const EvalOptions& opt) {
  if (probs.size() != labels.size())
    throw DataError("probability/label section counts differ (" + std::to_string(probs.size()) + " vs " +
                    std::to_string(labels.size()) + ")");
  MetricsReport r;
  r.threshold = opt.threshold;
  double dsc_sum = 0, jac_sum = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto c = confusion(binarize(probs[i], opt.threshold), labels[i]);
    r.counts += c;
    const auto s = scores(c);
    dsc_sum += s.dsc;
    jac_sum += s.jac;
  }
  r.n_pixels = r.counts.total();
  if (opt.per_section && !probs.empty()) {
    r.dsc = dsc_sum / static_cast<double>(probs.size());
    r.jac = jac_sum / static_cast<double>(probs.size());
  } else {
    const auto s = scores(r.counts);
    r.dsc = s.dsc;
    r.jac = s.jac;
  }
  return r;
}

/// Tiled inference, binarization, and global confusion-count scoring over the whole stack.
template <typename T>
MetricsReport evaluate(const NetworkBundle<T>& bundle, const ImageStack& stack, const EvalOptions& opt) {
  if (!stack.has_labels()) throw DataError("evaluate: stack has no labels");
  return score_probabilities(tiled_inference(bundle, stack.sections, opt), *stack.labels, opt);
}

}  // namespace apma
