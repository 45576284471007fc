#pragma once

// Training driver: pretraining, adaptation loop, checkpoints, and run-directory files.

#include "apma/checkpoint.hpp"
#include "apma/config.hpp"
#include "apma/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace apma {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct RunSummary {
  double wall_seconds = 0;
  std::filesystem::path last_checkpoint;
  std::string failure;  // empty on success
};

namespace detail {

// Mean of each loss term over `bins` consecutive windows of the history.
inline std::string curve_summary(const std::vector<HistoryRow>& h, std::size_t bins) {
  std::ostringstream os;
  if (h.empty()) return "  (no adaptation iterations)\n";
  bins = std::min(bins, h.size());
  os << "  iters        seg          rec          d_pred       d_feat       g_pred       g_feat\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * h.size() / bins, hi = (b + 1) * h.size() / bins;
    double m[6] = {0, 0, 0, 0, 0, 0};
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& l = h[i].loss;
      const double v[6] = {l.seg, l.rec, l.d_pred_loss, l.d_feat_loss, l.g_pred_loss, l.g_feat_loss};
      for (int k = 0; k < 6; ++k) m[k] += v[k];
    }
    char line[160];
    const double n = static_cast<double>(hi - lo);
    std::snprintf(line, sizeof line, "  %5zu-%-5zu %-12.6g %-12.6g %-12.6g %-12.6g %-12.6g %-12.6g\n", h[lo].iter,
                  h[hi - 1].iter, m[0] / n, m[1] / n, m[2] / n, m[3] / n, m[4] / n, m[5] / n);
    os << line;
  }
  return os.str();
}

template <typename T>
void write_run_files(const std::filesystem::path& dir, const TrainState<T>& s, const RunConfig& cfg,
                     const RunSummary& sum) {
  write_text(dir / "history.csv", history_csv(s.history));
  write_text(dir / "pretrain.csv", history_csv(s.pretrain_history));
  std::ostringstream r;
  r << "status = " << (sum.failure.empty() ? "ok" : "failed: " + sum.failure) << "\n"
    << "seed = " << cfg.train.seed << "\n"
    << "config_digest = " << cfg.digest() << "\n"
    << "pretrain_iters_done = " << s.pretrain_done << "\n"
    << "adapt_iters_done = " << s.iter << "\n"
    << "d_pred_updates = " << s.d_pred_updates << "\n"
    << "d_feat_updates = " << s.d_feat_updates << "\n"
    << "wall_seconds = " << format_double(sum.wall_seconds) << "\n"
    << "last_checkpoint = " << sum.last_checkpoint.filename().string() << "\n"
    << "\n[loss curve, window means]\n"
    << curve_summary(s.history, 10) << "\n[config]\n"
    << cfg.to_text();
  write_text(dir / "report.txt", r.str());
}

}  // namespace detail

/// Runs pretraining (if unfinished) and adaptation up to `stop_at` iterations
/// (<= train.total_iters), writing config.txt, history.csv, pretrain.csv,
/// report.txt, and checkpoints into `dir`. NumericalError is rethrown after the
/// run files have been written.
template <typename T>
RunSummary run_training(TrainState<T>& s, const RunConfig& cfg, const ImageStack& source,
                        const UnlabeledStack& target, const std::filesystem::path& dir, std::size_t stop_at) {
  cfg.validate();
  if (stop_at > cfg.train.total_iters)
    throw std::invalid_argument("stop iteration " + std::to_string(stop_at) + " beyond train.total_iters");
  std::filesystem::create_directories(dir);
  write_text(dir / "config.txt", cfg.to_text());
  const auto t0 = std::chrono::steady_clock::now();
  RunSummary sum;
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto checkpoint = [&] {
    sum.last_checkpoint = dir / checkpoint_name(s.iter);
    save_checkpoint(sum.last_checkpoint, s, cfg);
  };
  try {
    pretrain_ge(s, source, cfg.train);
    const SampleOptions so{cfg.train.patch, cfg.train.batch_size, cfg.train.augment};
    while (s.iter < stop_at) {
      const auto batch = sample_batch<T>(source, target, so, s.rng);
      adapt_step(s, batch, cfg.train);
      if (cfg.train.checkpoint_every && s.iter % cfg.train.checkpoint_every == 0 && s.iter < stop_at) checkpoint();
    }
    checkpoint();
  } catch (const NumericalError& e) {
    sum.failure = e.what();
    sum.wall_seconds = elapsed();
    detail::write_run_files(dir, s, cfg, sum);
    throw;
  }
  sum.wall_seconds = elapsed();
  detail::write_run_files(dir, s, cfg, sum);
  return sum;
}

}  // namespace apma
