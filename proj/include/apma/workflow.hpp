#pragma once

// Dataset directories, manifests, metrics rows, and the ablation grid.

#include "apma/checkpoint.hpp"
#include "apma/config.hpp"
#include "apma/eval.hpp"
#include "apma/run.hpp"
#include "apma/synth.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace apma {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Dataset directory: <dir>/<split>/images/0000.png and <dir>/<split>/labels/0000.png.

inline constexpr const char* kSplits[] = {"source", "target_train", "target_test"};

inline void save_domains(const SynthDomains& d, const std::filesystem::path& dir) {
  const ImageStack* stacks[] = {&d.source, &d.target_train, &d.target_test};
  for (int i = 0; i < 3; ++i) save_stack(*stacks[i], dir / kSplits[i] / "images", dir / kSplits[i] / "labels");
}

/// Loads one split; labels are read only when requested.
inline ImageStack load_split(const std::filesystem::path& dir, const std::string& split, bool with_labels) {
  const auto root = dir / split;
  if (!std::filesystem::is_directory(root / "images")) throw DataError("missing dataset split " + root.string());
  ImageStack st = with_labels ? load_stack(root / "images", root / "labels") : load_stack(root / "images");
  st.validate();
  return st;
}

/// Training inputs: labeled source and label-free target. Target labels are never opened.
struct TrainingData {
  ImageStack source;
  UnlabeledStack target;
};

inline TrainingData load_training_data(const std::filesystem::path& dir) {
  return {load_split(dir, "source", true), load_split(dir, "target_train", false).strip_labels()};
}

// ---------------------------------------------------------------------------
// Manifests: one manifest.txt per artifact directory; each command appends a record.

inline std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ManifestRecord {
  std::string command_line;
  std::string start, end;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> extra;  // dataset digests and the like
  std::string config_text;
};

inline void append_manifest(const std::filesystem::path& dir, const ManifestRecord& r) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "manifest.txt", std::ios::app);
  if (!os) throw DataError("cannot append to " + (dir / "manifest.txt").string());
  os << "# record\n"
     << "command = " << r.command_line << "\n"
     << "code_version = " << kVersion << "\n"
     << "seed = " << r.seed << "\n"
     << "start = " << r.start << "\n"
     << "end = " << r.end << "\n";
  for (const auto& [k, v] : r.extra) os << k << " = " << v << "\n";
  os << r.config_text << "\n";
}

// ---------------------------------------------------------------------------
// metrics.csv

inline constexpr const char* kMetricsHeader = "run_id,checkpoint,split,threshold,dsc,jac,n_pixels";

inline std::string metrics_row(const std::string& run_id, const std::string& checkpoint, const std::string& split,
                               const MetricsReport& m) {
  return run_id + "," + checkpoint + "," + split + "," + format_double(m.threshold) + "," + format_double(m.dsc) +
         "," + format_double(m.jac) + "," + std::to_string(m.n_pixels);
}

inline void append_metrics(const std::filesystem::path& file, const std::string& row) {
  const bool fresh = !std::filesystem::exists(file);
  std::ofstream os(file, std::ios::app);
  if (!os) throw DataError("cannot append to " + file.string());
  if (fresh) os << kMetricsHeader << "\n";
  os << row << "\n";
}

// ---------------------------------------------------------------------------
// Ablation grid.

struct AblationRow {
  const char* name;
  const char* slug;
  AblationFlags flags;
};

/// Baseline first, then the five mechanism combinations.
inline const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows = {
      {"No adaptation", "no_adaptation", {false, false, false}},
      {"EN", "en", {true, false, false}},
      {"DE_feat", "de_feat", {false, true, false}},
      {"DE_pred", "de_pred", {false, false, true}},
      {"EN+DE_feat", "en_de_feat", {true, true, false}},
      {"EN+DE_feat+DE_pred", "en_de_feat_de_pred", {true, true, true}},
  };
  return rows;
}

struct AblationResult {
  std::string name;
  AblationFlags flags;
  std::string error;  // empty when the row completed
  bool numerical_failure = false;
  MetricsReport metrics;
  std::filesystem::path run_dir;
  double wall_seconds = 0;
};

/// Pretrains once (shared by all rows, identical seed), then adapts each row for
/// the same budget and evaluates it on `test`. A failing row is recorded and the
/// remaining rows still run.
template <typename T>
std::vector<AblationResult> run_ablation(const RunConfig& cfg, const ImageStack& source, const UnlabeledStack& target,
                                         const ImageStack& test, const std::filesystem::path& out,
                                         const std::function<void(const AblationResult&)>& on_row = {}) {
  cfg.validate();
  RunConfig pre_cfg = cfg;
  pre_cfg.train.ablation = {false, false, false};
  auto pre = init_state<T>(cfg.arch, pre_cfg.train);
  run_training(pre, pre_cfg, source, target, out / "pretrain", 0);

  std::vector<AblationResult> results;
  for (const auto& row : ablation_rows()) {
    AblationResult r{row.name, row.flags, {}, false, {}, out / row.slug, 0};
    RunConfig rc = cfg;
    rc.train.ablation = row.flags;
    try {
      TrainState<T> s = pre;
      const auto sum = run_training(s, rc, source, target, r.run_dir, rc.train.total_iters);
      r.wall_seconds = sum.wall_seconds;
      r.metrics = evaluate(s.bundle, test, rc.eval);
      r.metrics.provenance = {rc.digest(), sum.last_checkpoint.filename().string(), rc.train.seed};
      append_metrics(r.run_dir / "metrics.csv",
                     metrics_row(row.slug, r.metrics.provenance.checkpoint, "target_test", r.metrics));
    } catch (const NumericalError& e) {
      r.error = e.what();
      r.numerical_failure = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    if (on_row) on_row(r);
    results.push_back(std::move(r));
  }
  return results;
}

inline std::string ablation_table(const std::vector<AblationResult>& rs) {
  std::ostringstream os;
  os << "row,en,de_feat,de_pred,dsc,jac,status\n";
  for (const auto& r : rs) {
    os << r.name << "," << r.flags.en << "," << r.flags.de_feat << "," << r.flags.de_pred << ",";
    if (r.error.empty())
      os << format_double(r.metrics.dsc) << "," << format_double(r.metrics.jac) << ",ok\n";
    else {
      std::string msg = r.error;
      for (auto& c : msg)
        if (c == ',' || c == '\n') c = ';';
      os << ",,failed: " << msg << "\n";
    }
  }
  return os.str();
}

}  // namespace apma
