// apma: dataset synthesis, training, evaluation, ablation, and plotting.

#include "apma/plot.hpp"
#include "apma/workflow.hpp"

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace apma;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::vector<std::string> sets;
  std::string command_line;
};

RunConfig resolve(const Common& c, bool seed_is_synth) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.apply_file(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  if (c.seed) (seed_is_synth ? cfg.synth.seed : cfg.train.seed) = *c.seed;
  return cfg;
}

ManifestRecord record(const Common& c, const RunConfig& cfg, std::uint64_t seed, const std::string& start) {
  ManifestRecord r;
  r.command_line = c.command_line;
  r.start = start;
  r.end = utc_timestamp();
  r.seed = seed;
  r.extra.push_back({"deterministic", c.deterministic ? "true" : "false"});
  r.config_text = cfg.to_text();
  return r;
}

std::string hex(std::uint64_t v) { return Fnv1a::to_hex(v); }

int cmd_synth(const Common& c) {
  const auto start = utc_timestamp();
  auto cfg = resolve(c, true);
  cfg.synth.validate();
  const auto d = synth_domains(cfg.synth);
  const fs::path out(c.out);
  save_domains(d, out);
  auto r = record(c, cfg, cfg.synth.seed, start);
  r.extra.push_back({"digest.source", hex(d.source.digest())});
  r.extra.push_back({"digest.target_train", hex(d.target_train.digest())});
  r.extra.push_back({"digest.target_test", hex(d.target_test.digest())});
  r.config_text = cfg.to_text("synth.");
  append_manifest(out, r);
  std::cout << "wrote " << d.source.depth() << "/" << d.target_train.depth() << "/" << d.target_test.depth()
            << " sections to " << out.string() << "\n";
  return kOk;
}

void add_data_digests(ManifestRecord& r, const TrainingData& d) {
  r.extra.push_back({"digest.source", hex(d.source.digest())});
  Fnv1a h;
  for (const auto& s : d.target.sections()) h.update(s.px.data(), s.px.size() * sizeof(float));
  r.extra.push_back({"digest.target_train_images", h.hex()});
}

int cmd_train(const Common& c, const std::string& data, const std::string& from, std::optional<std::size_t> stop_at,
              bool pretrain_only) {
  const auto start = utc_timestamp();
  const auto cfg = resolve(c, false);
  cfg.validate();
  const auto td = load_training_data(data);
  TrainState<float> s = from.empty() ? init_state<float>(cfg.arch, cfg.train) : load_checkpoint<float>(from, cfg);
  const std::size_t stop = pretrain_only ? 0 : stop_at.value_or(cfg.train.total_iters);
  if (stop < s.iter) throw std::invalid_argument("--stop-at is before the checkpoint's iteration");
  int code = kOk;
  RunSummary sum;
  try {
    sum = run_training(s, cfg, td.source, td.target, c.out, stop);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    code = kNumerical;
  }
  auto r = record(c, cfg, cfg.train.seed, start);
  add_data_digests(r, td);
  if (!from.empty()) r.extra.push_back({"initial_checkpoint", from});
  append_manifest(c.out, r);
  if (code == kOk)
    std::cout << "pretrain " << s.pretrain_done << " + adapt " << s.iter << " iterations, checkpoint "
              << sum.last_checkpoint.string() << " (" << sum.wall_seconds << " s)\n";
  return code;
}

int cmd_eval(const Common& c, const std::string& data, const std::string& ckpt, const std::string& split,
             std::string run_id) {
  const auto start = utc_timestamp();
  const auto cfg = resolve(c, false);
  const auto bundle = load_bundle<float>(ckpt);
  const auto meta = read_meta(Archive::read(ckpt));
  const auto stack = load_split(data, split, true);
  auto report = evaluate(bundle, stack, cfg.eval);
  report.provenance = {meta.config_digest, fs::path(ckpt).filename().string(), meta.seed};
  const fs::path out = c.out.empty() ? fs::path(ckpt).parent_path() : fs::path(c.out);
  if (run_id.empty()) run_id = fs::absolute(ckpt).parent_path().filename().string();
  const auto row = metrics_row(run_id, report.provenance.checkpoint, split, report);
  fs::create_directories(out);
  append_metrics(out / "metrics.csv", row);
  auto r = record(c, cfg, meta.seed, start);
  r.extra.push_back({"checkpoint", ckpt});
  r.extra.push_back({"digest." + split, hex(stack.digest())});
  r.config_text = cfg.to_text("eval.");
  append_manifest(out, r);
  std::cout << kMetricsHeader << "\n" << row << "\n";
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& data) {
  const auto start = utc_timestamp();
  const auto cfg = resolve(c, false);
  cfg.validate();
  const auto td = load_training_data(data);
  const auto test = load_split(data, "target_test", true);
  const fs::path out(c.out);
  const auto results = run_ablation<float>(cfg, td.source, td.target, test, out, [](const AblationResult& r) {
    if (r.error.empty())
      std::cout << r.name << ": dsc " << r.metrics.dsc << " jac " << r.metrics.jac << " (" << r.wall_seconds << " s)\n";
    else
      std::cout << r.name << ": failed: " << r.error << "\n";
  });
  write_text(out / "ablation.csv", ablation_table(results));
  auto r = record(c, cfg, cfg.train.seed, start);
  add_data_digests(r, td);
  r.extra.push_back({"digest.target_test", hex(test.digest())});
  append_manifest(out, r);
  int code = kOk;
  for (const auto& res : results)
    if (!res.error.empty()) code = std::max(code, res.numerical_failure ? int(kNumerical) : int(kData));
  return code;
}

fs::path last_checkpoint(const fs::path& run) {
  const auto kv = parse_kv(read_text(run / "report.txt"));
  const auto it = kv.find("last_checkpoint");
  if (it == kv.end() || it->second.empty()) throw DataError("no checkpoint recorded in " + (run / "report.txt").string());
  return run / it->second;
}

int cmd_plot(const Common& c, const std::string& data, const std::vector<std::string>& runs) {
  const auto start = utc_timestamp();
  const auto cfg = resolve(c, false);
  const fs::path out(c.out);
  fs::create_directories(out);
  const auto test = load_split(data, "target_test", true);
  std::vector<std::vector<Mask>> preds;
  for (const auto& run_s : runs) {
    const fs::path run(run_s);
    for (const char* f : {"history.csv", "metrics.csv"})
      if (!fs::exists(run / f)) throw DataError("missing " + (run / f).string());
    const auto hist = parse_history_csv(read_text(run / "history.csv"));
    const auto name = fs::absolute(run).lexically_normal().filename().string();
    cv::imwrite((out / ("loss_" + name + ".png")).string(), loss_chart(hist, name));
    const auto probs = tiled_inference(load_bundle<float>(last_checkpoint(run)), test.sections, cfg.eval);
    std::vector<Mask> masks;
    for (const auto& p : probs) masks.push_back(binarize(p, cfg.eval.threshold));
    preds.push_back(std::move(masks));
  }
  for (std::size_t i = 0; i < test.depth(); ++i) {
    std::vector<Mask> cols;
    for (const auto& p : preds) cols.push_back(p[i]);
    const auto panel = comparison_panel(test.sections[i], (*test.labels)[i], cols);
    const auto file = out / ("panel_" + detail::section_name(i));
    if (!cv::imwrite(file.string(), panel)) throw DataError("cannot write " + file.string());
  }
  std::string columns = "input,gt";
  for (const auto& r : runs) columns += "," + r;
  write_text(out / "panel_columns.txt", columns + "\n");
  auto r = record(c, cfg, cfg.train.seed, start);
  r.config_text = cfg.to_text("eval.");
  append_manifest(out, r);
  std::cout << "wrote " << runs.size() << " loss charts and " << test.depth() << " panels to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive segmentation with reconstruction and multi-level adversarial alignment"};
  app.require_subcommand(1);
  Common c;
  for (int i = 0; i < argc; ++i) c.command_line += (i ? " " : "") + std::string(argv[i]);

  auto common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--config", c.config, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "seed override");
    auto* o = sub->add_option("--out", c.out, "output directory");
    if (out_required) o->required();
    sub->add_flag("--deterministic", c.deterministic, "single-threaded, fixed-order reductions (always on)");
    sub->add_option("--set", c.sets, "config override key=value (repeatable)");
  };

  std::string data, from, ckpt, split = "target_test", run_id;
  std::optional<std::size_t> stop_at;
  std::vector<std::string> runs;

  auto* synth = app.add_subcommand("synth", "write a synthetic source/target dataset");
  common(synth, true);
  auto* pretrain = app.add_subcommand("pretrain", "supervised pretraining on the source stack");
  common(pretrain, true);
  pretrain->add_option("--data", data, "dataset directory")->required();
  auto* adapt = app.add_subcommand("adapt", "pretraining (if needed) and adaptation");
  common(adapt, true);
  adapt->add_option("--data", data, "dataset directory")->required();
  adapt->add_option("--from", from, "checkpoint to start or resume from")->check(CLI::ExistingFile);
  adapt->add_option("--stop-at", stop_at, "stop after this many adaptation iterations");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a labeled split");
  common(eval, false);
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--checkpoint", ckpt, "checkpoint archive")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "split to score");
  eval->add_option("--run-id", run_id, "run identifier for metrics.csv");
  auto* ablate = app.add_subcommand("ablate", "baseline plus the five mechanism combinations");
  common(ablate, true);
  ablate->add_option("--data", data, "dataset directory")->required();
  auto* plot = app.add_subcommand("plot", "loss curves and qualitative panels");
  common(plot, true);
  plot->add_option("--data", data, "dataset directory")->required();
  plot->add_option("--runs", runs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*pretrain) return cmd_train(c, data, "", std::nullopt, true);
    if (*adapt) return cmd_train(c, data, from, stop_at, false);
    if (*eval) return cmd_eval(c, data, ckpt, split, run_id);
    if (*ablate) return cmd_ablate(c, data);
    if (*plot) return cmd_plot(c, data, runs);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
