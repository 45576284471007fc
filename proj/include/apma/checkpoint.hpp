#pragma once

// Checkpoint archives and history CSV. Parameters are stored as flat
// little-endian float32 arrays named after the parameter; shapes.txt holds the
// matching NCHW extents so loading can check every tensor by name.

#include "apma/archive.hpp"
#include "apma/config.hpp"
#include "apma/trainer.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace apma {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "checkpoint arrays are written in native little-endian order");

inline constexpr const char* kHistoryHeader = "iter,lr,seg,rec,d_pred,d_feat,g_pred,g_feat";

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << kHistoryHeader << "\n";
  for (const auto& r : rows) {
    const auto& l = r.loss;
    os << r.iter << "," << format_double(r.lr) << "," << format_double(l.seg) << "," << format_double(l.rec) << ","
       << format_double(l.d_pred_loss) << "," << format_double(l.d_feat_loss) << "," << format_double(l.g_pred_loss)
       << "," << format_double(l.g_feat_loss) << "\n";
  }
  return os.str();
}

inline std::vector<HistoryRow> parse_history_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != kHistoryHeader)
    throw DataError("history: missing or unexpected header");
  std::vector<HistoryRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(std::string(detail::trim(cell)));
    if (f.size() != 8) throw DataError("history line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      HistoryRow r;
      r.iter = detail::parse_number<std::size_t>("iter", f[0]);
      r.lr = detail::parse_number<double>("lr", f[1]);
      r.loss.seg = detail::parse_number<double>("seg", f[2]);
      r.loss.rec = detail::parse_number<double>("rec", f[3]);
      r.loss.d_pred_loss = detail::parse_number<double>("d_pred", f[4]);
      r.loss.d_feat_loss = detail::parse_number<double>("d_feat", f[5]);
      r.loss.g_pred_loss = detail::parse_number<double>("g_pred", f[6]);
      r.loss.g_feat_loss = detail::parse_number<double>("g_feat", f[7]);
      rows.push_back(r);
    } catch (const ConfigError& e) {
      throw DataError("history line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

namespace detail {

template <typename T>
std::string pack_f32(const Tensor<T>& t) {
  std::string out(t.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = static_cast<float>(t[i]);
    std::memcpy(out.data() + i * sizeof(float), &v, sizeof v);
  }
  return out;
}

template <typename T>
void unpack_f32(const std::string& bytes, Tensor<T>& t, const std::string& name) {
  if (bytes.size() != t.size() * sizeof(float))
    throw CheckpointError("checkpoint array '" + name + "' has " + std::to_string(bytes.size() / sizeof(float)) +
                          " values, expected " + std::to_string(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    float v;
    std::memcpy(&v, bytes.data() + i * sizeof(float), sizeof v);
    t[i] = static_cast<T>(v);
  }
}

inline std::string shape_text(const Shape& s) {
  return std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w);
}

template <typename T>
void put_bundle(Archive& a, const NetworkBundle<T>& b) {
  RunConfig rc;
  rc.arch = b.arch;
  a.put("arch.txt", rc.to_text("arch."));
  std::string shapes;
  for (const auto* c : b.components())
    for (const auto& p : c->params()) {
      shapes += p.name + " = " + shape_text(p.var.shape()) + "\n";
      a.put(p.name, pack_f32(p.var.value()));
    }
  a.put("shapes.txt", shapes);
}

template <typename T>
void load_params(const Archive& a, NetworkBundle<T>& b) {
  const auto shapes = parse_kv(a.get("shapes.txt"));
  std::set<std::string> expected;
  for (auto* c : b.components())
    for (auto& p : c->params()) {
      expected.insert(p.name);
      const auto it = shapes.find(p.name);
      if (it == shapes.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
      if (it->second != shape_text(p.var.shape()))
        throw CheckpointError("checkpoint parameter '" + p.name + "' has shape (" + it->second + "), expected (" +
                              shape_text(p.var.shape()) + ")");
      unpack_f32(a.get(p.name), p.var.mutable_value(), p.name);
    }
  for (const auto& [name, _] : shapes)
    if (!expected.count(name)) throw CheckpointError("checkpoint has unexpected parameter '" + name + "'");
}

inline ArchConfig read_arch(const Archive& a) {
  RunConfig rc;
  rc.apply_text(a.get("arch.txt"), "arch.txt");
  rc.arch.validate();
  return rc.arch;
}

template <typename T>
void put_adam(Archive& a, const Adam<T>& opt) {
  std::string steps;
  for (const auto& s : opt.slots()) {
    a.put("adam." + opt.group() + "." + s.name + ".m", pack_f32(s.m));
    a.put("adam." + opt.group() + "." + s.name + ".v", pack_f32(s.v));
    steps += s.name + " = " + std::to_string(s.steps) + "\n";
  }
  a.put("adam." + opt.group() + ".steps", steps);
}

template <typename T>
void load_adam(const Archive& a, Adam<T>& opt) {
  const auto steps = parse_kv(a.get("adam." + opt.group() + ".steps"));
  for (auto& s : opt.slots()) {
    unpack_f32(a.get("adam." + opt.group() + "." + s.name + ".m"), s.m, s.name);
    unpack_f32(a.get("adam." + opt.group() + "." + s.name + ".v"), s.v, s.name);
    const auto it = steps.find(s.name);
    if (it == steps.end()) throw CheckpointError("checkpoint lacks optimizer steps for '" + s.name + "'");
    s.steps = parse_number<std::uint64_t>(s.name, it->second);
  }
}

}  // namespace detail

inline std::string checkpoint_name(std::size_t iter) { return "ckpt_" + std::to_string(iter) + ".tar"; }

/// Parameters, optimizer moments, sampling stream, and loss history.
template <typename T>
Archive checkpoint_archive(const TrainState<T>& s, const RunConfig& cfg) {
  Archive a;
  detail::put_bundle(a, s.bundle);
  std::ostringstream meta;
  meta << "iter = " << s.iter << "\n"
       << "pretrain_done = " << s.pretrain_done << "\n"
       << "seed = " << cfg.train.seed << "\n"
       << "config_digest = " << cfg.digest() << "\n"
       << "d_pred_updates = " << s.d_pred_updates << "\n"
       << "d_feat_updates = " << s.d_feat_updates << "\n";
  a.put("meta.txt", meta.str());
  a.put("config.txt", cfg.to_text());
  a.put("rng.txt", s.rng.state());
  detail::put_adam(a, s.opt_gen);
  detail::put_adam(a, s.opt_d_pred);
  detail::put_adam(a, s.opt_d_feat);
  a.put("pretrain.csv", history_csv(s.pretrain_history));
  a.put("history.csv", history_csv(s.history));
  return a;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& s, const RunConfig& cfg) {
  checkpoint_archive(s, cfg).write(path);
}

struct CheckpointMeta {
  std::size_t iter = 0;
  std::size_t pretrain_done = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

inline CheckpointMeta read_meta(const Archive& a) {
  const auto kv = parse_kv(a.get("meta.txt"));
  auto need = [&](const char* k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw CheckpointError(std::string("checkpoint meta.txt lacks '") + k + "'");
    return it->second;
  };
  CheckpointMeta m;
  m.iter = detail::parse_number<std::size_t>("iter", need("iter"));
  m.pretrain_done = detail::parse_number<std::size_t>("pretrain_done", need("pretrain_done"));
  m.seed = detail::parse_number<std::uint64_t>("seed", need("seed"));
  m.config_digest = need("config_digest");
  return m;
}

/// Network only, architecture taken from the archive (for evaluation).
template <typename T>
NetworkBundle<T> load_bundle(const std::filesystem::path& path) {
  const auto a = Archive::read(path);
  Rng rng(0);
  auto b = build_bundle<T>(detail::read_arch(a), rng);
  detail::load_params(a, b);
  return b;
}

/// Full training state. The archive's architecture must equal cfg.arch.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const RunConfig& cfg) {
  const auto a = Archive::read(path);
  const auto arch = detail::read_arch(a);
  if (!(arch == cfg.arch)) throw CheckpointError("checkpoint architecture differs from the configured one: " + path.string());
  auto s = init_state<T>(arch, cfg.train);
  detail::load_params(a, s.bundle);
  detail::load_adam(a, s.opt_gen);
  detail::load_adam(a, s.opt_d_pred);
  detail::load_adam(a, s.opt_d_feat);
  s.rng.set_state(a.get("rng.txt"));
  const auto meta = read_meta(a);
  const auto kv = parse_kv(a.get("meta.txt"));
  s.iter = meta.iter;
  s.pretrain_done = meta.pretrain_done;
  s.d_pred_updates = detail::parse_number<std::size_t>("d_pred_updates", kv.at("d_pred_updates"));
  s.d_feat_updates = detail::parse_number<std::size_t>("d_feat_updates", kv.at("d_feat_updates"));
  s.pretrain_history = parse_history_csv(a.get("pretrain.csv"));
  s.history = parse_history_csv(a.get("history.csv"));
  return s;
}

}  // namespace apma
