#pragma once

// Flat `key = value` configuration covering all four sections.

#include "apma/eval.hpp"
#include "apma/nets.hpp"
#include "apma/random.hpp"
#include "apma/synth.hpp"
#include "apma/trainer.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

namespace apma {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(std::string_view key, std::string_view v) {
  N out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

}  // namespace detail

/// Everything a command needs: dataset, architecture, training, evaluation.
struct RunConfig {
  SynthConfig synth{};
  ArchConfig arch{};
  TrainConfig train{};
  EvalOptions eval{};

  static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed fields are stored as size_t entries");
  using Field = std::variant<double*, std::size_t*, bool*>;
  struct Entry {
    const char* key;
    Field field;
  };

  /// Every recognized key, in output order.
  std::vector<Entry> entries() {
    auto& s = synth;
    auto& a = arch;
    auto& t = train;
    auto& e = eval;
    return {
        {"synth.canvas_size", &s.canvas_size},
        {"synth.blob_count_min", &s.blob_count_min},
        {"synth.blob_count_max", &s.blob_count_max},
        {"synth.blob_radius_min", &s.blob_radius_min},
        {"synth.blob_radius_max", &s.blob_radius_max},
        {"synth.membrane_width", &s.membrane_width},
        {"synth.background_level", &s.background_level},
        {"synth.foreground_contrast", &s.foreground_contrast},
        {"synth.membrane_depth", &s.membrane_depth},
        {"synth.texture_frequency", &s.source_texture.frequency},
        {"synth.texture_amplitude", &s.source_texture.amplitude},
        {"synth.shift_invert", &s.target_shift.invert},
        {"synth.shift_frequency_delta", &s.target_shift.frequency_delta},
        {"synth.shift_noise_sigma", &s.target_shift.noise_sigma},
        {"synth.shift_contrast_scale", &s.target_shift.contrast_scale},
        {"synth.n_train_source", &s.n_train_source},
        {"synth.n_train_target", &s.n_train_target},
        {"synth.n_test_target", &s.n_test_target},
        {"synth.seed", &s.seed},
        {"arch.in_channels", &a.in_channels},
        {"arch.base_width", &a.base_width},
        {"arch.depth", &a.depth},
        {"arch.disc_width", &a.disc_width},
        {"arch.disc_depth", &a.disc_depth},
        {"arch.leaky_slope", &a.leaky_slope},
        {"train.lr0", &t.lr0},
        {"train.poly_power", &t.poly_power},
        {"train.total_iters", &t.total_iters},
        {"train.pretrain_iters", &t.pretrain_iters},
        {"train.batch_size", &t.batch_size},
        {"train.patch", &t.patch},
        {"train.lambda_rec", &t.weights.lambda_rec},
        {"train.lambda_feat", &t.weights.lambda_feat},
        {"train.lambda_pred", &t.weights.lambda_pred},
        {"train.en", &t.ablation.en},
        {"train.de_feat", &t.ablation.de_feat},
        {"train.de_pred", &t.ablation.de_pred},
        {"train.seed", &t.seed},
        {"train.adam_beta1", &t.adam.beta1},
        {"train.adam_beta2", &t.adam.beta2},
        {"train.adam_eps", &t.adam.eps},
        {"train.checkpoint_every", &t.checkpoint_every},
        {"train.disc_steps", &t.disc_steps},
        {"train.augment", &t.augment},
        {"eval.threshold", &e.threshold},
        {"eval.tile", &e.tile},
        {"eval.overlap", &e.overlap},
        {"eval.tile_batch", &e.tile_batch},
        {"eval.per_section", &e.per_section},
    };
  }

  void set(std::string_view key, std::string_view value) {
    for (auto& en : entries()) {
      if (key != en.key) continue;
      std::visit(
          [&](auto* p) {
            using V = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<V, bool>)
              *p = detail::parse_bool(key, value);
            else
              *p = detail::parse_number<V>(key, value);
          },
          en.field);
      return;
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  std::string get(std::string_view key) const {
    for (auto& en : const_cast<RunConfig*>(this)->entries())
      if (key == en.key) return render(en.field);
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  /// Lines for the keys whose name starts with `prefix` ("" for all).
  std::string to_text(std::string_view prefix = "") const {
    std::ostringstream os;
    for (auto& en : const_cast<RunConfig*>(this)->entries())
      if (std::string_view(en.key).starts_with(prefix)) os << en.key << " = " << render(en.field) << "\n";
    return os.str();
  }

  std::string digest() const {
    Fnv1a h;
    h.update(to_text());
    return h.hex();
  }

  void validate() const {
    synth.validate();
    arch.validate();
    train.validate();
    if (train.patch % arch.stride_multiple())
      throw ConfigError("train.patch must be a multiple of " + std::to_string(arch.stride_multiple()));
    if (train.patch > synth.canvas_size) throw ConfigError("train.patch exceeds synth.canvas_size");
  }

  /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
  void apply_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      auto s = detail::trim(line);
      if (s.empty() || s.front() == '#') continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      try {
        set(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void apply_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    apply_text(ss.str(), path.string());
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    RunConfig c;
    c.apply_file(path);
    return c;
  }

 private:
  static std::string render(const Field& f) {
    return std::visit(
        [](auto* p) -> std::string {
          using V = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<V, bool>)
            return *p ? "true" : "false";
          else if constexpr (std::is_same_v<V, double>)
            return format_double(*p);
          else
            return std::to_string(*p);
        },
        f);
  }
};

/// Parses `key = value` lines into a map (used for manifests and meta entries).
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto s = detail::trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) continue;
    out[std::string(detail::trim(s.substr(0, eq)))] = std::string(detail::trim(s.substr(eq + 1)));
  }
  return out;
}

}  // namespace apma
