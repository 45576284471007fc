#pragma once

#include "apma/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam state for one parameter group. The group's parameters are passed to
/// step() in a fixed order, so the state stays valid when the owning bundle is
/// copied. Parameters without an allocated gradient buffer are skipped,
/// moments and step count included.
template <typename T>
class Adam {
 public:
  struct Slot {
    std::string name;
    Tensor<T> m, v;
    std::uint64_t steps = 0;
  };

  Adam() = default;
  Adam(std::string group, const std::vector<Component<T>*>& comps, AdamConfig cfg = {})
      : group_(std::move(group)), cfg_(cfg) {
    for (auto* c : comps)
      for (auto& p : c->params()) slots_.push_back({p.name, Tensor<T>(p.var.shape()), Tensor<T>(p.var.shape()), 0});
  }

  const std::string& group() const { return group_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

  /// Drops gradient buffers of the group's parameters.
  static void release_grads(const std::vector<Component<T>*>& comps) {
    for (auto* c : comps)
      for (auto& p : c->params()) p.var.node()->grad = Tensor<T>();
  }

  /// Returns the number of parameter tensors updated.
  std::size_t step(const std::vector<Component<T>*>& comps, double lr) {
    std::size_t idx = 0, updated = 0;
    for (auto* c : comps)
      for (auto& p : c->params()) {
        if (idx >= slots_.size() || slots_[idx].name != p.name)
          throw std::logic_error("optimizer group '" + group_ + "' does not match parameter " + p.name);
        Slot& s = slots_[idx++];
        if (!p.var.has_grad()) continue;
        ++s.steps;
        ++updated;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.steps));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.steps));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T step = static_cast<T>(lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(cfg_.eps);
        auto& w = p.var.mutable_value();
        const auto& g = p.var.node()->grad;
        for (std::size_t i = 0; i < w.size(); ++i) {
          s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
          s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
          w[i] -= step * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
        }
      }
    if (idx != slots_.size()) throw std::logic_error("optimizer group '" + group_ + "' has stale slots");
    return updated;
  }

 private:
  std::string group_;
  AdamConfig cfg_{};
  std::vector<Slot> slots_;
};

}  // namespace apma
