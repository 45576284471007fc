#pragma once

// Segmentation, reconstruction, and adversarial objectives.
//
// Every loss is a per-pixel mean over the minibatch. Adversarial losses take
// discriminator logits and are evaluated in softplus form, so they stay finite
// for any finite logit. Source is the discriminator's positive class.

#include "apma/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace apma {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trade-off weights of the composite objectives.
struct LossWeights {
  double lambda_rec = 1e-3;
  double lambda_feat = 1e-3;
  double lambda_pred = 1e-3;

  void validate() const {
    for (double v : {lambda_rec, lambda_feat, lambda_pred})
      if (!std::isfinite(v) || v < 0) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
};

/// Scalar loss terms from one forward pass. Disabled terms stay at zero.
struct LossValues {
  double seg = 0;
  double rec = 0;
  double d_pred_loss = 0;
  double d_feat_loss = 0;
  double g_pred_loss = 0;
  double g_feat_loss = 0;
};

inline constexpr double kProbEps = 1e-7;

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) throw NumericalError(std::string(what) + ": non-finite input at index " + std::to_string(i));
}

}  // namespace detail

/// Binary cross-entropy of probabilities `p` against binary `y`, with p clamped to [eps, 1-eps].
template <typename T>
Var<T> seg_loss(const Var<T>& p, const Tensor<T>& y) {
  require_same_shape(p.shape(), y.shape(), "seg_loss");
  detail::require_finite(p.value(), "seg_loss");
  const std::size_t n = y.size();
  const double lo = kProbEps, hi = 1.0 - kProbEps;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(static_cast<double>(p.value()[i]), lo, hi);
    acc -= y[i] > T(0.5) ? std::log(q) : std::log1p(-q);
  }
  auto pn = p.node();
  return detail::make_result<T>(detail::scalar_tensor(static_cast<T>(acc / static_cast<double>(n))), {pn},
                                [pn, y, n, lo, hi](Node<T>& self) {
                                  auto& g = pn->ensure_grad();
                                  const double up = self.grad[0] / static_cast<double>(n);
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const double q = pn->value[i];
                                    if (q < lo || q > hi) continue;
                                    const double d = y[i] > T(0.5) ? -1.0 / q : 1.0 / (1.0 - q);
                                    g[i] += static_cast<T>(up * d);
                                  }
                                });
}

/// Mean squared error between a reconstruction and its (constant) input.
template <typename T>
Var<T> mse_loss(const Var<T>& recon, const Tensor<T>& x) {
  require_same_shape(recon.shape(), x.shape(), "mse_loss");
  const std::size_t n = x.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(recon.value()[i]) - x[i];
    acc += d * d;
  }
  auto rn = recon.node();
  return detail::make_result<T>(detail::scalar_tensor(static_cast<T>(acc / static_cast<double>(n))), {rn},
                                [rn, x, n](Node<T>& self) {
                                  auto& g = rn->ensure_grad();
                                  const double up = 2.0 * self.grad[0] / static_cast<double>(n);
                                  for (std::size_t i = 0; i < n; ++i)
                                    g[i] += static_cast<T>(up * (static_cast<double>(rn->value[i]) - x[i]));
                                });
}

/// Source reconstruction error plus target reconstruction error (one mean per domain).
template <typename T>
Var<T> rec_loss(const Tensor<T>& x_s, const Var<T>& xhat_s, const Tensor<T>& x_t, const Var<T>& xhat_t) {
  return add(mse_loss(xhat_s, x_s), mse_loss(xhat_t, x_t));
}

/// mean(softplus(sign * z)): -log sigma(z) for sign = -1, -log(1 - sigma(z)) for sign = +1.
template <typename T>
Var<T> softplus_mean(const Var<T>& z, int sign) {
  detail::require_finite(z.value(), "adversarial loss");
  const std::size_t n = z.value().size();
  const double sg = sign;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += softplus(sg * static_cast<double>(z.value()[i]));
  auto zn = z.node();
  return detail::make_result<T>(detail::scalar_tensor(static_cast<T>(acc / static_cast<double>(n))), {zn},
                                [zn, n, sg](Node<T>& self) {
                                  auto& g = zn->ensure_grad();
                                  const double up = self.grad[0] / static_cast<double>(n);
                                  for (std::size_t i = 0; i < n; ++i)
                                    g[i] += static_cast<T>(up * sg * stable_sigmoid(sg * zn->value[i]));
                                });
}

/// Discriminator loss: -[mean log sigma(score_s) + mean log(1 - sigma(score_t))].
template <typename T>
Var<T> disc_loss(const Var<T>& score_s, const Var<T>& score_t) {
  return add(softplus_mean(score_s, -1), softplus_mean(score_t, +1));
}

/// Generator adversarial loss with inverted labels: -mean log sigma(score_t).
template <typename T>
Var<T> gen_adv_loss(const Var<T>& score_t) {
  return softplus_mean(score_t, -1);
}

/// seg + lambda_rec*rec + lambda_feat*g_feat + lambda_pred*g_pred.
inline double generator_objective(const LossValues& lv, const LossWeights& w) {
  return lv.seg + w.lambda_rec * lv.rec + w.lambda_feat * lv.g_feat_loss + w.lambda_pred * lv.g_pred_loss;
}

/// lambda_feat*d_feat + lambda_pred*d_pred.
inline double discriminator_objective(double d_pred_loss, double d_feat_loss, const LossWeights& w) {
  return w.lambda_feat * d_feat_loss + w.lambda_pred * d_pred_loss;
}

/// Differentiable weighted sum of optional terms; null terms are skipped.
template <typename T>
Var<T> weighted_sum(std::initializer_list<std::pair<double, const Var<T>*>> terms) {
  Var<T> acc;
  bool first = true;
  for (const auto& [w, v] : terms) {
    if (v == nullptr || !v->node()) continue;
    Var<T> term = w == 1.0 ? *v : scale(*v, static_cast<T>(w));
    acc = first ? term : add(acc, term);
    first = false;
  }
  if (first) return Var<T>::constant(detail::scalar_tensor(T(0)));
  return acc;
}

}  // namespace apma
