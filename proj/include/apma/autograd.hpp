#pragma once

// Minimal reverse-mode differentiation over NCHW tensors.
//
// A Var wraps a shared graph node. Operations record a backward closure only
// when gradients are enabled and at least one input requires them, so the
// same code path serves training (float) and gradient checking (double).

#include "apma/detail/gemm.hpp"
#include "apma/tensor.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace apma {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  static Var leaf(Tensor<T> v, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(T(0));
  }

  /// Same value, cut from the graph.
  Var detach() const { return constant(node_->value); }

  /// Scalar value of a one-element Var.
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Builds an op result; `bw` is only kept when the graph is being recorded.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode())
    for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Var<T>(std::move(n));
}

template <typename T>
Tensor<T> scalar_tensor(T v) {
  return Tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{v});
}

}  // namespace detail

/// Back-propagates d(root)/d(leaf) into every reachable leaf grad (accumulating).
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(T(0));
  root.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
      // Intermediate grads are consumed once; free them.
      n->grad = Tensor<T>();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y(x.shape(), uninit);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xn = x.node();
  return detail::make_result<T>(std::move(y), {xn}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> y(x.shape(), uninit);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  auto xn = x.node();
  return detail::make_result<T>(std::move(y), {xn}, [xn, slope](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += xn->value[i] > T(0) ? self.grad[i] : slope * self.grad[i];
  });
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

/// log(1 + exp(z)) without overflow.
template <typename T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y(x.shape(), uninit);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(x.value()[i]);
  auto xn = x.node();
  return detail::make_result<T>(std::move(y), {xn}, [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: incompatible " + sa.str() + " and " + sb.str());
  Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> y(so, uninit);
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().sample(n), pa, y.sample(n));
    std::copy_n(b.value().sample(n), pb, y.sample(n) + pa);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(std::move(y), {an, bn}, [an, bn, pa, pb](Node<T>& self) {
    const std::size_t N = self.value.shape().n;
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < pa; ++i) g.sample(n)[i] += self.grad.sample(n)[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < pb; ++i) g.sample(n)[i] += self.grad.sample(n)[pa + i];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * a.value()[i];
  auto an = a.node();
  return detail::make_result<T>(std::move(y), {an}, [an, s](Node<T>& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions, pooling, normalization.

namespace detail {

// Range of output columns [lo, hi) whose input column ox*s + kx - p lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_cols(std::size_t w, std::size_t kx, std::size_t s, std::size_t p,
                                                      std::size_t wo) {
  const std::size_t lo = kx >= p ? 0 : (p - kx + s - 1) / s;
  const std::size_t hi = (w + p < kx + 1) ? 0 : std::min(wo, (w + p - kx - 1) / s + 1);
  return {std::min(lo, hi), hi};
}

// cols[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s - p + ky][ox*s - p + kx], zero outside.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        const auto [lo, hi] = valid_cols(w, kx, s, p, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(out, wo, T(0));
            continue;
          }
          const T* in = x + static_cast<std::ptrdiff_t>((ci * h + static_cast<std::size_t>(iy)) * w + kx) -
                        static_cast<std::ptrdiff_t>(p);
          std::fill_n(out, lo, T(0));
          if (s == 1)
            std::copy(in + lo, in + hi, out + lo);
          else
            for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = in[ox * s];
          std::fill(out + hi, out + wo, T(0));
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        const auto [lo, hi] = valid_cols(w, kx, s, p, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* out = dx + static_cast<std::ptrdiff_t>((ci * h + static_cast<std::size_t>(iy)) * w + kx) -
                   static_cast<std::ptrdiff_t>(p);
          const T* in = row + oy * wo;
          for (std::size_t ox = lo; ox < hi; ++ox) out[ox * s] += in[ox];
        }
      }
}

}  // namespace detail

/// 2-D convolution. weight: (Cout, Cin, k, k); bias: (1, Cout, 1, 1).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  const Shape sx = x.shape(), sw = weight.shape();
  if (sw.c != sx.c)
    throw ShapeError("conv2d: input has " + std::to_string(sx.c) + " channels, weight expects " +
                     std::to_string(sw.c));
  const std::size_t k = sw.h;
  if (sx.h + 2 * pad < k || sx.w + 2 * pad < k) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t ho = (sx.h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (sx.w + 2 * pad - k) / stride + 1;
  const std::size_t ck = sx.c * k * k, hw = ho * wo, cout = sw.n;
  const bool one_by_one = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> y(Shape{sx.n, cout, ho, wo}, uninit);
  auto cols = std::make_shared<typename Tensor<T>::Storage>(one_by_one ? 0 : sx.n * ck * hw);
  for (std::size_t n = 0; n < sx.n; ++n) {
    const T* src = x.value().sample(n);
    if (!one_by_one) {
      T* cn = cols->data() + n * ck * hw;
      detail::im2col(src, sx.c, sx.h, sx.w, k, stride, pad, ho, wo, cn);
      src = cn;
    }
    detail::gemm(detail::Trans::no, detail::Trans::no, cout, hw, ck, weight.value().data(), src, y.sample(n), false);
    for (std::size_t co = 0; co < cout; ++co) {
      T* py = y.plane(n, co);
      const T b = bias.value()[co];
      for (std::size_t i = 0; i < hw; ++i) py[i] += b;
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(
      std::move(y), {xn, wn, bn},
      [xn, wn, bn, cols, sx, k, stride, pad, ho, wo, ck, hw, cout, one_by_one](Node<T>& self) {
        typename Tensor<T>::Storage dcols(xn->requires_grad && !one_by_one ? ck * hw : 0);
        for (std::size_t n = 0; n < sx.n; ++n) {
          const T* dy = self.grad.sample(n);
          const T* cn = one_by_one ? xn->value.sample(n) : cols->data() + n * ck * hw;
          if (wn->requires_grad)
            detail::gemm(detail::Trans::no, detail::Trans::yes, cout, ck, hw, dy, cn, wn->ensure_grad().data(), true);
          if (bn->requires_grad) {
            auto& gb = bn->ensure_grad();
            for (std::size_t co = 0; co < cout; ++co) {
              const T* p = dy + co * hw;
              T acc = T(0);
              for (std::size_t i = 0; i < hw; ++i) acc += p[i];
              gb[co] += acc;
            }
          }
          if (xn->requires_grad) {
            T* dx = xn->ensure_grad().sample(n);
            if (one_by_one) {
              detail::gemm(detail::Trans::yes, detail::Trans::no, ck, hw, cout, wn->value.data(), dy, dx, true);
            } else {
              detail::gemm(detail::Trans::yes, detail::Trans::no, ck, hw, cout, wn->value.data(), dy, dcols.data(),
                           false);
              detail::col2im(dcols.data(), sx.c, sx.h, sx.w, k, stride, pad, ho, wo, dx);
            }
          }
        }
      });
}

/// 2x2 stride-2 transposed convolution (doubles H and W).
/// weight: (Cin, Cout, 2, 2); bias: (1, Cout, 1, 1).
template <typename T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape sx = x.shape(), sw = weight.shape();
  if (sw.n != sx.c || sw.h != 2 || sw.w != 2)
    throw ShapeError("conv_transpose2x2: weight " + sw.str() + " incompatible with input " + sx.str());
  const std::size_t cin = sx.c, cout = sw.c, hw = sx.plane();
  Tensor<T> y(Shape{sx.n, cout, sx.h * 2, sx.w * 2}, uninit);
  typename Tensor<T>::Storage tmp(cout * 4 * hw);
  for (std::size_t n = 0; n < sx.n; ++n) {
    // tmp[(co*4 + a*2 + b)][i] = sum_ci W[ci][co*4+a*2+b] * x[ci][i]
    detail::gemm(detail::Trans::yes, detail::Trans::no, cout * 4, hw, cin, weight.value().data(), x.value().sample(n),
                 tmp.data(), false);
    for (std::size_t co = 0; co < cout; ++co) {
      const T b = bias.value()[co];
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t bb = 0; bb < 2; ++bb) {
          const T* t = tmp.data() + (co * 4 + a * 2 + bb) * hw;
          for (std::size_t iy = 0; iy < sx.h; ++iy)
            for (std::size_t ix = 0; ix < sx.w; ++ix) y.at(n, co, 2 * iy + a, 2 * ix + bb) = t[iy * sx.w + ix] + b;
        }
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(std::move(y), {xn, wn, bn}, [xn, wn, bn, sx, cin, cout, hw](Node<T>& self) {
    typename Tensor<T>::Storage dtmp(cout * 4 * hw);
    for (std::size_t n = 0; n < sx.n; ++n) {
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bb = 0; bb < 2; ++bb) {
            T* t = dtmp.data() + (co * 4 + a * 2 + bb) * hw;
            for (std::size_t iy = 0; iy < sx.h; ++iy)
              for (std::size_t ix = 0; ix < sx.w; ++ix) t[iy * sx.w + ix] = self.grad.at(n, co, 2 * iy + a, 2 * ix + bb);
          }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t co = 0; co < cout; ++co) {
          T acc = T(0);
          for (std::size_t j = 0; j < 4 * hw; ++j) acc += dtmp[co * 4 * hw + j];
          gb[co] += acc;
        }
      }
      if (wn->requires_grad)
        detail::gemm(detail::Trans::no, detail::Trans::yes, cin, cout * 4, hw, xn->value.sample(n), dtmp.data(),
                     wn->ensure_grad().data(), true);
      if (xn->requires_grad)
        detail::gemm(detail::Trans::no, detail::Trans::no, cin, hw, cout * 4, wn->value.data(), dtmp.data(),
                     xn->ensure_grad().sample(n), true);
    }
  });
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Shape sx = x.shape();
  if (sx.h % 2 || sx.w % 2) throw ShapeError("max_pool2: odd spatial size " + sx.str());
  Shape so{sx.n, sx.c, sx.h / 2, sx.w / 2};
  Tensor<T> y(so, uninit);
  auto argmax = std::make_shared<std::vector<std::size_t>>(so.numel());
  for (std::size_t n = 0; n < sx.n; ++n)
    for (std::size_t c = 0; c < sx.c; ++c) {
      const T* in = x.value().plane(n, c);
      const std::size_t base = (n * sx.c + c) * sx.plane();
      for (std::size_t oy = 0; oy < so.h; ++oy)
        for (std::size_t ox = 0; ox < so.w; ++ox) {
          std::size_t best = (2 * oy) * sx.w + 2 * ox;
          for (std::size_t idx : {best + 1, best + sx.w, best + sx.w + 1})
            if (in[idx] > in[best]) best = idx;
          const std::size_t o = ((n * sx.c + c) * so.h + oy) * so.w + ox;
          y[o] = in[best];
          (*argmax)[o] = base + best;
        }
    }
  auto xn = x.node();
  return detail::make_result<T>(std::move(y), {xn}, [xn, argmax](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

/// Per-sample, per-channel normalization with learned affine (gamma, beta: (1, C, 1, 1)).
/// Statistics come from the input itself, so training and inference behave identically.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape sx = x.shape();
  const std::size_t hw = sx.plane();
  Tensor<T> y(sx, uninit);
  auto xhat = std::make_shared<Tensor<T>>(sx, uninit);
  auto inv_std = std::make_shared<std::vector<T>>(sx.n * sx.c);
  for (std::size_t n = 0; n < sx.n; ++n)
    for (std::size_t c = 0; c < sx.c; ++c) {
      const T* in = x.value().plane(n, c);
      double mean = 0;
      for (std::size_t i = 0; i < hw; ++i) mean += in[i];
      mean /= static_cast<double>(hw);
      double var = 0;
      for (std::size_t i = 0; i < hw; ++i) var += (in[i] - mean) * (in[i] - mean);
      var /= static_cast<double>(hw);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*inv_std)[n * sx.c + c] = is;
      T* xh = xhat->plane(n, c);
      T* out = y.plane(n, c);
      const T g = gamma.value()[c], b = beta.value()[c];
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = static_cast<T>(in[i] - mean) * is;
        out[i] = g * xh[i] + b;
      }
    }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(std::move(y), {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, sx, hw](Node<T>& self) {
    for (std::size_t n = 0; n < sx.n; ++n)
      for (std::size_t c = 0; c < sx.c; ++c) {
        const T* dy = self.grad.plane(n, c);
        const T* xh = xhat->plane(n, c);
        T sum_dy = 0, sum_dy_xh = 0;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[i];
          sum_dy_xh += dy[i] * xh[i];
        }
        if (gn->requires_grad) gn->ensure_grad()[c] += sum_dy_xh;
        if (bn->requires_grad) bn->ensure_grad()[c] += sum_dy;
        if (xn->requires_grad) {
          const T g = gn->value[c];
          const T scale = g * (*inv_std)[n * sx.c + c] / static_cast<T>(hw);
          T* dx = xn->ensure_grad().plane(n, c);
          const T m = static_cast<T>(hw);
          for (std::size_t i = 0; i < hw; ++i) dx[i] += scale * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
      }
  });
}

}  // namespace apma
