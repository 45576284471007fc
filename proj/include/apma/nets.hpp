#pragma once

// The five trainable components: a shared encoder, a skip-connected
// segmentation decoder, a skip-free reconstruction decoder, and two patch
// discriminators (one on the probability map, one on the final decoder
// features).

#include "apma/autograd.hpp"
#include "apma/random.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

struct ArchConfig {
  std::size_t in_channels = 1;
  std::size_t base_width = 16;
  std::size_t depth = 3;
  std::size_t disc_width = 32;
  std::size_t disc_depth = 3;
  double leaky_slope = 0.2;

  void validate() const {
    if (in_channels != 1) throw std::invalid_argument("arch.in_channels must be 1");
    if (depth < 1) throw std::invalid_argument("arch.depth must be >= 1");
    if (base_width < 1 || disc_width < 1) throw std::invalid_argument("arch widths must be >= 1");
    if (disc_depth < 1) throw std::invalid_argument("arch.disc_depth must be >= 1");
  }
  /// Spatial sides must be divisible by this.
  std::size_t stride_multiple() const { return std::size_t{1} << depth; }
  /// Channel count of the final decoder feature map.
  std::size_t feature_channels() const { return base_width; }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

template <typename T>
struct Param {
  std::string name;
  Var<T> var;
};

/// Ordered, named parameter list of one component.
template <typename T>
class Component {
 public:
  explicit Component(std::string name = {}) : name_(std::move(name)) {}

  // Copies are deep: a copied component owns fresh parameter nodes.
  Component(const Component& o) : name_(o.name_), index_(o.index_) {
    params_.reserve(o.params_.size());
    for (const auto& p : o.params_)
      params_.push_back({p.name, Var<T>::leaf(p.var.value(), p.var.requires_grad())});
  }
  Component& operator=(const Component& o) {
    if (this != &o) *this = Component(o);
    return *this;
  }
  Component(Component&&) noexcept = default;
  Component& operator=(Component&&) noexcept = default;

  const std::string& name() const { return name_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  const Var<T>& add(const std::string& local, Tensor<T> init) {
    params_.push_back({name_ + "." + local, Var<T>::leaf(std::move(init), true)});
    index_[params_.back().name] = params_.size() - 1;
    return params_.back().var;
  }
  const Var<T>& get(const std::string& local) const { return params_.at(index_.at(name_ + "." + local)).var; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }
  void set_trainable(bool on) {
    for (auto& p : params_) p.var.set_requires_grad(on);
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

  /// Hash over names and raw parameter bytes.
  std::uint64_t digest() const {
    Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      h.update(p.var.value().data(), p.var.value().size() * sizeof(T));
    }
    return h.value();
  }

 private:
  std::string name_;
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
Tensor<T> he_normal(Shape s, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(s);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <typename T>
void add_conv(Component<T>& c, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
  c.add(prefix + ".weight", he_normal<T>(Shape{cout, cin, k, k}, cin * k * k, rng));
  c.add(prefix + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
}

template <typename T>
void add_norm(Component<T>& c, const std::string& prefix, std::size_t ch) {
  c.add(prefix + ".gamma", Tensor<T>(Shape{1, ch, 1, 1}, T(1)));
  c.add(prefix + ".beta", Tensor<T>(Shape{1, ch, 1, 1}));
}

// [conv3x3 -> instance norm -> relu] x 2
template <typename T>
void add_block(Component<T>& c, const std::string& level, std::size_t cin, std::size_t cout, Rng& rng) {
  add_conv(c, level + ".conv1", cin, cout, 3, rng);
  add_norm(c, level + ".norm1", cout);
  add_conv(c, level + ".conv2", cout, cout, 3, rng);
  add_norm(c, level + ".norm2", cout);
}

template <typename T>
Var<T> run_block(const Component<T>& c, const std::string& level, const Var<T>& x) {
  auto h = conv2d(x, c.get(level + ".conv1.weight"), c.get(level + ".conv1.bias"), 1, 1);
  h = relu(instance_norm(h, c.get(level + ".norm1.gamma"), c.get(level + ".norm1.beta")));
  h = conv2d(h, c.get(level + ".conv2.weight"), c.get(level + ".conv2.bias"), 1, 1);
  return relu(instance_norm(h, c.get(level + ".norm2.gamma"), c.get(level + ".norm2.beta")));
}

}  // namespace detail

/// Encoder output: the bottleneck plus one skip tensor per level (finest first).
template <typename T>
struct EncoderOutput {
  Var<T> bottleneck;
  std::vector<Var<T>> skips;
};

/// Segmentation head output: probabilities `p` and the features `f` feeding the 1x1 output conv.
template <typename T>
struct GeOutputs {
  Var<T> p;
  Var<T> f;
};

template <typename T>
struct NetworkBundle {
  ArchConfig arch;
  Component<T> encoder{"encoder"};
  Component<T> seg_decoder{"seg_decoder"};
  Component<T> rec_decoder{"rec_decoder"};
  Component<T> d_pred{"d_pred"};
  Component<T> d_feat{"d_feat"};

  std::vector<Component<T>*> components() { return {&encoder, &seg_decoder, &rec_decoder, &d_pred, &d_feat}; }
  std::vector<const Component<T>*> components() const {
    return {&encoder, &seg_decoder, &rec_decoder, &d_pred, &d_feat};
  }
  /// Encoder plus both decoders.
  std::vector<Component<T>*> generator() { return {&encoder, &seg_decoder, &rec_decoder}; }

  void zero_grad() {
    for (auto* c : components()) c->zero_grad();
  }
};

namespace detail {

inline std::string lvl(std::size_t l) { return std::to_string(l); }

template <typename T>
void build_decoder(Component<T>& c, const ArchConfig& a, bool skips, Rng& rng) {
  for (std::size_t l = a.depth; l-- > 0;) {
    const std::size_t wide = a.base_width << (l + 1), narrow = a.base_width << l;
    c.add(lvl(l) + ".up.weight", he_normal<T>(Shape{wide, narrow, 2, 2}, wide, rng));
    c.add(lvl(l) + ".up.bias", Tensor<T>(Shape{1, narrow, 1, 1}));
    add_block(c, lvl(l), skips ? 2 * narrow : narrow, narrow, rng);
  }
  add_conv(c, "out.conv", a.base_width, 1, 1, rng);
}

template <typename T>
void build_disc(Component<T>& c, const ArchConfig& a, std::size_t cin, Rng& rng) {
  std::size_t ch = cin;
  for (std::size_t i = 0; i < a.disc_depth; ++i) {
    const std::size_t out = a.disc_width << i;
    add_conv(c, lvl(i) + ".conv", ch, out, 4, rng);
    ch = out;
  }
  add_conv(c, lvl(a.disc_depth) + ".conv", ch, 1, 3, rng);
}

}  // namespace detail

/// Builds all five components with He-normal weights drawn from `rng` in a fixed order.
template <typename T>
NetworkBundle<T> build_bundle(const ArchConfig& arch, Rng& rng) {
  arch.validate();
  NetworkBundle<T> b;
  b.arch = arch;
  std::size_t ch = arch.in_channels;
  for (std::size_t l = 0; l <= arch.depth; ++l) {
    const std::size_t out = arch.base_width << l;
    detail::add_block(b.encoder, detail::lvl(l), ch, out, rng);
    ch = out;
  }
  detail::build_decoder(b.seg_decoder, arch, true, rng);
  detail::build_decoder(b.rec_decoder, arch, false, rng);
  detail::build_disc(b.d_pred, arch, 1, rng);
  detail::build_disc(b.d_feat, arch, arch.feature_channels(), rng);
  return b;
}

template <typename T>
void check_input(const NetworkBundle<T>& b, const Shape& s) {
  const std::size_t m = b.arch.stride_multiple();
  if (s.c != b.arch.in_channels)
    throw ShapeError("network input must have " + std::to_string(b.arch.in_channels) + " channel(s), got " + s.str());
  if (s.h == 0 || s.w == 0 || s.h % m || s.w % m)
    throw ShapeError("input spatial size " + s.str() + " not divisible by " + std::to_string(m));
}

template <typename T>
EncoderOutput<T> encode(const NetworkBundle<T>& b, const Var<T>& x) {
  check_input(b, x.shape());
  EncoderOutput<T> out;
  Var<T> h = x;
  for (std::size_t l = 0; l < b.arch.depth; ++l) {
    h = detail::run_block(b.encoder, detail::lvl(l), h);
    out.skips.push_back(h);
    h = max_pool2(h);
  }
  out.bottleneck = detail::run_block(b.encoder, detail::lvl(b.arch.depth), h);
  return out;
}

namespace detail {

template <typename T>
Var<T> decode_features(const Component<T>& c, const ArchConfig& a, const EncoderOutput<T>& enc, bool skips) {
  Var<T> h = enc.bottleneck;
  for (std::size_t l = a.depth; l-- > 0;) {
    h = conv_transpose2x2(h, c.get(lvl(l) + ".up.weight"), c.get(lvl(l) + ".up.bias"));
    if (skips) h = concat_channels(h, enc.skips.at(l));
    h = run_block(c, lvl(l), h);
  }
  return h;
}

}  // namespace detail

/// The 1x1 output convolution of the segmentation decoder, returning logits.
template <typename T>
Var<T> seg_output_logits(const NetworkBundle<T>& b, const Var<T>& f) {
  return conv2d(f, b.seg_decoder.get("out.conv.weight"), b.seg_decoder.get("out.conv.bias"), 1, 0);
}

template <typename T>
GeOutputs<T> decode_seg(const NetworkBundle<T>& b, const EncoderOutput<T>& enc) {
  GeOutputs<T> out;
  out.f = detail::decode_features(b.seg_decoder, b.arch, enc, true);
  out.p = sigmoid(seg_output_logits(b, out.f));
  return out;
}

/// Reconstruction from the bottleneck only; `enc.skips` are never read.
template <typename T>
Var<T> decode_rec(const NetworkBundle<T>& b, const EncoderOutput<T>& enc) {
  const auto h = detail::decode_features(b.rec_decoder, b.arch, enc, false);
  return sigmoid(conv2d(h, b.rec_decoder.get("out.conv.weight"), b.rec_decoder.get("out.conv.bias"), 1, 0));
}

template <typename T>
GeOutputs<T> forward_ge(const NetworkBundle<T>& b, const Var<T>& x) {
  return decode_seg(b, encode(b, x));
}

template <typename T>
Var<T> forward_ae(const NetworkBundle<T>& b, const Var<T>& x) {
  return decode_rec(b, encode(b, x));
}

/// Patch discriminator: stride-2 4x4 convs with leaky ReLU, then a 3x3 conv to one logit channel.
template <typename T>
Var<T> forward_disc(const Component<T>& disc, const ArchConfig& a, const Var<T>& input) {
  const std::size_t expect = disc.get("0.conv.weight").shape().c;
  if (input.shape().c != expect)
    throw ShapeError(disc.name() + " expects " + std::to_string(expect) + " input channel(s), got " +
                     input.shape().str());
  const std::size_t m = std::size_t{1} << a.disc_depth;
  if (input.shape().h % m || input.shape().w % m)
    throw ShapeError(disc.name() + " input " + input.shape().str() + " not divisible by " + std::to_string(m));
  Var<T> h = input;
  for (std::size_t i = 0; i < a.disc_depth; ++i) {
    h = conv2d(h, disc.get(detail::lvl(i) + ".conv.weight"), disc.get(detail::lvl(i) + ".conv.bias"), 2, 1);
    h = leaky_relu(h, static_cast<T>(a.leaky_slope));
  }
  const std::string last = detail::lvl(a.disc_depth) + ".conv";
  return conv2d(h, disc.get(last + ".weight"), disc.get(last + ".bias"), 1, 1);
}

}  // namespace apma
