#include "apma/autograd.hpp"
#include "apma/losses.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace apma;
using namespace apma::testing;

namespace {

using V = Var<double>;

// Checks every entry of every leaf against central differences of mse(f(leaves), target).
void check_op(std::vector<V> leaves, const std::function<V(const std::vector<V>&)>& f, std::uint64_t seed) {
  Rng rng(seed);
  const auto out_shape = [&] {
    NoGradGuard ng;
    return f(leaves).shape();
  }();
  const auto target = random_tensor<double>(out_shape, rng);
  std::vector<Probe> probes;
  for (auto& l : leaves)
    for (std::size_t i = 0; i < l.value().size(); ++i) probes.push_back({l, i, "leaf"});
  const auto r = grad_check([&] { return mse_loss(f(leaves), target); }, probes);
  EXPECT_EQ(r.checked, probes.size());
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

V leaf(Shape s, Rng& rng, double lo = -1, double hi = 1) { return V::leaf(random_tensor<double>(s, rng, lo, hi), true); }

}  // namespace

TEST(Autograd, ReluAwayFromKink) {
  Rng rng(1);
  auto x = leaf({2, 2, 3, 3}, rng);
  for (std::size_t i = 0; i < x.value().size(); ++i)
    if (std::abs(x.value()[i]) < 0.05) x.mutable_value()[i] = 0.3;
  check_op({x}, [](const std::vector<V>& v) { return relu(v[0]); }, 2);
}

TEST(Autograd, LeakyRelu) {
  Rng rng(3);
  auto x = leaf({1, 3, 4, 4}, rng);
  check_op({x}, [](const std::vector<V>& v) { return leaky_relu(v[0], 0.2); }, 4);
}

TEST(Autograd, Sigmoid) {
  Rng rng(5);
  check_op({leaf({1, 2, 3, 3}, rng, -4, 4)}, [](const std::vector<V>& v) { return sigmoid(v[0]); }, 6);
}

TEST(Autograd, ConcatAddScale) {
  Rng rng(7);
  auto a = leaf({2, 1, 3, 3}, rng), b = leaf({2, 2, 3, 3}, rng), c = leaf({2, 3, 3, 3}, rng);
  check_op({a, b, c}, [](const std::vector<V>& v) { return scale(add(concat_channels(v[0], v[1]), v[2]), -1.7); }, 8);
}

TEST(Autograd, Conv2dStridesAndPadding) {
  struct Case {
    std::size_t k, stride, pad, size;
  };
  for (const auto& cs : {Case{3, 1, 1, 6}, Case{4, 2, 1, 8}, Case{3, 1, 0, 5}, Case{1, 1, 0, 4}, Case{3, 2, 1, 7}}) {
    Rng rng(11 + cs.k * 10 + cs.stride);
    auto x = leaf({2, 3, cs.size, cs.size}, rng);
    auto w = leaf({4, 3, cs.k, cs.k}, rng);
    auto b = leaf({1, 4, 1, 1}, rng);
    check_op({x, w, b}, [&](const std::vector<V>& v) { return conv2d(v[0], v[1], v[2], cs.stride, cs.pad); }, 12);
  }
}

TEST(Autograd, Conv2dMatchesDirectSum) {
  Rng rng(13);
  const auto x = random_tensor<double>({1, 2, 5, 5}, rng), w = random_tensor<double>({3, 2, 3, 3}, rng),
             b = random_tensor<double>({1, 3, 1, 1}, rng);
  const auto y = conv2d(V::constant(x), V::constant(w), V::constant(b), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (std::size_t co = 0; co < 3; ++co)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double ref = b[co];
        for (std::size_t ci = 0; ci < 2; ++ci)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iy = static_cast<long>(oy * 2 + ky) - 1, ix = static_cast<long>(ox * 2 + kx) - 1;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              ref += w.at(co, ci, ky, kx) * x.at(0, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
        EXPECT_NEAR(y.at(0, co, oy, ox), ref, 1e-12);
      }
}

TEST(Autograd, ConvTranspose) {
  Rng rng(17);
  auto x = leaf({2, 3, 3, 4}, rng), w = leaf({3, 2, 2, 2}, rng), b = leaf({1, 2, 1, 1}, rng);
  check_op({x, w, b}, [](const std::vector<V>& v) { return conv_transpose2x2(v[0], v[1], v[2]); }, 18);
}

TEST(Autograd, ConvTransposeScattersEachInputToItsBlock) {
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> w({1, 1, 2, 2}, std::vector<double>{1, 10, 100, 1000});
  const auto y = conv_transpose2x2(V::constant(x), V::constant(w), V::constant(Tensor<double>({1, 1, 1, 1}))).value();
  EXPECT_EQ(y.at(0, 0, 0, 0), 1);
  EXPECT_EQ(y.at(0, 0, 0, 1), 10);
  EXPECT_EQ(y.at(0, 0, 1, 1), 1000);
  EXPECT_EQ(y.at(0, 0, 2, 1), 3 * 10);
  EXPECT_EQ(y.at(0, 0, 3, 3), 4 * 1000);
}

TEST(Autograd, MaxPool) {
  Rng rng(19);
  check_op({leaf({2, 2, 4, 6}, rng)}, [](const std::vector<V>& v) { return max_pool2(v[0]); }, 20);
}

TEST(Autograd, MaxPoolTieGoesToFirst) {
  auto x = V::leaf(Tensor<double>({1, 1, 2, 2}, 5.0), true);
  backward(mse_loss(max_pool2(x), Tensor<double>({1, 1, 1, 1}, 0.0)));
  EXPECT_EQ(x.grad()[0], 10.0);
  EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0.0);
}

TEST(Autograd, InstanceNorm) {
  Rng rng(23);
  auto x = leaf({2, 3, 4, 4}, rng), g = leaf({1, 3, 1, 1}, rng, 0.5, 1.5), b = leaf({1, 3, 1, 1}, rng);
  check_op({x, g, b}, [](const std::vector<V>& v) { return instance_norm(v[0], v[1], v[2]); }, 24);
}

TEST(Autograd, InstanceNormOutputStatistics) {
  Rng rng(29);
  const auto x = random_tensor<double>({2, 2, 5, 5}, rng, -3, 7);
  const auto y = instance_norm(V::constant(x), V::constant(Tensor<double>({1, 2, 1, 1}, 1.0)),
                               V::constant(Tensor<double>({1, 2, 1, 1}, 0.0)))
                     .value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < 25; ++i) m += y.plane(n, c)[i];
      m /= 25;
      for (std::size_t i = 0; i < 25; ++i) v += (y.plane(n, c)[i] - m) * (y.plane(n, c)[i] - m);
      EXPECT_NEAR(m, 0, 1e-12);
      EXPECT_NEAR(v / 25, 1, 1e-4);
    }
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto x = V::leaf(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.5, -2}), true);
  // mse(x + x, 0) = mean(4 x^2) -> d/dx = 4 x
  backward(mse_loss(add(x, x), Tensor<double>({1, 1, 1, 2})));
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-15);
  EXPECT_NEAR(x.grad()[1], -8.0, 1e-15);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = V::leaf(Tensor<double>({1, 1, 1, 1}, 1.0), true);
  V y;
  {
    NoGradGuard ng;
    y = relu(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(relu(x).requires_grad());
}

TEST(Autograd, FrozenLeafReceivesNoGradient) {
  Rng rng(31);
  auto x = leaf({1, 2, 4, 4}, rng);
  auto w = V::leaf(random_tensor<double>({2, 2, 3, 3}, rng), false);
  auto b = V::leaf(random_tensor<double>({1, 2, 1, 1}, rng), false);
  backward(mse_loss(conv2d(x, w, b, 1, 1), Tensor<double>({1, 2, 4, 4})));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(w.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Autograd, ShapeErrors) {
  auto a = V::constant(Tensor<double>({1, 1, 2, 2})), b = V::constant(Tensor<double>({1, 1, 2, 3}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(concat_channels(a, b), ShapeError);
  EXPECT_THROW(max_pool2(V::constant(Tensor<double>({1, 1, 3, 2}))), ShapeError);
  EXPECT_THROW(conv2d(a, V::constant(Tensor<double>({1, 2, 3, 3})), V::constant(Tensor<double>({1, 1, 1, 1})), 1, 1),
               ShapeError);
  EXPECT_THROW(backward(add(a, a)), ShapeError);
}
