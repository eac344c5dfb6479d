// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "test_util.hpp"
#include "vptta/autodiff.hpp"
#include "vptta/nn.hpp"

#include <functional>

using namespace vptta;
using ad::Var;

namespace {

// Checks d(sum(w * op(x)))/dx against central differences; w is a fixed
// random weighting so that every output coordinate matters.
void check_unary_op(const std::function<Var(const Var&)>& op, const Tensor& x0, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Var probe = op(Var::constant(x0));
  const Tensor weights = testing::random_tensor(probe.shape(), rng);
  auto loss = [&](const Var& x) { return ad::sum(ad::mul(op(x), Var::constant(weights))); };

  const Var x = Var::parameter(x0);
  ad::backward(loss(x));
  const Tensor numeric =
      finite_diff_gradient([&](const Tensor& p) { return loss(Var::constant(p)).value()[0]; }, x0, 1e-6);
  CHECK(testing::max_relative_gradient_error(x.grad(), numeric) < 1e-6);
}

}  // namespace

TEST_CASE("sum has unit gradient") {
  std::mt19937_64 rng(1);
  const Var x = Var::parameter(testing::random_tensor({3, 4, 2}, rng));
  ad::backward(ad::sum(x));
  const Tensor g = x.grad();
  for (double v : g.data()) CHECK(v == 1.0);
}

TEST_CASE("backward on a non-scalar is a contract violation") {
  const Var x = Var::parameter(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(ad::backward(ad::square(x)), ContractViolation);
}

TEST_CASE("L1 of a masked prompt has gradient sign(p*a)*a") {
  std::mt19937_64 rng(2);
  const Tensor a = testing::random_tensor({5, 5, 3}, rng);
  const Var p = Var::parameter(testing::random_tensor({5, 5, 3}, rng));
  ad::backward(ad::sum(ad::abs(ad::mul(p, Var::constant(a)))));
  const auto g = p.grad();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double prod = p.value()[i] * a[i];
    CHECK(g[i] == doctest::Approx((prod > 0 ? 1.0 : -1.0) * a[i]));
  }
}

TEST_CASE("constants carry no graph") {
  const Var a = Var::constant(Tensor({3}, 2.0));
  const Var b = ad::mul(a, ad::relu(a));
  CHECK_FALSE(b.requires_grad());
  CHECK(b.node()->parents.empty());
}

TEST_CASE("gradients accumulate through shared subexpressions") {
  const Var x = Var::parameter(Tensor({1}, 3.0));
  const Var y = ad::mul(x, x);
  ad::backward(ad::add(y, y));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("finite differences on textbook functions") {
  auto square = [](const Tensor& p) { return p[0] * p[0]; };
  CHECK(finite_diff_gradient(square, Tensor({1}, 3.0), 1e-5)[0] == doctest::Approx(6.0).epsilon(1e-6));
  auto absval = [](const Tensor& p) { return std::abs(p[0]); };
  CHECK(finite_diff_gradient(absval, Tensor({1}, 0.5), 1e-5)[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("element-wise ops match finite differences") {
  std::mt19937_64 rng(4);
  const Tensor x0 = testing::random_tensor({4, 3, 2}, rng, 0.2, 1.5);
  const Tensor other = testing::random_tensor({4, 3, 2}, rng, 0.5, 2.0);
  const Var o = Var::constant(other);
  check_unary_op([](const Var& x) { return ad::square(x); }, x0, 1);
  check_unary_op([](const Var& x) { return ad::sqrt(x); }, x0, 2);
  check_unary_op([](const Var& x) { return ad::sigmoid(x); }, x0, 3);
  check_unary_op([](const Var& x) { return ad::relu(ad::add_scalar(x, -0.8)); }, x0, 4);
  check_unary_op([&](const Var& x) { return ad::div(o, x); }, x0, 5);
  check_unary_op([&](const Var& x) { return ad::div(x, o); }, x0, 6);
  check_unary_op([&](const Var& x) { return ad::sub(o, ad::scale(x, 3.0)); }, x0, 7);
  check_unary_op([](const Var& x) { return ad::mean(ad::square(x)); }, x0, 8);
  check_unary_op([](const Var& x) { return ad::reshape(x, {24}); }, x0, 9);
}

TEST_CASE("per-channel ops match finite differences") {
  std::mt19937_64 rng(5);
  const Tensor x0 = testing::random_tensor({2, 3, 3, 4}, rng, 0.2, 1.5);
  const Tensor v0 = testing::random_tensor({4}, rng, 0.5, 2.0);
  check_unary_op([](const Var& x) { return ad::channel_mean(x); }, x0, 1);
  const Tensor mu0 = testing::random_tensor({4}, rng);
  check_unary_op([&](const Var& x) { return ad::channel_var(x, Var::constant(mu0)); }, x0, 2);
  check_unary_op([&](const Var& mu) { return ad::channel_var(Var::constant(x0), mu); }, mu0, 3);
  const Tensor g0 = testing::random_tensor({4}, rng), b0 = testing::random_tensor({4}, rng);
  const std::vector<Tensor> norm_args{x0, mu0, v0, g0, b0};
  for (std::size_t which = 0; which < norm_args.size(); ++which) {
    check_unary_op(
        [&](const Var& p) {
          std::vector<Var> a;
          for (std::size_t i = 0; i < norm_args.size(); ++i) a.push_back(i == which ? p : Var::constant(norm_args[i]));
          return ad::normalize(a[0], a[1], a[2], a[3], a[4]);
        },
        norm_args[which], 80 + which);
  }
  for (int which = 0; which < 4; ++which) {
    auto op = [which](const Var& x, const Var& v) {
      switch (which) {
        case 0: return ad::add_c(x, v);
        case 1: return ad::sub_c(x, v);
        case 2: return ad::mul_c(x, v);
        default: return ad::div_c(x, v);
      }
    };
    check_unary_op([&](const Var& x) { return op(x, Var::constant(v0)); }, x0, 10 + which);
    check_unary_op([&](const Var& v) { return op(Var::constant(x0), v); }, v0, 20 + which);
  }
}

TEST_CASE("conv2d gradients w.r.t. input, kernel and bias") {
  std::mt19937_64 rng(6);
  const Tensor x0 = testing::random_tensor({2, 7, 6, 3}, rng);
  const Tensor k0 = testing::random_tensor({3, 3, 3, 4}, rng);
  const Tensor b0 = testing::random_tensor({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    check_unary_op(
        [&](const Var& x) {
          const Var b = Var::constant(b0);
          return ad::conv2d(x, Var::constant(k0), &b, stride, 1);
        },
        x0, 30 + stride);
    check_unary_op(
        [&](const Var& k) {
          const Var b = Var::constant(b0);
          return ad::conv2d(Var::constant(x0), k, &b, stride, 1);
        },
        k0, 40 + stride);
    check_unary_op([&](const Var& b) { return ad::conv2d(Var::constant(x0), Var::constant(k0), &b, stride, 1); }, b0,
                   50 + stride);
  }
}

TEST_CASE("1x1 identity kernel leaves the input unchanged") {
  std::mt19937_64 rng(7);
  const Tensor x = testing::random_tensor({1, 5, 5, 3}, rng);
  Tensor k({1, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  const Var y = ad::conv2d(Var::constant(x), Var::constant(k), nullptr, 1, 0);
  CHECK(y.value() == x);
}

TEST_CASE("conv2d rejects mismatched channels") {
  const Var x = Var::constant(Tensor({1, 4, 4, 3}));
  const Var k = Var::constant(Tensor({3, 3, 2, 4}));
  CHECK_THROWS_AS(ad::conv2d(x, k, nullptr, 1, 1), ConfigError);
}

TEST_CASE("upsample, matmul and bce gradients") {
  std::mt19937_64 rng(8);
  check_unary_op([](const Var& x) { return ad::upsample2x(x); }, testing::random_tensor({1, 3, 4, 2}, rng), 60);
  const Tensor b0 = testing::random_tensor({5, 2, 3}, rng);
  const Tensor a0 = testing::random_tensor({2, 4, 3}, rng);
  check_unary_op([&](const Var& b) { return ad::channel_matmul(b, Var::constant(a0)); }, b0, 61);
  check_unary_op([&](const Var& a) { return ad::channel_matmul(Var::constant(b0), a); }, a0, 62);
  Tensor target = testing::random_tensor({1, 4, 4, 1}, rng, 0.0, 1.0);
  for (auto& t : target.data()) t = t > 0.5 ? 1.0 : 0.0;
  check_unary_op([&](const Var& z) { return ad::bce_with_logits(z, target); },
                 testing::random_tensor({1, 4, 4, 1}, rng, -4, 4), 63);
}

TEST_CASE("spectral ops match finite differences") {
  std::mt19937_64 rng(9);
  const Tensor plane = testing::random_tensor({6, 5, 2}, rng);
  const Tensor spec = testing::random_tensor({6, 5, 2, 2}, rng);
  check_unary_op([](const Var& x) { return ad::fft2(x); }, plane, 70);
  check_unary_op([](const Var& z) { return ad::ifft2_real(z); }, spec, 71);
  check_unary_op([](const Var& z) { return ad::fftshift(z, false); }, spec, 72);
  check_unary_op([](const Var& z) { return ad::fftshift(z, true); }, spec, 73);
  check_unary_op([](const Var& z) { return ad::amplitude_phase(z).first; }, spec, 74);
  check_unary_op([](const Var& z) { return ad::amplitude_phase(z).second; }, spec, 75);
  const Tensor amp = testing::random_tensor({6, 5, 2}, rng, 0.1, 2.0);
  const Tensor phase = testing::random_tensor({6, 5, 2}, rng, -3, 3);
  check_unary_op([&](const Var& a) { return ad::recompose(a, Var::constant(phase)); }, amp, 76);
  check_unary_op([&](const Var& p) { return ad::recompose(Var::constant(amp), p); }, phase, 77);
  check_unary_op([](const Var& p) { return ad::one_pad(p, 7, 8); }, testing::random_tensor({3, 2, 2}, rng), 78);
}
