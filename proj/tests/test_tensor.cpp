#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "oracles.hpp"
#include "stpf/rng.hpp"
#include "stpf/tensor.hpp"

using stpf::Tensor;

namespace {

template <typename T>
std::vector<T> random_vec(stpf::Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

}  // namespace

TEST_CASE("elementwise basics") {
  auto a = Tensor<double>::from_data({2}, {2.0, 3.0});
  auto b = Tensor<double>::from_data({2}, {4.0, 5.0});
  auto prod = mul(a, b);
  CHECK(prod.data()[0] == 8.0);
  CHECK(prod.data()[1] == 15.0);

  CHECK(stpf::sigmoid(Tensor<double>::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(stpf::tanh(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(stpf::relu(Tensor<double>::scalar(-3.0)).item() == 0.0);

  auto c = Tensor<double>::from_data({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(add(a, c), stpf::DimError);
}

TEST_CASE("conv2d identity kernel") {
  stpf::Rng rng(7);
  auto x = Tensor<double>::from_data({1, 1, 4, 5}, random_vec<double>(rng, 20));
  auto k = Tensor<double>::from_data({1, 1, 1, 1}, {1.0});
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d_same(x, k, b);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 3x3 input") {
  auto x = Tensor<double>::filled({1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>::filled({1, 1, 3, 3}, 1.0);
  auto y = conv2d_same(x, k);
  // zero padding: each output counts its in-bounds neighborhood
  CHECK(y.data()[4] == 9.0);  // center
  CHECK(y.data()[0] == 4.0);  // corner
  CHECK(y.data()[1] == 6.0);  // edge
}

TEST_CASE("conv2d matches brute-force oracle") {
  stpf::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int B = 1 + int(rng.below(2)), Cin = 1 + int(rng.below(3));
    const int Cout = 1 + int(rng.below(3));
    const int H = 1 + int(rng.below(6)), W = 1 + int(rng.below(6));
    const int kh = 1 + 2 * int(rng.below(2)), kw = 1 + 2 * int(rng.below(2));
    auto xv = random_vec<double>(rng, size_t(B) * Cin * H * W);
    auto kv = random_vec<double>(rng, size_t(Cout) * Cin * kh * kw);
    auto bv = random_vec<double>(rng, size_t(Cout));
    auto y = conv2d_same(Tensor<double>::from_data({B, Cin, H, W}, xv),
                         Tensor<double>::from_data({Cout, Cin, kh, kw}, kv),
                         Tensor<double>::from_data({Cout}, bv));
    auto ref = oracle::conv2d_same(xv, B, Cin, H, W, kv, Cout, kh, kw, bv);
    for (size_t i = 0; i < ref.size(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d matches oracle in 32-bit") {
  stpf::Rng rng(13);
  auto xv = random_vec<float>(rng, 25);
  auto kv = random_vec<float>(rng, 9);
  auto y = conv2d_same(Tensor<float>::from_data({1, 1, 5, 5}, xv),
                       Tensor<float>::from_data({1, 1, 3, 3}, kv));
  auto ref = oracle::conv2d_same(xv, 1, 1, 5, 5, kv, 1, 3, 3, {});
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(y.data()[i] - ref[i]) < 1e-6f);
  }
}

TEST_CASE("conv2d rejects even kernels and bad shapes") {
  auto x = Tensor<double>::zeros({1, 1, 4, 4});
  CHECK_THROWS_AS(conv2d_same(x, Tensor<double>::zeros({1, 1, 2, 2})), stpf::ConfigError);
  CHECK_THROWS_AS(conv2d_same(x, Tensor<double>::zeros({1, 3, 3, 3})), stpf::DimError);
  CHECK_THROWS_AS(conv2d_same(x, Tensor<double>::zeros({1, 1, 3, 3}),
                              Tensor<double>::zeros({2})),
                  stpf::DimError);
}

TEST_CASE("conv3d identity kernel") {
  stpf::Rng rng(17);
  auto xv = random_vec<double>(rng, 2 * 3 * 4 * 3);
  auto x = Tensor<double>::from_data({1, 2, 3, 4, 3}, xv);
  // one-hot 1x1x1 kernels per channel pass the input through
  auto k = Tensor<double>::from_data({2, 2, 1, 1, 1}, {1.0, 0.0, 0.0, 1.0});
  auto y = conv3d_same(x, k);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv3d impulse response of all-ones 3x3x3 kernel") {
  std::vector<double> xv(4 * 4 * 4, 0.0);
  xv[(1 * 4 + 1) * 4 + 1] = 1.0;  // impulse at (1,1,1)
  auto x = Tensor<double>::from_data({1, 1, 4, 4, 4}, xv);
  auto k = Tensor<double>::filled({1, 1, 3, 3, 3}, 1.0);
  auto y = conv3d_same(x, k);
  int ones = 0;
  for (int d = 0; d < 4; ++d)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) {
        const double v = y.data()[(d * 4 + h) * 4 + w];
        const bool inside = d <= 2 && h <= 2 && w <= 2;
        CHECK(v == (inside ? 1.0 : 0.0));
        ones += inside && v == 1.0;
      }
  CHECK(ones == 27);
}

TEST_CASE("conv3d matches brute-force oracle") {
  stpf::Rng rng(19);
  for (int trial = 0; trial < 8; ++trial) {
    const int B = 1, Cin = 1 + int(rng.below(2)), Cout = 1 + int(rng.below(2));
    const int D = 4, H = 4, W = 4;
    const int kd = 3, kh = 3, kw = 1 + 2 * int(rng.below(2));
    auto xv = random_vec<double>(rng, size_t(B) * Cin * D * H * W);
    auto kv = random_vec<double>(rng, size_t(Cout) * Cin * kd * kh * kw);
    auto bv = random_vec<double>(rng, size_t(Cout));
    auto y = conv3d_same(Tensor<double>::from_data({B, Cin, D, H, W}, xv),
                         Tensor<double>::from_data({Cout, Cin, kd, kh, kw}, kv),
                         Tensor<double>::from_data({Cout}, bv));
    auto ref = oracle::conv3d_same(xv, B, Cin, D, H, W, kv, Cout, kd, kh, kw, bv);
    for (size_t i = 0; i < ref.size(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv linearity in the input") {
  stpf::Rng rng(23);
  auto xv = random_vec<double>(rng, 2 * 5 * 4);
  auto yv = random_vec<double>(rng, 2 * 5 * 4);
  auto kv = random_vec<double>(rng, 3 * 2 * 3 * 3);
  const double a = 1.7, b = -0.6;
  auto k = Tensor<double>::from_data({3, 2, 3, 3}, kv);
  std::vector<double> mixed(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) mixed[i] = a * xv[i] + b * yv[i];
  auto lhs = conv2d_same(Tensor<double>::from_data({1, 2, 5, 4}, mixed), k);
  auto cx = conv2d_same(Tensor<double>::from_data({1, 2, 5, 4}, xv), k);
  auto cy = conv2d_same(Tensor<double>::from_data({1, 2, 5, 4}, yv), k);
  for (int64_t i = 0; i < lhs.size(); ++i) {
    CHECK(lhs.data()[i] ==
          doctest::Approx(a * cx.data()[i] + b * cy.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward determinism is bitwise") {
  auto run = [] {
    stpf::Rng rng(31);
    auto x = Tensor<float>::from_data({1, 2, 6, 6}, random_vec<float>(rng, 72));
    auto k = Tensor<float>::from_data({3, 2, 3, 3}, random_vec<float>(rng, 54));
    auto y = sigmoid(conv2d_same(x, k));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("backward: gradient of sigmoid at 0 is 0.25") {
  auto x = Tensor<double>::scalar(0.0, true);
  auto loss = stpf::sigmoid(x);
  stpf::backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward: unused parameter carries no gradient") {
  auto p = Tensor<double>::scalar(2.0, true);
  auto x = Tensor<double>::scalar(3.0, true);
  auto loss = mul(x, x);
  stpf::backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK_FALSE(p.has_grad());
  CHECK_THROWS_AS(p.grad(), stpf::UsageError);
}

TEST_CASE("backward: shared tensors accumulate by summation") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto loss = add(mul(x, x), mul(x, x));  // 2x^2, dx = 4x
  stpf::backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(stpf::backward(y), stpf::UsageError);
}

TEST_CASE("finite_diff_check: quadratic is exact") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto f = [&] { return mul(x, x); };
  const double err = stpf::finite_diff_check<double>(f, x, 0.5);
  CHECK(err < 1e-12);
}

TEST_CASE("finite_diff_check: tanh") {
  auto x = Tensor<double>::scalar(1.0, true);
  auto f = [&] { return stpf::tanh(x); };
  CHECK(stpf::finite_diff_check<double>(f, x, 1e-5) < 1e-8);
}

TEST_CASE("finite_diff_check: mse over 10 values") {
  stpf::Rng rng(41);
  auto pred = Tensor<double>::from_data({1, 1, 2, 5}, random_vec<double>(rng, 10), true);
  auto truth = Tensor<double>::from_data({1, 1, 2, 5}, random_vec<double>(rng, 10));
  std::vector<uint8_t> mask(10, 1);
  auto f = [&] { return stpf::masked_mse(pred, truth, mask); };
  CHECK(stpf::finite_diff_check<double>(f, pred, 1e-5) < 1e-8);
}

TEST_CASE("gradients of all primitive ops pass finite differences") {
  stpf::Rng rng(43);
  auto x = Tensor<double>::from_data({1, 2, 4, 4}, random_vec<double>(rng, 32), true);
  auto k = Tensor<double>::from_data({2, 2, 3, 3}, random_vec<double>(rng, 36), true);
  auto b = Tensor<double>::from_data({2}, random_vec<double>(rng, 2), true);
  auto other = Tensor<double>::from_data({1, 2, 4, 4}, random_vec<double>(rng, 32), true);

  auto f = [&] {
    auto c = conv2d_same(x, k, b);
    auto s = sigmoid(slice_channels(c, 0, 1));
    auto t = stpf::tanh(slice_channels(c, 1, 2));
    auto merged = concat_channels(mul(s, t), relu(sub(s, t)));
    return stpf::sum(mul(merged, concat_channels(slice_channels(other, 0, 1),
                                                 slice_channels(other, 1, 2))));
  };
  CHECK(stpf::finite_diff_check<double>(f, x, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, k, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, b, 1e-5) < 1e-7);
}

TEST_CASE("conv3d and depth-stacking gradients pass finite differences") {
  stpf::Rng rng(47);
  auto x = Tensor<double>::from_data({1, 1, 3, 3, 3}, random_vec<double>(rng, 27), true);
  auto k = Tensor<double>::from_data({2, 1, 3, 3, 3}, random_vec<double>(rng, 54), true);
  auto b = Tensor<double>::from_data({2}, random_vec<double>(rng, 2), true);
  auto f = [&] {
    auto y = relu(conv3d_same(x, k, b));
    std::vector<Tensor<double>> steps;
    for (int t = 0; t < 3; ++t) steps.push_back(slice_depth(y, t));
    return stpf::sum(stpf::tanh(stack_depth(steps)));
  };
  CHECK(stpf::finite_diff_check<double>(f, x, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, k, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, b, 1e-5) < 1e-7);
}

TEST_CASE("batchnorm train-mode gradients pass finite differences") {
  stpf::Rng rng(53);
  auto x = Tensor<double>::from_data({2, 3, 2, 2}, random_vec<double>(rng, 24), true);
  auto gamma = Tensor<double>::from_data({3}, {1.2, 0.8, 1.5}, true);
  auto beta = Tensor<double>::from_data({3}, {0.1, -0.2, 0.0}, true);
  auto w = Tensor<double>::from_data({2, 3, 2, 2}, random_vec<double>(rng, 24));
  auto f = [&] {
    return stpf::sum(mul(stpf::batchnorm_train(x, gamma, beta, 1e-3), w));
  };
  CHECK(stpf::finite_diff_check<double>(f, x, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, gamma, 1e-5) < 1e-7);
  CHECK(stpf::finite_diff_check<double>(f, beta, 1e-5) < 1e-7);
}

TEST_CASE("masked_mse ignores inactive cells") {
  auto pred = Tensor<double>::from_data({1, 1, 1, 2}, {0.5, 0.5});
  auto truth = Tensor<double>::from_data({1, 1, 1, 2}, {0.0, 1.0});
  std::vector<uint8_t> full{1, 1};
  CHECK(stpf::masked_mse(pred, truth, full).item() == doctest::Approx(0.25));

  auto pred2 = Tensor<double>::from_data({1, 1, 1, 2}, {0.5, 99.0});
  std::vector<uint8_t> half{1, 0};
  CHECK(stpf::masked_mse(pred2, truth, half).item() == doctest::Approx(0.25));

  std::vector<uint8_t> empty{0, 0};
  CHECK_THROWS_AS(stpf::masked_mse(pred, truth, empty), stpf::UsageError);
}

TEST_CASE("mutable_data only on leaves") {
  auto x = Tensor<double>::scalar(1.0, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(y.mutable_data(), stpf::UsageError);
  CHECK_NOTHROW(x.mutable_data());
}
