#include <cmath>
#include <random>

#include "doctest.h"
#include "error.hpp"
#include "gemm.hpp"
#include "ops.hpp"
#include "test_util.hpp"

using namespace vidistill;
using vidistill::testing::random_tensor;
using vidistill::testing::to_vector;

TEST_CASE("elementwise examples") {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  CHECK(to_vector(ops::add(a, b)) == std::vector<float>{4, 6});
  CHECK(to_vector(ops::relu(Tensor({3}, {-1, 0, 2}))) == std::vector<float>{0, 0, 2});
  CHECK(to_vector(ops::scale(Tensor({2}, {2, 3}), 0.0f)) == std::vector<float>{0, 0});
  CHECK(to_vector(ops::mul(Tensor({2}, {2, 3}), Tensor({2}, {0, 0}))) == std::vector<float>{0, 0});
}

TEST_CASE("elementwise rejects mismatched shapes and reports both") {
  Tensor a({2, 3}, std::vector<float>(6, 1));
  Tensor b({4}, std::vector<float>(4, 1));
  try {
    ops::add(a, b);
    FAIL("expected rejection");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
    CHECK(e.kind() == ErrorKind::kUsage);
  }
}

TEST_CASE("per-channel broadcast add and its gradient") {
  Tensor x({2, 2, 3}, std::vector<float>(12, 1.0f), true);
  Tensor bias({2}, {10, 20}, true);
  auto y = ops::add(x, bias);
  CHECK(y.data()[0] == 11);
  CHECK(y.data()[3] == 21);
  CHECK(y.data()[6] == 11);
  ops::sum(y).backward();
  CHECK(to_vector(Tensor({2}, {bias.grad()[0], bias.grad()[1]})) == std::vector<float>{6, 6});
}

TEST_CASE("matmul examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor v({2, 1}, {5, 7});
  CHECK(to_vector(ops::matmul(eye, v)) == std::vector<float>{5, 7});
  // 1·3 + 2·4 = 11
  CHECK(ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0f);
  CHECK_THROWS_AS(ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({3, 1}, {1, 2, 3})), Error);
}

TEST_CASE("gemm matches a brute-force product for every transpose combination") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dim(1, 80);
  std::uniform_real_distribution<double> val(-1, 1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    const bool ta = trial & 1, tb = trial & 2, acc = trial & 4;
    std::vector<double> a(m * k), b(k * n), c(m * n), ref(m * n);
    for (auto& x : a) x = val(rng);
    for (auto& x : b) x = val(rng);
    for (auto& x : c) x = val(rng);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = acc ? c[i * n + j] : 0.0;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ta ? a[p * m + i] : a[i * k + p];
          const double bv = tb ? b[j * k + p] : b[p * n + j];
          s += av * bv;
        }
        ref[i * n + j] = s;
      }
    gemm<double>(ta, tb, m, n, k, a.data(), b.data(), c.data(), acc);
    for (std::size_t i = 0; i < m * n; ++i) REQUIRE(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward examples") {
  Tensor w({2}, {1, 2}, true);
  ops::sum(ops::mul(w, w)).backward();
  CHECK(to_vector(Tensor({2}, {w.grad()[0], w.grad()[1]})) == std::vector<float>{2, 4});

  auto c = Tensor::scalar(3.0f);
  c.backward();
  CHECK_FALSE(c.has_grad());

  CHECK_THROWS_AS(Tensor({2}, {1, 2}, true).backward(), Error);
}

TEST_CASE("a parameter used twice receives the summed gradient") {
  Tensor w({3}, {1, -2, 3}, true);
  auto loss = ops::add(ops::sum(ops::scale(w, 2.0f)), ops::sum(ops::scale(w, 5.0f)));
  loss.backward();
  for (auto g : w.grad()) CHECK(g == 7.0f);
}

TEST_CASE("two backward calls add bitwise-identical contributions") {
  auto w = random_tensor<float>({4, 5}, 11, -1, 1, true);
  auto x = random_tensor<float>({3, 5}, 12);
  auto loss = ops::sum(ops::relu(ops::linear(x, w, Tensor())));
  loss.backward();
  const auto once = std::vector<float>(w.grad().begin(), w.grad().end());
  loss.backward();
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == once[i] + once[i]);
}

TEST_CASE("softmax examples and contract") {
  auto s = ops::softmax(Tensor({3}, {0, 0, 0}), 1.0);
  for (auto v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  // 1/(1+e^-1) = 0.7310585786...
  auto p = ops::softmax(Tensor({2}, {1, 0}), 1.0);
  CHECK(p.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p.data()[1] == doctest::Approx(0.2689).epsilon(1e-4));
  auto q = ops::softmax(Tensor({2}, {2, 0}), 2.0);
  CHECK(std::abs(q.data()[0] - p.data()[0]) < 1e-7);
  CHECK_THROWS_AS(ops::softmax(Tensor({2}, {1, 0}), 0.0), Error);
  CHECK_THROWS_AS(ops::softmax(Tensor({2}, {1, 0}), -1.0), Error);
}

TEST_CASE("softmax properties on random rows") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor<float>({4, 7}, 100 + trial, -5, 5);
    const double tau = 0.25 + trial * 0.1;
    auto y = ops::softmax(z, tau);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += y.data()[r * 7 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    const float c = static_cast<float>(shift(rng));
    std::vector<float> shifted = to_vector(z);
    for (auto& v : shifted) v += c;
    auto y2 = ops::softmax(Tensor({4, 7}, shifted), tau);
    // float inputs shifted by up to 50 lose ~4e-6 of absolute precision
    CHECK(vidistill::testing::max_abs_diff(y, y2) < 1e-5);
  }
}

TEST_CASE("softmax shift invariance at double precision") {
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor<double>({3, 6}, 500 + trial, -5, 5);
    std::vector<double> shifted = to_vector(z);
    for (auto& v : shifted) v += 17.25 * (trial - 25);
    auto a = ops::softmax(z, 1.5);
    auto b = ops::softmax(BasicTensor<double>({3, 6}, shifted), 1.5);
    CHECK(vidistill::testing::max_abs_diff(a, b) < 1e-6);
  }
}

TEST_CASE("operations are deterministic") {
  auto x = random_tensor<float>({2, 3, 4, 6, 6}, 5);
  auto w = random_tensor<float>({4, 3, 3, 3, 3}, 6);
  ops::Conv3dGeometry g;
  g.padding = {1, 1, 1};
  auto a = ops::conv3d(x, w, Tensor(), g);
  auto b = ops::conv3d(x, w, Tensor(), g);
  CHECK(to_vector(a) == to_vector(b));
}

TEST_CASE("no-grad guard disables recording") {
  Tensor w({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    auto y = ops::scale(w, 2.0f);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ops::scale(w, 2.0f).requires_grad());
}
