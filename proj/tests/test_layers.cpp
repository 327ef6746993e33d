#include <cmath>
#include <random>

#include "doctest.h"
#include "error.hpp"
#include "layers.hpp"
#include "ops.hpp"
#include "test_util.hpp"

using namespace vidistill;
using vidistill::testing::max_abs_diff;
using vidistill::testing::random_tensor;
using vidistill::testing::to_vector;

TEST_CASE("conv2d examples") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
  // 1·1 + 4·1
  CHECK(to_vector(ops::conv2d(x, k, Tensor(), {})) == std::vector<float>{5});

  auto img = random_tensor({2, 3, 5, 4}, 1);
  Tensor eye({3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(max_abs_diff(ops::conv2d(img, eye, Tensor(), {}), img) == 0.0);

  auto zero = ops::conv2d(img, Tensor::zeros({4, 3, 3, 3}), Tensor(), {{1, 1}, {1, 1}});
  for (float v : zero.data()) REQUIRE(v == 0.0f);
  CHECK_THROWS_AS(ops::conv2d(img, Tensor::zeros({4, 2, 3, 3}), Tensor(), {}), Error);
}

TEST_CASE("conv3d examples") {
  auto x = random_tensor({2, 2, 4, 5, 5}, 2);
  auto w2 = random_tensor({3, 2, 3, 3}, 3);
  Tensor w3({3, 2, 1, 3, 3}, to_vector(w2));
  const auto y3 = ops::conv3d(x, w3, Tensor(), {{1, 1, 1}, {0, 1, 1}});
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<float> frame;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 25; ++i) frame.push_back(x.data()[((b * 2 + c) * 4 + t) * 25 + i]);
    const auto y2 = ops::conv2d(Tensor({2, 2, 5, 5}, frame), w2, Tensor(), {{1, 1}, {1, 1}});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 25; ++i)
          REQUIRE(std::abs(y3.data()[((b * 3 + o) * 4 + t) * 25 + i] - y2.data()[(b * 3 + o) * 25 + i]) < 1e-6);
  }

  Tensor two({1, 1, 1, 1, 1}, {2});
  auto one_channel = random_tensor({2, 1, 3, 4, 4}, 4);
  const auto doubled = ops::conv3d(one_channel, two, Tensor(), {});
  for (std::size_t i = 0; i < doubled.numel(); ++i) REQUIRE(doubled.data()[i] == 2 * one_channel.data()[i]);
}

TEST_CASE("temporally averaging kernel on static input equals the 2D response") {
  auto frame = random_tensor({1, 2, 6, 6}, 5);
  std::vector<float> clip;
  for (std::size_t c = 0; c < 2; ++c)
    for (int t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 36; ++i) clip.push_back(frame.data()[c * 36 + i]);
  auto w2 = random_tensor({3, 2, 3, 3}, 6);
  std::vector<float> w3;
  for (std::size_t p = 0; p < 6; ++p)
    for (int t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < 9; ++i) w3.push_back(w2.data()[p * 9 + i] / 3.0f);
  const auto y3 = ops::conv3d(Tensor({1, 2, 4, 6, 6}, clip), Tensor({3, 2, 3, 3, 3}, w3), Tensor(), {{1, 1, 1}, {0, 1, 1}});
  const auto y2 = ops::conv2d(frame, w2, Tensor(), {{1, 1}, {1, 1}});
  CHECK(y3.dim(2) == 2);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t i = 0; i < 36; ++i)
        REQUIRE(std::abs(y3.data()[(o * 2 + t) * 36 + i] - y2.data()[o * 36 + i]) < 1e-5);
}

TEST_CASE("convolutions are linear in the input") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 2, 3, 5, 5}, 10 + trial);
    auto y = random_tensor({2, 2, 3, 5, 5}, 20 + trial);
    auto w = random_tensor({3, 2, 3, 3, 3}, 30 + trial);
    const float a = 0.7f, b = -1.3f;
    ops::Conv3dGeometry g{{1, 2, 1}, {1, 1, 0}};
    const auto lhs = ops::conv3d(ops::add(ops::scale(x, a), ops::scale(y, b)), w, Tensor(), g);
    const auto rhs = ops::add(ops::scale(ops::conv3d(x, w, Tensor(), g), a), ops::scale(ops::conv3d(y, w, Tensor(), g), b));
    CHECK(max_abs_diff(lhs, rhs) < 1e-5);

    auto x2 = random_tensor({2, 2, 6, 6}, 40 + trial);
    auto y2 = random_tensor({2, 2, 6, 6}, 50 + trial);
    auto w2 = random_tensor({2, 2, 3, 3}, 60 + trial);
    const auto l2 = ops::conv2d(ops::add(ops::scale(x2, a), ops::scale(y2, b)), w2, Tensor(), {{2, 2}, {1, 1}});
    const auto r2 = ops::add(ops::scale(ops::conv2d(x2, w2, Tensor(), {{2, 2}, {1, 1}}), a),
                             ops::scale(ops::conv2d(y2, w2, Tensor(), {{2, 2}, {1, 1}}), b));
    CHECK(max_abs_diff(l2, r2) < 1e-5);
  }
}

TEST_CASE("mid-channel width keeps the parameter count of the full kernel") {
  // floor(3·3·3·8·16 / (3·3·8 + 3·16)) = floor(3456 / 120) = 28
  CHECK(nn::Conv2Plus1d<float>::mid_channels(8, 16, 3, 3, 3) == 28);
  // floor(27 / (9 + 3)) = 2
  CHECK(nn::Conv2Plus1d<float>::mid_channels(1, 1, 3, 3, 3) == 2);
  CHECK(nn::Conv2Plus1d<float>::mid_channels(1, 1, 1, 1, 1) == 1);
  for (std::size_t in : {1, 4, 8, 16})
    for (std::size_t out : {4, 8, 16}) {
      const auto m = nn::Conv2Plus1d<float>::mid_channels(in, out, 3, 3, 3);
      const auto full = 27 * in * out;
      CHECK(m * (9 * in + 3 * out) <= full);
      CHECK((m + 1) * (9 * in + 3 * out) > full);
    }
}

namespace {

// Identity normalization: eval mode with zero mean, unit variance and ε→0
// is not exact in float, so the mid BN is switched to eval with
// running_var = 1 − ε.
template <typename T>
void make_identity_norm(nn::BatchNorm<T>& bn) {
  bn.training = false;
  for (auto& v : bn.running_mean.mutable_data()) v = T(0);
  for (auto& v : bn.running_var.mutable_data()) v = static_cast<T>(1.0 - bn.epsilon);
  for (auto& v : bn.gamma.mutable_data()) v = T(1);
  for (auto& v : bn.beta.mutable_data()) v = T(0);
}

}  // namespace

TEST_CASE("(2+1)D examples with identity mid-normalization") {
  std::mt19937_64 rng(3);
  SUBCASE("centered temporal delta reproduces the spatial convolution") {
    nn::Conv2Plus1d<float> layer(2, 3, 3, 3, 3, {{1, 1, 1}, {1, 1, 1}});
    layer.reset_parameters(rng);
    make_identity_norm(layer.mid_bn);
    auto w = layer.temporal.weight.mutable_data();
    const std::size_t m = layer.temporal.weight.dim(1);
    std::fill(w.begin(), w.end(), 0.0f);
    for (std::size_t o = 0; o < 3; ++o) w[(o * m + (o % m)) * 3 + 1] = 1.0f;
    auto x = random_tensor({1, 2, 4, 5, 5}, 11);
    const auto out = layer.forward(x);
    const auto spatial = layer.spatial.forward(x);
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 4 * 25; ++i)
        REQUIRE(std::abs(out.data()[o * 100 + i] - spatial.data()[(o % m) * 100 + i]) < 1e-6);
  }
  SUBCASE("temporal averaging of a constant clip returns the input") {
    nn::Conv2Plus1d<float> layer(1, 1, 2, 1, 1, {{1, 1, 1}, {0, 0, 0}});
    make_identity_norm(layer.mid_bn);
    const std::size_t m = layer.spatial.weight.dim(0);
    auto sw = layer.spatial.weight.mutable_data();
    std::fill(sw.begin(), sw.end(), 0.0f);
    sw[0] = 1.0f;
    auto tw = layer.temporal.weight.mutable_data();
    std::fill(tw.begin(), tw.end(), 0.0f);
    tw[0] = tw[1] = 0.5f;
    (void)m;
    auto frame = random_tensor({1, 1, 1, 3, 3}, 12);
    std::vector<float> clip;
    for (int t = 0; t < 4; ++t) clip.insert(clip.end(), frame.data().begin(), frame.data().end());
    const auto out = layer.forward(Tensor({1, 1, 4, 3, 3}, clip));
    CHECK(out.dim(2) == 3);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < 9; ++i) REQUIRE(std::abs(out.data()[t * 9 + i] - frame.data()[i]) < 1e-6);
  }
}

TEST_CASE("(2+1)D equals conv3d with the composed rank-1 kernel") {
  // The composed kernel is K[o,c,a,p,q] = Σ_m T[o,m,a]·S[m,c,p,q].
  std::mt19937_64 rng(21);
  for (std::size_t kt : {1, 3})
    for (std::size_t ks : {1, 3}) {
      ops::Conv3dGeometry g{{1, 2, 2}, {kt / 2, ks / 2, ks / 2}};
      nn::Conv2Plus1d<double> layer(2, 3, kt, ks, ks, g);
      layer.reset_parameters(rng);
      make_identity_norm(layer.mid_bn);
      for (auto& v : layer.mid_bn.running_var.mutable_data()) v = 1.0 - layer.mid_bn.epsilon;
      const std::size_t m = layer.spatial.weight.dim(0);
      const auto s = layer.spatial.weight.data();
      const auto t = layer.temporal.weight.data();
      std::vector<double> k(3 * 2 * kt * ks * ks, 0.0);
      for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t a = 0; a < kt; ++a)
            for (std::size_t pq = 0; pq < ks * ks; ++pq)
              for (std::size_t mm = 0; mm < m; ++mm)
                k[((o * 2 + c) * kt + a) * ks * ks + pq] += t[(o * m + mm) * kt + a] * s[(mm * 2 + c) * ks * ks + pq];
      auto x = random_tensor<double>({2, 2, 4, 7, 7}, 22 + kt + ks);
      const auto got = layer.forward(x);
      const auto want = ops::conv3d(x, BasicTensor<double>({3, 2, kt, ks, ks}, k), BasicTensor<double>(), g);
      CHECK(got.shape() == want.shape());
      CHECK(max_abs_diff(got, want) < 1e-5);
    }
}

TEST_CASE("batch norm examples") {
  nn::BatchNorm<float> bn(1);
  Tensor x({2, 1, 1, 1}, {-1, 1});
  const auto y = bn.forward(x);
  const float expected = 1.0f / std::sqrt(1.0f + 1e-5f);
  CHECK(std::abs(y.data()[0] + expected) < 1e-6);
  CHECK(std::abs(y.data()[1] - expected) < 1e-6);

  nn::BatchNorm<float> constant(2);
  for (auto& g : constant.gamma.mutable_data()) g = 0;
  for (auto& b : constant.beta.mutable_data()) b = 5;
  const auto flat = constant.forward(random_tensor({3, 2, 2, 2}, 1));
  for (float v : flat.data()) REQUIRE(v == 5.0f);

  nn::BatchNorm<float> eval(3);
  eval.training = false;
  for (auto& v : eval.running_var.mutable_data()) v = static_cast<float>(1.0 - eval.epsilon);
  auto z = random_tensor({2, 3, 4}, 2);
  CHECK(max_abs_diff(eval.forward(z), z) < 1e-6);

  nn::BatchNorm<float> single(1);
  CHECK_THROWS_AS(single.forward(Tensor({1, 1}, {3})), Error);
}

TEST_CASE("batch norm training statistics") {
  nn::BatchNorm<float> bn(3, 0.1, 1e-5);
  auto x = random_tensor({4, 3, 2, 5, 5}, 8, -2.0, 3.0);
  const auto y = bn.forward(x);
  const std::size_t per = 2 * 25;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0, xs = 0, xs2 = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < per; ++i) {
        const double v = y.data()[(b * 3 + c) * per + i];
        const double u = x.data()[(b * 3 + c) * per + i];
        s += v;
        s2 += v * v;
        xs += u;
        xs2 += u * u;
      }
    const double n = 4.0 * per;
    const double mean = s / n;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(s2 / n - mean * mean - 1.0) < 1e-4);
    const double xm = xs / n;
    const double unbiased = (xs2 / n - xm * xm) * n / (n - 1);
    CHECK(bn.running_mean.data()[c] == doctest::Approx(0.1 * xm).epsilon(1e-4));
    CHECK(bn.running_var.data()[c] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-4));
    CHECK(bn.running_var.data()[c] >= 0.0f);
  }
}

TEST_CASE("global average pool examples") {
  const auto uniform = ops::global_avg_pool(Tensor::full({2, 3, 2, 2}, 4.5f));
  for (float v : uniform.data()) CHECK(v == 4.5f);
  CHECK(ops::global_avg_pool(Tensor({1, 1, 2}, {1, 3})).item() == 2.0f);
  auto x = random_tensor({3, 4, 5, 6, 7}, 17);
  const auto pooled = ops::global_avg_pool(x);
  for (std::size_t bc = 0; bc < 12; ++bc) {
    double s = 0;
    for (std::size_t i = 0; i < 210; ++i) s += x.data()[bc * 210 + i];
    CHECK(std::abs(pooled.data()[bc] - s / 210) < 1e-6);
  }
}

TEST_CASE("linear layer matches a hand product") {
  nn::Linear<float> lin(2, 1);
  lin.weight.mutable_data()[0] = 3;
  lin.weight.mutable_data()[1] = 4;
  lin.bias.mutable_data()[0] = 0.5f;
  CHECK(lin.forward(Tensor({1, 2}, {1, 2})).item() == 11.5f);
}

TEST_CASE("scratch initializer bounds") {
  std::mt19937_64 rng(1);
  nn::Conv3d<float> conv(4, 8, 3, 3, 3, {});
  conv.reset_parameters(rng);
  const float bound = static_cast<float>(std::sqrt(6.0 / (4 * 27)));
  float lo = 0, hi = 0;
  for (float v : conv.weight.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi <= bound);
  CHECK(lo >= -bound);
  CHECK(hi > 0.8f * bound);
  nn::BatchNorm<float> bn(3);
  for (float v : bn.gamma.data()) CHECK(v == 1.0f);
  for (float v : bn.beta.data()) CHECK(v == 0.0f);
}
