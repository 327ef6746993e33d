#pragma once

// Differentiable operations. Every function returns a new tensor and, when
// gradients are being recorded, registers its backward rule. Reductions
// accumulate in double regardless of the storage type.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace vidistill::ops {

enum class Elementwise { kAdd, kSub, kMul, kRelu };

// Binary kinds take operands of equal shape, or a rank-1 `b` whose length
// equals a.dim(1) (broadcast over every axis but the channel axis).
template <typename T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a,
                           const BasicTensor<T>& b = {});

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(Elementwise::kAdd, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(Elementwise::kSub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(Elementwise::kMul, a, b);
}
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return elementwise(Elementwise::kRelu, a);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[B×in]·wᵀ + bias, with w stored [out×in]. `bias` may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias);

struct Conv3dGeometry {
  std::array<std::size_t, 3> stride{1, 1, 1};   // t, h, w
  std::array<std::size_t, 3> padding{0, 0, 0};  // zero padding, t, h, w
};
struct Conv2dGeometry {
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
};

// floor((in + 2·pad − k)/stride) + 1; rejects results < 1.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t pad);

// Direct cross-correlation. x[B×C×T×H×W], w[O×C×kt×kh×kw], bias[O] or undefined.
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias, const Conv3dGeometry& geometry);

// x[B×C×H×W], w[O×C×kh×kw].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias, const Conv2dGeometry& geometry);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Normalizes over every axis but 1. In training mode the batch statistics
// are used and the running buffers are updated in place (unbiased variance).
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, const BatchNormOptions& options);

// Mean over all axes after the first two: [B×C×...] -> [B×C].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

// Slice [begin, begin+length) of the temporal axis (axis 2) of a rank-5 tensor.
template <typename T>
BasicTensor<T> crop_time(const BasicTensor<T>& x, std::size_t begin, std::size_t length);

// Softmax of z/tau over the last axis, computed max-shifted in double.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& z, double tau);

// Mean over rows of −Σ_k y_k·ln softmax(z)_k. Targets are constants; each
// row must sum to 1 within 1e-5. Optional per-row weights turn the mean into
// Σ w_b·L_b / Σ w_b (zero total weight gives a zero loss).
template <typename T>
BasicTensor<T> soft_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets,
                                  std::span<const double> row_weights = {});

// Hard-label cross-entropy, averaged over the batch.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

// Mean over all elements of (a − b)², optionally weighted per row (axis 0)
// with the same normalization as soft_cross_entropy.
template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b,
                   std::span<const double> row_weights = {});

}  // namespace vidistill::ops
