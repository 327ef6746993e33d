#pragma once

// Parameterized layers. Each layer owns leaf tensors and reports them under
// dotted names (e.g. "stage2.block1.conv1.conv_spatial.weight"); running
// BatchNorm statistics are reported separately as buffers.

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace vidistill::nn {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <typename T>
struct ParameterSet {
  NamedTensors<T> parameters;
  NamedTensors<T> buffers;
};

std::string join_name(const std::string& prefix, const std::string& name);

// Scratch initialization (reset_parameters): He-uniform, bound sqrt(6/fan_in),
// for conv weights; uniform(±1/sqrt(fan_in)) for linear weights and biases;
// zero conv biases; gamma=1, beta=0, zero mean and unit variance for
// BatchNorm.

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw,
         ops::Conv2dGeometry geometry, bool with_bias = false);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void reset_parameters(std::mt19937_64& rng);

  BasicTensor<T> weight;  // [O×C×kh×kw]
  BasicTensor<T> bias;    // [O] or undefined
  ops::Conv2dGeometry geometry;
};

template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(std::size_t in, std::size_t out, std::size_t kt, std::size_t kh, std::size_t kw,
         ops::Conv3dGeometry geometry, bool with_bias = false);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void reset_parameters(std::mt19937_64& rng);

  BasicTensor<T> weight;  // [O×C×kt×kh×kw]
  BasicTensor<T> bias;
  ops::Conv3dGeometry geometry;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5);

  BasicTensor<T> forward(const BasicTensor<T>& x);
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void reset_parameters();

  BasicTensor<T> gamma, beta;
  BasicTensor<T> running_mean, running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  bool training = true;
};

// Factorized spatiotemporal convolution: a (1×kh×kw) spatial convolution to
// `mid` channels, BatchNorm over those channels, then a (kt×1×1) temporal
// convolution. Strides and paddings of the full kernel are split by axis.
template <typename T>
class Conv2Plus1d {
 public:
  Conv2Plus1d() = default;
  Conv2Plus1d(std::size_t in, std::size_t out, std::size_t kt, std::size_t kh, std::size_t kw,
              ops::Conv3dGeometry geometry);

  // Parameter-parity width floor(kt·kh·kw·in·out / (kh·kw·in + kt·out)), at least 1.
  static std::size_t mid_channels(std::size_t in, std::size_t out, std::size_t kt,
                                  std::size_t kh, std::size_t kw);

  BasicTensor<T> forward(const BasicTensor<T>& x);
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void reset_parameters(std::mt19937_64& rng);
  void set_training(bool training) { mid_bn.training = training; }

  Conv3d<T> spatial;
  BatchNorm<T> mid_bn;
  Conv3d<T> temporal;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void reset_parameters(std::mt19937_64& rng);

  BasicTensor<T> weight;  // [out×in]
  BasicTensor<T> bias;    // [out]
};

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class Conv3d<float>;
extern template class Conv3d<double>;
extern template class BatchNorm<float>;
extern template class BatchNorm<double>;
extern template class Conv2Plus1d<float>;
extern template class Conv2Plus1d<double>;
extern template class Linear<float>;
extern template class Linear<double>;

}  // namespace vidistill::nn
