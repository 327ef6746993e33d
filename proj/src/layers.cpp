#include "layers.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace vidistill::nn {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

namespace {

template <typename T>
void fill_uniform(BasicTensor<T>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill(BasicTensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

template <typename T>
double fan_in(const BasicTensor<T>& weight) {
  return static_cast<double>(weight.numel() / weight.dim(0));
}

}  // namespace

// --- Conv2d ----------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw,
                  ops::Conv2dGeometry geo, bool with_bias)
    : weight(BasicTensor<T>::zeros({out, in, kh, kw}, true)), geometry(geo) {
  if (with_bias) bias = BasicTensor<T>::zeros({out}, true);
}

template <typename T>
BasicTensor<T> Conv2d<T>::forward(const BasicTensor<T>& x) const {
  return ops::conv2d(x, weight, bias, geometry);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  set.parameters.emplace_back(join_name(prefix, "weight"), weight);
  if (bias.defined()) set.parameters.emplace_back(join_name(prefix, "bias"), bias);
}

template <typename T>
void Conv2d<T>::reset_parameters(std::mt19937_64& rng) {
  fill_uniform(weight, std::sqrt(6.0 / fan_in(weight)), rng);
  if (bias.defined()) fill(bias, T(0));
}

// --- Conv3d ----------------------------------------------------------------

template <typename T>
Conv3d<T>::Conv3d(std::size_t in, std::size_t out, std::size_t kt, std::size_t kh,
                  std::size_t kw, ops::Conv3dGeometry geo, bool with_bias)
    : weight(BasicTensor<T>::zeros({out, in, kt, kh, kw}, true)), geometry(geo) {
  if (with_bias) bias = BasicTensor<T>::zeros({out}, true);
}

template <typename T>
BasicTensor<T> Conv3d<T>::forward(const BasicTensor<T>& x) const {
  return ops::conv3d(x, weight, bias, geometry);
}

template <typename T>
void Conv3d<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  set.parameters.emplace_back(join_name(prefix, "weight"), weight);
  if (bias.defined()) set.parameters.emplace_back(join_name(prefix, "bias"), bias);
}

template <typename T>
void Conv3d<T>::reset_parameters(std::mt19937_64& rng) {
  fill_uniform(weight, std::sqrt(6.0 / fan_in(weight)), rng);
  if (bias.defined()) fill(bias, T(0));
}

// --- BatchNorm -------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels, double mom, double eps)
    : gamma(BasicTensor<T>::full({channels}, T(1), true)),
      beta(BasicTensor<T>::zeros({channels}, true)),
      running_mean(BasicTensor<T>::zeros({channels})),
      running_var(BasicTensor<T>::full({channels}, T(1))),
      momentum(mom),
      epsilon(eps) {
  if (!(momentum > 0.0 && momentum < 1.0)) usage_error("batch norm momentum must be in (0,1)");
  if (!(epsilon > 0.0)) usage_error("batch norm epsilon must be positive");
}

template <typename T>
BasicTensor<T> BatchNorm<T>::forward(const BasicTensor<T>& x) {
  ops::BatchNormOptions opts;
  opts.training = training;
  opts.momentum = momentum;
  opts.epsilon = epsilon;
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, opts);
}

template <typename T>
void BatchNorm<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  set.parameters.emplace_back(join_name(prefix, "weight"), gamma);
  set.parameters.emplace_back(join_name(prefix, "bias"), beta);
  set.buffers.emplace_back(join_name(prefix, "running_mean"), running_mean);
  set.buffers.emplace_back(join_name(prefix, "running_var"), running_var);
}

template <typename T>
void BatchNorm<T>::reset_parameters() {
  fill(gamma, T(1));
  fill(beta, T(0));
  fill(running_mean, T(0));
  fill(running_var, T(1));
}

// --- Conv2Plus1d -----------------------------------------------------------

template <typename T>
std::size_t Conv2Plus1d<T>::mid_channels(std::size_t in, std::size_t out, std::size_t kt,
                                         std::size_t kh, std::size_t kw) {
  const std::size_t num = kt * kh * kw * in * out;
  const std::size_t den = kh * kw * in + kt * out;
  return std::max<std::size_t>(1, num / den);
}

template <typename T>
Conv2Plus1d<T>::Conv2Plus1d(std::size_t in, std::size_t out, std::size_t kt, std::size_t kh,
                            std::size_t kw, ops::Conv3dGeometry geo) {
  const std::size_t mid = mid_channels(in, out, kt, kh, kw);
  ops::Conv3dGeometry sg, tg;
  sg.stride = {1, geo.stride[1], geo.stride[2]};
  sg.padding = {0, geo.padding[1], geo.padding[2]};
  tg.stride = {geo.stride[0], 1, 1};
  tg.padding = {geo.padding[0], 0, 0};
  spatial = Conv3d<T>(in, mid, 1, kh, kw, sg);
  mid_bn = BatchNorm<T>(mid);
  temporal = Conv3d<T>(mid, out, kt, 1, 1, tg);
}

template <typename T>
BasicTensor<T> Conv2Plus1d<T>::forward(const BasicTensor<T>& x) {
  return temporal.forward(mid_bn.forward(spatial.forward(x)));
}

template <typename T>
void Conv2Plus1d<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  spatial.collect(join_name(prefix, "conv_spatial"), set);
  mid_bn.collect(join_name(prefix, "mid_bn"), set);
  temporal.collect(join_name(prefix, "conv_temporal"), set);
}

template <typename T>
void Conv2Plus1d<T>::reset_parameters(std::mt19937_64& rng) {
  spatial.reset_parameters(rng);
  mid_bn.reset_parameters();
  temporal.reset_parameters(rng);
}

// --- Linear ----------------------------------------------------------------

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out)
    : weight(BasicTensor<T>::zeros({out, in}, true)), bias(BasicTensor<T>::zeros({out}, true)) {}

template <typename T>
BasicTensor<T> Linear<T>::forward(const BasicTensor<T>& x) const {
  return ops::linear(x, weight, bias);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  set.parameters.emplace_back(join_name(prefix, "weight"), weight);
  set.parameters.emplace_back(join_name(prefix, "bias"), bias);
}

template <typename T>
void Linear<T>::reset_parameters(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(fan_in(weight));
  fill_uniform(weight, bound, rng);
  fill_uniform(bias, bound, rng);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class Conv3d<float>;
template class Conv3d<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Conv2Plus1d<float>;
template class Conv2Plus1d<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace vidistill::nn
