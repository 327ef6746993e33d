#pragma once

// Central finite-difference checks of every layer and both distillation
// losses, run in 64-bit arithmetic.
//
// For an operation f and random projection r, the scalar L = Σ r·f(inputs)
// is differentiated analytically and numerically by (L(x+ε) − L(x−ε)) / 2ε
// for every element of every checked input. The error of one input tensor
// is max|analytic − numeric| / max(max|analytic|, max|numeric|, floor).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace vidistill::gradcheck {

struct Options {
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  // Gradients smaller than this everywhere are compared absolutely.
  double floor = 1e-6;
};

using Function = std::function<BasicTensor<double>(const std::vector<BasicTensor<double>>&)>;

// Largest element error over all `inputs` (which must be leaves requiring
// grad). `projection_seed` picks the random weights r.
double max_relative_error(const Function& f, std::vector<BasicTensor<double>> inputs,
                          std::uint64_t projection_seed, const Options& options = {});

struct CheckResult {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  bool passed = false;
};

// Every check on `instances` random small problems derived from `seed`.
std::vector<CheckResult> run_suite(std::uint64_t seed, std::size_t instances, const Options& options = {});

}  // namespace vidistill::gradcheck
