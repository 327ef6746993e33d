#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "layers.hpp"

namespace vidistill::optim {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Weight decay reaches conv and linear weights (rank >= 2) only; norm
// affine parameters and biases are never decayed.
bool decays(const Tensor& parameter);

// Momentum SGD: g' = g + wd·w, v = momentum·v + g', w = w − lr·v.
class Sgd {
 public:
  Sgd(nn::NamedTensors<float> parameters, const SgdOptions& options);

  // Rejects any parameter without a gradient.
  void step();
  void zero_grad();

  double lr() const { return options_.lr; }
  void set_lr(double lr);
  const SgdOptions& options() const { return options_; }

  std::size_t size() const { return params_.size(); }
  const std::vector<float>& velocity(std::size_t index) const { return velocity_.at(index); }

 private:
  nn::NamedTensors<float> params_;
  std::vector<bool> decay_;
  std::vector<std::vector<float>> velocity_;
  SgdOptions options_;
};

// lr(epoch) = base_lr · gamma^floor(epoch / step_epochs)
struct StepSchedule {
  double base_lr = 0.01;
  double gamma = 0.1;
  std::size_t step_epochs = 10;

  double lr_at(std::size_t epoch) const;
};

}  // namespace vidistill::optim
