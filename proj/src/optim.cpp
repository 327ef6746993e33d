#include "optim.hpp"

#include <cmath>

#include "error.hpp"

namespace vidistill::optim {

bool decays(const Tensor& parameter) { return parameter.rank() >= 2; }

Sgd::Sgd(nn::NamedTensors<float> parameters, const SgdOptions& options)
    : params_(std::move(parameters)), options_(options) {
  if (!(options.momentum >= 0.0 && options.momentum < 1.0)) {
    usage_error("momentum must be in [0,1), got ", options.momentum);
  }
  if (!(options.weight_decay >= 0.0)) usage_error("weight decay must be >= 0");
  set_lr(options.lr);
  for (const auto& [name, t] : params_) {
    if (!t.is_leaf() || !t.requires_grad()) usage_error("parameter ", name, " is not a trainable leaf");
    decay_.push_back(decays(t));
    velocity_.emplace_back(t.numel(), 0.0f);
  }
}

void Sgd::set_lr(double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) usage_error("learning rate must be positive, got ", lr);
  options_.lr = lr;
}

void Sgd::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) usage_error("parameter ", name, " has no gradient");
  }
  const auto lr = static_cast<float>(options_.lr);
  const auto mom = static_cast<float>(options_.momentum);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    const float wd = decay_[i] ? static_cast<float>(options_.weight_decay) : 0.0f;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = g[j] + wd * w[j];
      v[j] = mom * v[j] + gj;
      w[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double StepSchedule::lr_at(std::size_t epoch) const {
  if (step_epochs == 0) usage_error("lr_step_epochs must be positive");
  return base_lr * std::pow(gamma, static_cast<double>(epoch / step_epochs));
}

}  // namespace vidistill::optim
