#include "cdfsl/optim.hpp"

#include <cmath>

namespace cdfsl {

void OptimizerConfig::validate() const {
  if (!(learning_rate_base > 0.0)) {
    throw ValidationError("OptimizerConfig: learning_rate_base must be positive");
  }
  if (weight_decay < 0.0) throw ValidationError("OptimizerConfig: weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ValidationError("OptimizerConfig: momentum must be in [0, 1)");
  }
}

void sgd_step(ModelParams& params, const GradMap& grads, const OptimizerConfig& cfg,
              const LrScaleMap& lr_scale_per_group, GradMap* velocity) {
  cfg.validate();
  for (auto& [name, tensor] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw ConsistencyError("sgd_step: missing gradient for trainable parameter " + name);
    }
    const std::vector<double>& g = git->second;
    std::vector<double>& theta = tensor.raw();
    if (g.size() != theta.size()) {
      throw ConsistencyError("sgd_step: gradient shape mismatch for " + name);
    }
    double scale = 1.0;
    auto sit = lr_scale_per_group.find(param_group(name));
    if (sit != lr_scale_per_group.end()) scale = sit->second;
    const double step_size = cfg.learning_rate_base * scale;
    if (step_size == 0.0) continue;  // frozen group: bit-identical params

    if (cfg.momentum > 0.0) {
      if (velocity == nullptr) {
        throw ConsistencyError("sgd_step: momentum requires a velocity buffer");
      }
      std::vector<double>& v = (*velocity)[name];
      if (v.size() != theta.size()) v.assign(theta.size(), 0.0);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * theta[i]);
        theta[i] -= step_size * v[i];
      }
    } else {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] -= step_size * (g[i] + cfg.weight_decay * theta[i]);
      }
    }
  }
}

SgdOptimizer::SgdOptimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void SgdOptimizer::step(ModelParams& params, const LrScaleMap& lr_scale_per_group) {
  GradMap grads;
  for (const auto& [name, tensor] : params) {
    const std::vector<double>* g = tensor.grad();
    if (g == nullptr) {
      throw ConsistencyError("sgd_step: missing gradient for trainable parameter " + name);
    }
    grads.emplace(name, *g);
  }
  sgd_step(params, grads, cfg_, lr_scale_per_group, &velocity_);
}

}  // namespace cdfsl
