#pragma once

#include <map>
#include <string>
#include <vector>

#include "cdfsl/tensor.hpp"

namespace cdfsl {

struct OptimizerConfig {
  double learning_rate_base = 0.01;
  double weight_decay = 0.0;
  double momentum = 0.0;

  void validate() const;
};

using GradMap = std::map<std::string, std::vector<double>>;
using LrScaleMap = std::map<std::string, double>;

// theta <- theta - lr * scale(group) * v, with v = momentum * v + (g + wd * theta).
// Every parameter must have an aligned gradient; a group scale of zero leaves
// that group's parameters bit-identical. velocity may be null when momentum == 0.
void sgd_step(ModelParams& params, const GradMap& grads, const OptimizerConfig& cfg,
              const LrScaleMap& lr_scale_per_group, GradMap* velocity);

// Stateful wrapper holding momentum buffers; reads gradients from the
// parameter tensors (backward must have run).
class SgdOptimizer {
 public:
  explicit SgdOptimizer(OptimizerConfig cfg);

  void step(ModelParams& params, const LrScaleMap& lr_scale_per_group = {});

  GradMap& velocity() { return velocity_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  GradMap velocity_;
};

}  // namespace cdfsl
