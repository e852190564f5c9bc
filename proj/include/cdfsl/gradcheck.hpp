#pragma once

#include <functional>
#include <vector>

#include "cdfsl/rng.hpp"
#include "cdfsl/tensor.hpp"

namespace cdfsl {

struct GradCheckOptions {
  int max_coords_per_tensor = 32;
  // Coordinates whose analytic gradient magnitude falls below this floor are
  // excluded from the relative-error maximum (central differences cannot
  // resolve them); their numeric magnitude is reported separately.
  double analytic_floor = 1e-3;
  std::uint64_t sample_seed = 0x5eed;
};

struct GradCheckResult {
  double max_rel_error = 0.0;           // over coordinates above the floor
  double max_abs_numeric_skipped = 0.0; // over coordinates below the floor
  int checked = 0;
  int skipped = 0;
};

// Central-difference check of reverse-mode gradients.
//
// f must rebuild the loss graph from the current parameter values on every
// call. The checker first runs f under a tape to obtain analytic gradients,
// verifies determinism with a second tape-free evaluation, then perturbs
// sampled coordinates of each parameter by +-h and compares
// (f(x+h) - f(x-h)) / 2h against the analytic value using
// |analytic - numeric| / (|analytic| + 1e-12).
GradCheckResult finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params, double h,
                                  const GradCheckOptions& opt = {});

}  // namespace cdfsl
