#include "cdfsl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cdfsl {

GradCheckResult finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params, double h,
                                  const GradCheckOptions& opt) {
  if (h < 1e-7 || h > 1e-3) {
    throw ValidationError("finite_diff_check: h must lie in [1e-7, 1e-3]");
  }
  for (const Tensor& p : params) {
    if (!p.defined() || !p.requires_grad()) {
      throw ValidationError("finite_diff_check: all checked params must require gradients");
    }
  }

  double base_value;
  std::vector<std::vector<double>> analytic(params.size());
  {
    GradTape tape;
    Tensor loss = f();
    base_value = loss.item();
    tape.backward(loss);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const std::vector<double>* g = params[p].grad();
      if (g == nullptr) {
        analytic[p].assign(params[p].size(), 0.0);
      } else {
        analytic[p] = *g;
      }
    }
  }

  {
    TapePause pause;
    double again = f().item();
    if (again != base_value) {
      throw OracleError("finite_diff_check: f is not deterministic (" + std::to_string(base_value) +
                        " vs " + std::to_string(again) + ")");
    }
  }

  GradCheckResult result;
  RngStream rng(opt.sample_seed);
  TapePause pause;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor param = params[p];
    std::vector<double>& theta = param.raw();
    const int n = static_cast<int>(theta.size());
    std::vector<int> coords;
    if (n <= opt.max_coords_per_tensor) {
      coords.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      coords = rng.sample_without_replacement(n, opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (int i : coords) {
      const double saved = theta[static_cast<std::size_t>(i)];
      theta[static_cast<std::size_t>(i)] = saved + h;
      const double fp = f().item();
      theta[static_cast<std::size_t>(i)] = saved - h;
      const double fm = f().item();
      theta[static_cast<std::size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[p][static_cast<std::size_t>(i)];
      if (std::fabs(a) >= opt.analytic_floor) {
        double rel = std::fabs(a - numeric) / (std::fabs(a) + 1e-12);
        result.max_rel_error = std::max(result.max_rel_error, rel);
        ++result.checked;
      } else {
        result.max_abs_numeric_skipped =
            std::max(result.max_abs_numeric_skipped, std::fabs(numeric - a));
        ++result.skipped;
      }
    }
  }
  return result;
}

}  // namespace cdfsl
