#pragma once

#include <cstdint>
#include <vector>

#include "cdfsl/data.hpp"
#include "cdfsl/model.hpp"

namespace cdfsl {

// Plain row-major matrix for the probe path (no gradient tape involved).
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
  double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }
};

// One N-way K-shot task. Members hold flat indices into the target test view;
// labels are episode-local (0..N-1, classes in ascending class-index order).
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
  std::vector<int> class_indices;  // chosen classes, ascending
  std::vector<int> support;
  std::vector<int> support_labels;
  std::vector<int> query;
  std::vector<int> query_labels;
};

Episode sample_episode(const SplitView& target_test, int n_way, int k_shot, int q_per_class,
                       RngStream& rng);

// Pooled encoder outputs for clean clips, gradient-free. Rows align with the
// input order and do not depend on batch grouping.
FeatureMatrix extract_features(const EncoderConfig& model_cfg, const ModelParams& encoder,
                               const ClipSpec& spec, const std::vector<Tensor>& clips);

struct LogRegHead {
  FeatureMatrix weights;       // [D x N]
  std::vector<double> bias;    // [N]
  int iterations = 0;
  bool converged = false;
};

// Multinomial logistic regression by full-batch gradient descent with
// backtracking line search; objective = mean NLL + (reg_l2 / 2) * ||W||^2.
LogRegHead fit_logreg(const FeatureMatrix& features, const std::vector<int>& labels,
                      int n_classes, double reg_l2, int max_iter, double tol);

// Objective value at the given head (exposed for monotonicity checks).
double logreg_objective(const FeatureMatrix& features, const std::vector<int>& labels,
                        const LogRegHead& head, double reg_l2);

// Argmax class per row; ties resolve to the lowest index.
std::vector<int> logreg_predict(const LogRegHead& head, const FeatureMatrix& features);

struct EvalConfig {
  int n_way = 5;
  int k_shot = 5;
  int q_per_class = 15;
  int episodes = 200;
  double reg_l2 = 1e-3;
  int max_iter = 500;
  double tol = 1e-6;
  bool normalize_features = false;

  void validate() const;
};

struct EvalReport {
  std::vector<double> per_episode;
  double mean = 0.0;
  double ci95 = 0.0;
  // config echo
  int n_way = 0;
  int k_shot = 0;
  int q_per_class = 0;
  int episodes = 0;
  std::uint64_t seed = 0;
};

// Stage 3: episodic evaluation. Features for the whole test split are
// extracted once; each episode fits a fresh probe on its support rows.
// Episode e draws from a stream keyed by (seed, e), so any execution order
// yields the same report.
EvalReport evaluate(const EncoderConfig& model_cfg, const ModelParams& encoder,
                    const ClipSpec& spec, const SplitView& target_test, const EvalConfig& cfg,
                    std::uint64_t seed);

// Variant reusing an existing feature cache (k-shot sweeps).
EvalReport evaluate_with_features(const FeatureMatrix& features, const SplitView& target_test,
                                  const EvalConfig& cfg, std::uint64_t seed);

}  // namespace cdfsl
