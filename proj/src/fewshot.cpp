#include "cdfsl/fewshot.hpp"

#include <algorithm>
#include <cmath>

namespace cdfsl {

namespace {

// Row softmax into `out` (same layout as logits).
void softmax_rows_plain(const std::vector<double>& logits, int rows, int cols,
                        std::vector<double>& out) {
  out.resize(logits.size());
  for (int r = 0; r < rows; ++r) {
    const double* x = logits.data() + static_cast<std::size_t>(r) * cols;
    double* y = out.data() + static_cast<std::size_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= sum;
  }
}

void compute_logits(const FeatureMatrix& X, const FeatureMatrix& W, const std::vector<double>& b,
                    std::vector<double>& logits) {
  const int n = X.rows, d = X.cols, k = W.cols;
  logits.assign(static_cast<std::size_t>(n) * k, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* xi = X.row(i);
    double* li = logits.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) li[j] = b[static_cast<std::size_t>(j)];
    for (int f = 0; f < d; ++f) {
      const double xv = xi[f];
      const double* wf = W.row(f);
      for (int j = 0; j < k; ++j) li[j] += xv * wf[j];
    }
  }
}

double objective_impl(const FeatureMatrix& X, const std::vector<int>& y, const FeatureMatrix& W,
                      const std::vector<double>& b, double reg_l2) {
  std::vector<double> logits;
  compute_logits(X, W, b, logits);
  const int n = X.rows, k = W.cols;
  double nll = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* li = logits.data() + static_cast<std::size_t>(i) * k;
    double mx = li[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, li[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(li[j] - mx);
    nll -= li[y[static_cast<std::size_t>(i)]] - mx - std::log(sum);
  }
  nll /= static_cast<double>(n);
  double reg = 0.0;
  for (double w : W.v) reg += w * w;
  return nll + 0.5 * reg_l2 * reg;
}

}  // namespace

Episode sample_episode(const SplitView& target_test, int n_way, int k_shot, int q_per_class,
                       RngStream& rng) {
  if (n_way < 2 || k_shot < 1 || q_per_class < 1) {
    throw ValidationError("sample_episode: need n_way >= 2, k_shot >= 1, q_per_class >= 1");
  }
  if (n_way > target_test.n_classes()) {
    throw CapacityError("sample_episode: requested " + std::to_string(n_way) +
                        "-way but only " + std::to_string(target_test.n_classes()) +
                        " target classes exist");
  }
  if (k_shot + q_per_class > target_test.n_per_class()) {
    throw CapacityError("sample_episode: K + Q = " + std::to_string(k_shot + q_per_class) +
                        " exceeds " + std::to_string(target_test.n_per_class()) +
                        " clips per class");
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;
  ep.class_indices = rng.sample_without_replacement(target_test.n_classes(), n_way);
  std::sort(ep.class_indices.begin(), ep.class_indices.end());
  const int per_class = target_test.n_per_class();
  for (int local = 0; local < n_way; ++local) {
    const int ci = ep.class_indices[static_cast<std::size_t>(local)];
    std::vector<int> picks = rng.sample_without_replacement(per_class, k_shot + q_per_class);
    for (int s = 0; s < k_shot; ++s) {
      ep.support.push_back(ci * per_class + picks[static_cast<std::size_t>(s)]);
      ep.support_labels.push_back(local);
    }
    for (int q = 0; q < q_per_class; ++q) {
      ep.query.push_back(ci * per_class + picks[static_cast<std::size_t>(k_shot + q)]);
      ep.query_labels.push_back(local);
    }
  }
  return ep;
}

FeatureMatrix extract_features(const EncoderConfig& model_cfg, const ModelParams& encoder,
                               const ClipSpec& spec, const std::vector<Tensor>& clips) {
  FeatureMatrix out(static_cast<int>(clips.size()), model_cfg.embed_dim);
  TapePause pause;
  // Per-clip forward: feature rows cannot depend on batch grouping.
  for (std::size_t i = 0; i < clips.size(); ++i) {
    Tensor tokens = tokenize(clips[i], spec, encoder);
    EncodeResult enc = encode(tokens, model_cfg, encoder);
    auto pooled = enc.pooled.values();
    std::copy(pooled.begin(), pooled.end(), out.row(static_cast<int>(i)));
  }
  return out;
}

double logreg_objective(const FeatureMatrix& features, const std::vector<int>& labels,
                        const LogRegHead& head, double reg_l2) {
  return objective_impl(features, labels, head.weights, head.bias, reg_l2);
}

LogRegHead fit_logreg(const FeatureMatrix& features, const std::vector<int>& labels,
                      int n_classes, double reg_l2, int max_iter, double tol) {
  const int n = features.rows, d = features.cols;
  if (n < 1 || static_cast<int>(labels.size()) != n) {
    throw ValidationError("fit_logreg: features and labels must align");
  }
  if (n_classes < 2) throw ValidationError("fit_logreg: need at least two classes");
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ValidationError("fit_logreg: label out of range");
    seen[static_cast<std::size_t>(y)] = 1;
  }
  for (int c = 0; c < n_classes; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) {
      throw ValidationError("fit_logreg: class " + std::to_string(c) + " has no samples");
    }
  }
  for (double x : features.v) {
    if (!std::isfinite(x)) throw ValidationError("fit_logreg: non-finite feature");
  }

  LogRegHead head;
  head.weights = FeatureMatrix(d, n_classes);
  head.bias.assign(static_cast<std::size_t>(n_classes), 0.0);

  std::vector<double> logits, probs;
  FeatureMatrix grad_w(d, n_classes);
  std::vector<double> grad_b(static_cast<std::size_t>(n_classes));
  FeatureMatrix cand_w(d, n_classes);
  std::vector<double> cand_b(static_cast<std::size_t>(n_classes));

  double step = 1.0;
  double fcur = objective_impl(features, labels, head.weights, head.bias, reg_l2);
  for (int iter = 0; iter < max_iter; ++iter) {
    compute_logits(features, head.weights, head.bias, logits);
    softmax_rows_plain(logits, n, n_classes, probs);
    std::fill(grad_w.v.begin(), grad_w.v.end(), 0.0);
    std::fill(grad_b.begin(), grad_b.end(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int i = 0; i < n; ++i) {
      const double* xi = features.row(i);
      double* pi = probs.data() + static_cast<std::size_t>(i) * n_classes;
      pi[labels[static_cast<std::size_t>(i)]] -= 1.0;  // P - Y in place
      for (int j = 0; j < n_classes; ++j) grad_b[static_cast<std::size_t>(j)] += pi[j] * inv_n;
      for (int f = 0; f < d; ++f) {
        const double xv = xi[f] * inv_n;
        double* gw = grad_w.row(f);
        for (int j = 0; j < n_classes; ++j) gw[j] += xv * pi[j];
      }
    }
    for (std::size_t i = 0; i < grad_w.v.size(); ++i) grad_w.v[i] += reg_l2 * head.weights.v[i];

    double gmax = 0.0;
    double gsq = 0.0;
    for (double g : grad_w.v) {
      gmax = std::max(gmax, std::fabs(g));
      gsq += g * g;
    }
    for (double g : grad_b) {
      gmax = std::max(gmax, std::fabs(g));
      gsq += g * g;
    }
    head.iterations = iter;
    if (gmax < tol) {
      head.converged = true;
      return head;
    }

    // Backtracking with Armijo on the descent step.
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      for (std::size_t i = 0; i < cand_w.v.size(); ++i) {
        cand_w.v[i] = head.weights.v[i] - step * grad_w.v[i];
      }
      for (std::size_t i = 0; i < cand_b.size(); ++i) {
        cand_b[i] = head.bias[i] - step * grad_b[i];
      }
      double fc = objective_impl(features, labels, cand_w, cand_b, reg_l2);
      if (fc <= fcur - 1e-4 * step * gsq) {
        head.weights.v.swap(cand_w.v);
        head.bias.swap(cand_b);
        fcur = fc;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No descent direction at floating-point resolution; treat as converged.
      head.converged = true;
      head.iterations = iter;
      return head;
    }
    step = std::min(step * 2.0, 1e6);
  }
  head.iterations = max_iter;
  return head;
}

std::vector<int> logreg_predict(const LogRegHead& head, const FeatureMatrix& features) {
  std::vector<double> logits;
  compute_logits(features, head.weights, head.bias, logits);
  const int k = head.weights.cols;
  std::vector<int> out(static_cast<std::size_t>(features.rows));
  for (int i = 0; i < features.rows; ++i) {
    const double* li = logits.data() + static_cast<std::size_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j) {
      if (li[j] > li[best]) best = j;  // ties keep the lowest index
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

void EvalConfig::validate() const {
  if (n_way < 2) throw ValidationError("EvalConfig: n_way must be >= 2");
  if (k_shot < 1) throw ValidationError("EvalConfig: k_shot must be >= 1");
  if (q_per_class < 1) throw ValidationError("EvalConfig: q_per_class must be >= 1");
  if (episodes < 1) throw ValidationError("EvalConfig: episodes must be >= 1");
  if (reg_l2 < 0.0) throw ValidationError("EvalConfig: reg_l2 must be >= 0");
  if (max_iter < 1) throw ValidationError("EvalConfig: max_iter must be >= 1");
  if (!(tol > 0.0)) throw ValidationError("EvalConfig: tol must be > 0");
}

EvalReport evaluate_with_features(const FeatureMatrix& features, const SplitView& target_test,
                                  const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (features.rows != target_test.size()) {
    throw ConsistencyError("evaluate: feature cache does not cover the test split");
  }
  EvalReport report;
  report.n_way = cfg.n_way;
  report.k_shot = cfg.k_shot;
  report.q_per_class = cfg.q_per_class;
  report.episodes = cfg.episodes;
  report.seed = seed;
  report.per_episode.reserve(static_cast<std::size_t>(cfg.episodes));

  const int d = features.cols;
  for (int e = 0; e < cfg.episodes; ++e) {
    RngStream rng = derive_stream(seed, {stream_tag::kEpisode, static_cast<std::uint64_t>(e)});
    Episode ep = sample_episode(target_test, cfg.n_way, cfg.k_shot, cfg.q_per_class, rng);
    FeatureMatrix sup(static_cast<int>(ep.support.size()), d);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      std::copy(features.row(ep.support[i]), features.row(ep.support[i]) + d,
                sup.row(static_cast<int>(i)));
    }
    FeatureMatrix qry(static_cast<int>(ep.query.size()), d);
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      std::copy(features.row(ep.query[i]), features.row(ep.query[i]) + d,
                qry.row(static_cast<int>(i)));
    }
    LogRegHead head =
        fit_logreg(sup, ep.support_labels, cfg.n_way, cfg.reg_l2, cfg.max_iter, cfg.tol);
    std::vector<int> pred = logreg_predict(head, qry);
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == ep.query_labels[i]) ++correct;
    }
    report.per_episode.push_back(static_cast<double>(correct) /
                                 static_cast<double>(pred.size()));
  }

  double sum = 0.0;
  for (double a : report.per_episode) sum += a;
  report.mean = sum / static_cast<double>(report.per_episode.size());
  if (report.per_episode.size() > 1) {
    double ss = 0.0;
    for (double a : report.per_episode) {
      double dv = a - report.mean;
      ss += dv * dv;
    }
    double sd = std::sqrt(ss / static_cast<double>(report.per_episode.size() - 1));
    report.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(report.per_episode.size()));
  } else {
    report.ci95 = 0.0;  // singleton convention
  }
  return report;
}

EvalReport evaluate(const EncoderConfig& model_cfg, const ModelParams& encoder,
                    const ClipSpec& spec, const SplitView& target_test, const EvalConfig& cfg,
                    std::uint64_t seed) {
  cfg.validate();
  std::vector<Tensor> clips;
  clips.reserve(static_cast<std::size_t>(target_test.size()));
  for (int i = 0; i < target_test.size(); ++i) clips.push_back(target_test.clip(i));
  FeatureMatrix features = extract_features(model_cfg, encoder, spec, clips);
  if (cfg.normalize_features) {
    for (int r = 0; r < features.rows; ++r) {
      double* row = features.row(r);
      double nrm = 0.0;
      for (int c = 0; c < features.cols; ++c) nrm += row[c] * row[c];
      nrm = std::sqrt(nrm);
      if (nrm > 0.0) {
        for (int c = 0; c < features.cols; ++c) row[c] /= nrm;
      }
    }
  }
  return evaluate_with_features(features, target_test, cfg, seed);
}

}  // namespace cdfsl
