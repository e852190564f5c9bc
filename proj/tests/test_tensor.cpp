#include <cmath>
#include <vector>

#include "doctest.h"

#include "cdfsl/gradcheck.hpp"
#include "cdfsl/optim.hpp"
#include "cdfsl/tensor.hpp"

using namespace cdfsl;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0, bool rg = true) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (double& v : t.raw()) v = rng.uniform(-scale, scale);
  return t;
}

GradCheckOptions loose_floor() {
  GradCheckOptions opt;
  opt.analytic_floor = 1e-4;
  return opt;
}

// Independent scalar-loop cross-entropy: -(1/B) sum t * log softmax(p).
double ce_oracle(const Tensor& logits, const Tensor& target) {
  const int b = logits.dim(0), c = logits.dim(1);
  auto lv = logits.values();
  auto tv = target.values();
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    double mx = lv[static_cast<std::size_t>(i) * c];
    for (int j = 1; j < c; ++j) {
      mx = std::max(mx, lv[static_cast<std::size_t>(i) * c + j]);
    }
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(lv[static_cast<std::size_t>(i) * c + j] - mx);
    for (int j = 0; j < c; ++j) {
      double logp = lv[static_cast<std::size_t>(i) * c + j] - mx - std::log(z);
      total -= tv[static_cast<std::size_t>(i) * c + j] * logp;
    }
  }
  return total / b;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(i2, a);
  CHECK(c.values()[0] == 1.0);
  CHECK(c.values()[1] == 2.0);
  CHECK(c.values()[2] == 3.0);
  CHECK(c.values()[3] == 4.0);

  Tensor p = Tensor::from({2, 2}, {1, 0, 0, 0});
  Tensor q = Tensor::from({2, 2}, {0, 1, 1, 0});
  Tensor r = matmul(p, q);
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 1.0);
  CHECK(r.values()[2] == 0.0);
  CHECK(r.values()[3] == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3x4]"), ShapeError);
}

TEST_CASE("matmul gradient vs finite differences") {
  RngStream rng(42);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  auto f = [&]() { return sum_all(matmul(a, b)); };
  GradCheckResult r = finite_diff_check(f, {a, b}, 1e-5, loose_floor());
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax trivial rows") {
  Tensor u = softmax(Tensor::from({1, 5}, {0, 0, 0, 0, 0}));
  for (double v : u.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  Tensor big = softmax(Tensor::from({1, 2}, {1000.0, 0.0}));
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(big.values()[0]));

  Tensor two = softmax(Tensor::from({1, 2}, {2.0, 0.0}));
  CHECK(two.values()[0] == doctest::Approx(0.8807970779778823).epsilon(1e-12));
  CHECK(two.values()[1] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
}

TEST_CASE("softmax rejects non-finite input") {
  CHECK_THROWS_AS(softmax(Tensor::from({1, 2}, {std::nan(""), 0.0})), NumericError);
  CHECK_THROWS_AS(softmax(Tensor::from({1, 2}, {std::numeric_limits<double>::infinity(), 0.0})),
                  NumericError);
}

TEST_CASE("softmax rows sum to one, including huge logits") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    RngStream rng(seed);
    Tensor x = random_tensor({4, 7}, rng, seed % 2 ? 1000.0 : 3.0, false);
    Tensor y = softmax(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += y.values()[static_cast<std::size_t>(r) * 7 + c];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross entropy trivial values") {
  // Uniform 5-class prediction against a one-hot target: ln 5.
  Tensor logits = Tensor::zeros({1, 5}, true);
  Tensor target = Tensor::from({1, 5}, {0, 0, 1, 0, 0});
  CHECK(cross_entropy(logits, target).item() ==
        doctest::Approx(1.6094379124341003).epsilon(1e-12));

  // Target equal to softmax(pred): CE equals the entropy of that distribution.
  Tensor l2 = Tensor::from({1, 3}, {0.7, -0.2, 1.4});
  Tensor sm = softmax(l2);
  double entropy = 0.0;
  for (double p : sm.values()) entropy -= p * std::log(p);
  CHECK(cross_entropy(l2, sm.detach()).item() == doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("cross entropy matches the scalar-loop oracle") {
  RngStream rng(7);
  Tensor logits = random_tensor({2, 6}, rng, 2.0);
  std::vector<double> t(12);
  for (int r = 0; r < 2; ++r) {
    double s = 0.0;
    for (int c = 0; c < 6; ++c) {
      t[static_cast<std::size_t>(r) * 6 + c] = rng.uniform(0.01, 1.0);
      s += t[static_cast<std::size_t>(r) * 6 + c];
    }
    for (int c = 0; c < 6; ++c) t[static_cast<std::size_t>(r) * 6 + c] /= s;
  }
  Tensor target = Tensor::from({2, 6}, t);
  CHECK(std::fabs(cross_entropy(logits, target).item() - ce_oracle(logits, target)) < 1e-10);
}

TEST_CASE("cross entropy validates targets") {
  Tensor logits = Tensor::zeros({1, 3}, true);
  CHECK_THROWS_AS(cross_entropy(logits, Tensor::from({1, 3}, {0.5, 0.2, 0.2})), ValidationError);
  Tensor grad_target = Tensor::from({1, 3}, {0.2, 0.3, 0.5}, true);
  CHECK_THROWS_AS(cross_entropy(logits, grad_target), ValidationError);
}

TEST_CASE("cross entropy nonnegative, zero only in the point-mass limit") {
  RngStream rng(11);
  for (int i = 0; i < 20; ++i) {
    Tensor logits = random_tensor({1, 4}, rng, 3.0, false);
    int arg = 0;
    for (int c = 1; c < 4; ++c) {
      if (logits.values()[static_cast<std::size_t>(c)] >
          logits.values()[static_cast<std::size_t>(arg)]) {
        arg = c;
      }
    }
    std::vector<double> hot(4, 0.0);
    hot[static_cast<std::size_t>(arg)] = 1.0;
    double ce = cross_entropy(logits, Tensor::from({1, 4}, hot)).item();
    CHECK(ce > 0.0);
  }
  // +inf margin limit: prediction is numerically a point mass.
  double ce = cross_entropy(Tensor::from({1, 2}, {100.0, 0.0}),
                            Tensor::from({1, 2}, {1.0, 0.0}))
                  .item();
  CHECK(ce >= 0.0);
  CHECK(ce < 1e-10);
}

TEST_CASE("layer norm trivial and gradient") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor constant = Tensor::full({1, 4}, 3.7);
  Tensor y = layer_norm(constant, gain, bias, 1e-5);
  for (double v : y.values()) CHECK(std::fabs(v) < 1e-9);

  Tensor pm = layer_norm(Tensor::from({1, 2}, {1.0, -1.0}), Tensor::full({2}, 1.0),
                         Tensor::zeros({2}), 1e-12);
  CHECK(pm.values()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pm.values()[1] == doctest::Approx(-1.0).epsilon(1e-6));

  CHECK_THROWS_AS(layer_norm(Tensor::from({1, 1}, {2.0}), Tensor::full({1}, 1.0),
                             Tensor::zeros({1}), 1e-5),
                  ValidationError);

  RngStream rng(3);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor g = random_tensor({5}, rng);
  Tensor b = random_tensor({5}, rng);
  RngStream prng(99);
  Tensor w = random_tensor({3, 5}, prng, 1.0, false);
  auto f2 = [&]() { return sum_all(mul(layer_norm(x, g, b, 1e-5), w)); };
  GradCheckResult r = finite_diff_check(f2, {x, g, b}, 1e-5, loose_floor());
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("per-op gradients match finite differences across seeds") {
  for (std::uint64_t seed = 0; seed < 52; ++seed) {
    RngStream rng(seed * 977 + 13);
    const int rows = 2 + rng.uniform_int(3);
    const int cols = 2 + rng.uniform_int(3);
    Tensor a = random_tensor({rows, cols}, rng);
    Tensor b = random_tensor({rows, cols}, rng);
    Tensor bias = random_tensor({cols}, rng);
    Tensor w1 = random_tensor({rows, cols}, rng, 1.0, false);
    Tensor w2 = random_tensor({cols, rows}, rng, 1.0, false);

    switch (seed % 16) {
      case 0: {
        auto f = [&]() { return sum_all(mul(add(a, b), w1)); };
        CHECK(finite_diff_check(f, {a, b}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 1: {
        auto f = [&]() { return sum_all(mul(add(a, bias), w1)); };
        CHECK(finite_diff_check(f, {a, bias}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 2: {
        auto f = [&]() { return sum_all(mul(sub(a, b), w1)); };
        CHECK(finite_diff_check(f, {a, b}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 3: {
        auto f = [&]() { return sum_all(mul(mul(a, b), w1)); };
        CHECK(finite_diff_check(f, {a, b}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 4: {
        auto f = [&]() { return sum_all(mul(gelu(a), w1)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 5: {
        auto f = [&]() { return sum_all(mul(softmax(a), w1)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 6: {
        auto f = [&]() { return mean_all(mul(transpose2d(a), w2)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 7: {
        std::vector<int> idx = {rows - 1, 0, rows - 1};
        Tensor wg = random_tensor({3, cols}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(gather_rows(a, idx), wg)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 8: {
        std::vector<int> idx = {0, rows - 1};
        Tensor rows_t = random_tensor({2, cols}, rng);
        auto f = [&]() { return sum_all(mul(scatter_rows(a, idx, rows_t), w1)); };
        CHECK(finite_diff_check(f, {a, rows_t}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 9: {
        Tensor wb = random_tensor({4, cols}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(broadcast_row(bias, 4), wb)); };
        CHECK(finite_diff_check(f, {bias}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 10: {
        Tensor ws = random_tensor({rows, 1}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(slice_cols(a, cols - 1, 1), ws)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 11: {
        Tensor wt = random_tensor({rows * 3, cols}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(tile_rows(a, 3), wt)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 12: {
        Tensor wm = random_tensor({1, cols}, rng, 1.0, false);
        auto f = [&]() {
          return sum_all(mul(block_mean_rows(concat_rows({a, b}), rows * 2), wm));
        };
        CHECK(finite_diff_check(f, {a, b}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 13: {
        Tensor wc = random_tensor({rows, 2 * cols}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(concat_cols({a, b}), wc)); };
        CHECK(finite_diff_check(f, {a, b}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      case 14: {
        Tensor wr = random_tensor({1, cols}, rng, 1.0, false);
        auto f = [&]() { return sum_all(mul(slice_rows(a, rows - 1, 1), wr)); };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        auto f2 = [&]() { return sum_all(mul(batch_standardize(a, 1e-5), w1)); };
        CHECK(finite_diff_check(f2, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
      default: {
        Tensor wv = random_tensor({rows * cols}, rng, 1.0, false);
        auto f = [&]() {
          Tensor flat = reshape(a, {rows * cols});
          return sum_all(mul(flat, wv));
        };
        CHECK(finite_diff_check(f, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        Tensor wm = random_tensor({cols}, rng, 1.0, false);
        auto f2 = [&]() { return sum_all(mul(mean_rows(a), wm)); };
        CHECK(finite_diff_check(f2, {a}, 1e-5, loose_floor()).max_rel_error < 1e-5);
        break;
      }
    }
  }
}

TEST_CASE("cross entropy gradient vs finite differences") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RngStream rng(seed + 1234);
    Tensor logits = random_tensor({3, 5}, rng, 2.0);
    std::vector<double> t(15);
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int c = 0; c < 5; ++c) {
        t[static_cast<std::size_t>(r) * 5 + c] = rng.uniform(0.05, 1.0);
        s += t[static_cast<std::size_t>(r) * 5 + c];
      }
      for (int c = 0; c < 5; ++c) t[static_cast<std::size_t>(r) * 5 + c] /= s;
    }
    Tensor target = Tensor::from({3, 5}, t);
    auto f = [&]() { return cross_entropy(logits, target); };
    GradCheckResult r = finite_diff_check(f, {logits}, 1e-5, loose_floor());
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("tape replay is deterministic and clears afterwards") {
  RngStream rng(5);
  Tensor x = random_tensor({2, 2}, rng);
  GradTape tape;
  Tensor y = sum_all(mul(x, x));
  tape.backward_keep(y);
  std::vector<double> g1 = *x.grad();
  tape.backward_keep(y);
  std::vector<double> g2 = *x.grad();
  CHECK(g1 == g2);  // bit-identical replay
  tape.backward(y);
  CHECK(tape.size() == 0);
}

TEST_CASE("gradients accumulate across multiple uses") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  GradTape tape;
  Tensor y = add(x, x);  // dy/dx = 2
  tape.backward(sum_all(y));
  CHECK((*x.grad())[0] == doctest::Approx(2.0));
}

TEST_CASE("detach blocks gradient flow") {
  Tensor x = Tensor::from({1}, {2.0}, true);
  GradTape tape;
  Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  Tensor y = add(x, d);
  tape.backward(sum_all(y));
  CHECK((*x.grad())[0] == doctest::Approx(1.0));  // only the live path
  CHECK(d.grad() == nullptr);
}

TEST_CASE("non-participating tensors keep no gradient") {
  Tensor x = Tensor::from({1}, {1.0}, true);
  Tensor unused = Tensor::from({1}, {5.0}, true);
  GradTape tape;
  Tensor y = mul(x, x);
  tape.backward(y);
  CHECK(unused.grad() == nullptr);
}

TEST_CASE("sgd step hand cases") {
  OptimizerConfig cfg;
  cfg.learning_rate_base = 0.1;
  ModelParams params;
  params.insert("enc.w", Tensor::from({1}, {1.0}, true));
  GradMap grads{{"enc.w", {1.0}}};
  sgd_step(params, grads, cfg, {}, nullptr);
  CHECK(params.at("enc.w").values()[0] == doctest::Approx(0.9).epsilon(1e-15));

  // Frozen group stays bit-identical.
  ModelParams frozen;
  frozen.insert("head.w", Tensor::from({2}, {0.25, -1.5}, true));
  GradMap g2{{"head.w", {10.0, 10.0}}};
  sgd_step(frozen, g2, cfg, {{"head", 0.0}}, nullptr);
  CHECK(frozen.at("head.w").values()[0] == 0.25);
  CHECK(frozen.at("head.w").values()[1] == -1.5);
}

TEST_CASE("sgd momentum matches the hand-unrolled recurrence") {
  OptimizerConfig cfg;
  cfg.learning_rate_base = 0.1;
  cfg.momentum = 0.9;
  ModelParams params;
  params.insert("enc.w", Tensor::from({1}, {1.0}, true));
  GradMap velocity;
  const double g1 = 0.5, g2 = -0.25, lr = 0.1, m = 0.9;
  sgd_step(params, {{"enc.w", {g1}}}, cfg, {}, &velocity);
  sgd_step(params, {{"enc.w", {g2}}}, cfg, {}, &velocity);
  double v1 = g1;
  double theta = 1.0 - lr * v1;
  double v2 = m * v1 + g2;
  theta -= lr * v2;
  CHECK(params.at("enc.w").values()[0] == doctest::Approx(theta).epsilon(1e-15));
}

TEST_CASE("sgd missing gradient is a consistency error") {
  OptimizerConfig cfg;
  cfg.learning_rate_base = 0.1;
  ModelParams params;
  params.insert("enc.w", Tensor::from({1}, {1.0}, true));
  GradMap empty;
  CHECK_THROWS_AS(sgd_step(params, empty, cfg, {}, nullptr), ConsistencyError);
}

TEST_CASE("sgd weight decay enters the update") {
  OptimizerConfig cfg;
  cfg.learning_rate_base = 0.1;
  cfg.weight_decay = 0.5;
  ModelParams params;
  params.insert("enc.w", Tensor::from({1}, {2.0}, true));
  sgd_step(params, {{"enc.w", {0.0}}}, cfg, {}, nullptr);
  // theta - lr * wd * theta = 2 - 0.1 * 0.5 * 2
  CHECK(params.at("enc.w").values()[0] == doctest::Approx(1.9).epsilon(1e-15));
}

TEST_CASE("finite diff check on a polynomial") {
  Tensor theta = Tensor::from({1}, {3.0}, true);
  auto f = [&]() { return mul(theta, theta); };
  GradCheckResult r = finite_diff_check(f, {theta}, 1e-5);
  CHECK(r.checked == 1);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("finite diff check reports near-zero numeric for constant f") {
  Tensor theta = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  auto f = [&]() { return add(sum_all(scale(theta, 0.0)), Tensor::scalar(4.0)); };
  GradCheckResult r = finite_diff_check(f, {theta}, 1e-5);
  CHECK(r.checked == 0);
  CHECK(r.skipped == 3);
  CHECK(r.max_abs_numeric_skipped <= 1e-5);
}

TEST_CASE("finite diff check rejects non-deterministic functions") {
  Tensor theta = Tensor::from({1}, {1.0}, true);
  int calls = 0;
  auto f = [&]() {
    ++calls;
    return scale(theta, static_cast<double>(calls));
  };
  CHECK_THROWS_AS(finite_diff_check(f, {theta}, 1e-5), OracleError);
}

TEST_CASE("finite diff check validates h") {
  Tensor theta = Tensor::from({1}, {1.0}, true);
  auto f = [&]() { return mul(theta, theta); };
  CHECK_THROWS_AS(finite_diff_check(f, {theta}, 1e-8), ValidationError);
  CHECK_THROWS_AS(finite_diff_check(f, {theta}, 1e-2), ValidationError);
}
