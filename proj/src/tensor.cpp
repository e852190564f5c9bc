#include "cdfsl/tensor.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cdfsl {

namespace {

thread_local GradTape* g_active_tape = nullptr;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_finite_span(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Rows/cols view of the last axis: any [d0 x ... x C] tensor is treated as
// (numel/C) rows of width C.
struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView last_axis_rows(const Tensor& t, const char* op) {
  if (t.rank() < 1) throw ShapeError(std::string(op) + ": rank >= 1 required");
  int c = t.dim(t.rank() - 1);
  if (c < 1) throw ShapeError(std::string(op) + ": empty last axis");
  return RowView{t.size() / static_cast<std::size_t>(c), static_cast<std::size_t>(c)};
}

bool tape_should_record(std::initializer_list<const Tensor*> inputs) {
  if (GradTape::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

std::vector<double>& grad_of(const std::shared_ptr<detail::TensorImpl>& impl) {
  return impl->grad;
}

// GEMM microkernels. Lanes are independent elementwise FMA streams, so the
// per-element accumulation order is the plain loop order and results do not
// depend on the SIMD width.
#if defined(__AVX512F__)

// C[m x n] += A[m x k] * B[k x n].
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    int j0 = 0;
    for (; j0 + 16 <= n; j0 += 16) {
      __m512d acc0 = _mm512_loadu_pd(ci + j0);
      __m512d acc1 = _mm512_loadu_pd(ci + j0 + 8);
      for (int kk = 0; kk < k; ++kk) {
        const __m512d av = _mm512_set1_pd(ai[kk]);
        const double* bk = b + static_cast<std::size_t>(kk) * n + j0;
        acc0 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bk), acc0);
        acc1 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bk + 8), acc1);
      }
      _mm512_storeu_pd(ci + j0, acc0);
      _mm512_storeu_pd(ci + j0 + 8, acc1);
    }
    for (; j0 + 8 <= n; j0 += 8) {
      __m512d acc = _mm512_loadu_pd(ci + j0);
      for (int kk = 0; kk < k; ++kk) {
        acc = _mm512_fmadd_pd(_mm512_set1_pd(ai[kk]),
                              _mm512_loadu_pd(b + static_cast<std::size_t>(kk) * n + j0), acc);
      }
      _mm512_storeu_pd(ci + j0, acc);
    }
    if (j0 < n) {
      for (int kk = 0; kk < k; ++kk) {
        const double av = ai[kk];
        const double* bk = b + static_cast<std::size_t>(kk) * n;
        for (int j = j0; j < n; ++j) ci[j] = __builtin_fma(av, bk[j], ci[j]);
      }
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n].
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    double* ck = c + static_cast<std::size_t>(kk) * n;
    int j0 = 0;
    for (; j0 + 16 <= n; j0 += 16) {
      __m512d acc0 = _mm512_loadu_pd(ck + j0);
      __m512d acc1 = _mm512_loadu_pd(ck + j0 + 8);
      for (int i = 0; i < m; ++i) {
        const __m512d av = _mm512_set1_pd(a[static_cast<std::size_t>(i) * k + kk]);
        const double* bi = b + static_cast<std::size_t>(i) * n + j0;
        acc0 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bi), acc0);
        acc1 = _mm512_fmadd_pd(av, _mm512_loadu_pd(bi + 8), acc1);
      }
      _mm512_storeu_pd(ck + j0, acc0);
      _mm512_storeu_pd(ck + j0 + 8, acc1);
    }
    for (; j0 + 8 <= n; j0 += 8) {
      __m512d acc = _mm512_loadu_pd(ck + j0);
      for (int i = 0; i < m; ++i) {
        acc = _mm512_fmadd_pd(_mm512_set1_pd(a[static_cast<std::size_t>(i) * k + kk]),
                              _mm512_loadu_pd(b + static_cast<std::size_t>(i) * n + j0), acc);
      }
      _mm512_storeu_pd(ck + j0, acc);
    }
    if (j0 < n) {
      for (int i = 0; i < m; ++i) {
        const double av = a[static_cast<std::size_t>(i) * k + kk];
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int j = j0; j < n; ++j) ck[j] = __builtin_fma(av, bi[j], ck[j]);
      }
    }
  }
}

#else

void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] = __builtin_fma(av, bk[j], ci[j]);
    }
  }
}

void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      double* ck = c + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ck[j] = __builtin_fma(av, bi[j], ck[j]);
    }
  }
}

#endif


}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("shape dimensions must be positive, got " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  std::size_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->value.assign(n, 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.raw().begin(), t.raw().end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone(bool requires_grad) const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor make_op_output(Shape shape, std::vector<double> value, bool requires_grad) {
  Tensor t = Tensor::from(std::move(shape), std::move(value), requires_grad);
  return t;
}

// ---- GradTape ---------------------------------------------------------------

GradTape::GradTape() : prev_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::current() { return g_active_tape; }

void GradTape::record(std::function<void()> backward_fn,
                      std::initializer_list<std::shared_ptr<detail::TensorImpl>> touched) {
  ops_.push_back(std::move(backward_fn));
  for (const auto& impl : touched) {
    if (impl->requires_grad) touched_.push_back(impl);
  }
}

void GradTape::record(std::function<void()> backward_fn,
                      std::vector<std::shared_ptr<detail::TensorImpl>> touched) {
  ops_.push_back(std::move(backward_fn));
  for (auto& impl : touched) {
    if (impl->requires_grad) touched_.push_back(std::move(impl));
  }
}

void GradTape::run_reverse(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ValidationError("backward: loss must be a defined scalar");
  }
  if (ops_.empty()) throw ValidationError("backward: tape is empty");
  // Fresh gradients every pass: zero every buffer the recorded ops can touch.
  std::unordered_set<detail::TensorImpl*> seen;
  for (const auto& impl : touched_) {
    if (seen.insert(impl.get()).second) {
      impl->grad.assign(impl->value.size(), 0.0);
    }
  }
  auto loss_impl = loss.impl();
  if (loss_impl->grad.empty()) loss_impl->grad.assign(1, 0.0);
  loss_impl->grad[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void GradTape::backward(const Tensor& loss) {
  run_reverse(loss);
  ops_.clear();
  touched_.clear();
}

void GradTape::backward_keep(const Tensor& loss) { run_reverse(loss); }

TapePause::TapePause() : saved_(g_active_tape) { g_active_tape = nullptr; }
TapePause::~TapePause() { g_active_tape = saved_; }

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: rank-2 tensors required, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * static_cast<std::size_t>(n), 0.0);
  mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  bool rec = tape_should_record({&a, &b});
  Tensor c = make_op_output({m, n}, std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), ib = b.impl(), ic = c.impl();
    GradTape::current()->record(
        [ia, ib, ic, m, k, n]() {
          const std::vector<double>& dc = grad_of(ic);
          if (ia->requires_grad) {
            // dA += dC * B^T, via a materialized transpose so the kernel
            // stays reduction-free.
            std::vector<double> bt(static_cast<std::size_t>(n) * k);
            for (int kk = 0; kk < k; ++kk)
              for (int j = 0; j < n; ++j)
                bt[static_cast<std::size_t>(j) * k + kk] =
                    ib->value[static_cast<std::size_t>(kk) * n + j];
            mm_nn(dc.data(), bt.data(), grad_of(ia).data(), m, n, k);
          }
          if (ib->requires_grad) {
            // dB += A^T * dC
            mm_tn(ia->value.data(), dc.data(), grad_of(ib).data(), m, k, n);
          }
        },
        {a.impl(), b.impl(), c.impl()});
  }
  return c;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: rank-2 required, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j) * r + i] = pa[static_cast<std::size_t>(i) * c + j];
  bool rec = tape_should_record({&a});
  Tensor t = make_op_output({c, r}, std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), it = t.impl();
    GradTape::current()->record(
        [ia, it, r, c]() {
          const std::vector<double>& dt = grad_of(it);
          std::vector<double>& da = grad_of(ia);
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              da[static_cast<std::size_t>(i) * c + j] += dt[static_cast<std::size_t>(j) * r + i];
        },
        {a.impl(), t.impl()});
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias_bcast = (b.rank() == 1 && a.rank() == 2 && a.dim(1) == b.dim(0));
  if (!bias_bcast && a.shape() != b.shape()) {
    throw ShapeError("add: shapes disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  if (bias_bcast) {
    const std::size_t rows = static_cast<std::size_t>(a.dim(0));
    const std::size_t cols = static_cast<std::size_t>(a.dim(1));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = pa[i * cols + j] + pb[j];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  }
  bool rec = tape_should_record({&a, &b});
  Tensor c = make_op_output(a.shape(), std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), ib = b.impl(), ic = c.impl();
    GradTape::current()->record(
        [ia, ib, ic, bias_bcast]() {
          const std::vector<double>& dc = grad_of(ic);
          if (ia->requires_grad) {
            std::vector<double>& da = grad_of(ia);
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
          }
          if (ib->requires_grad) {
            std::vector<double>& db = grad_of(ib);
            if (bias_bcast) {
              const std::size_t cols = db.size();
              const std::size_t rows = dc.size() / cols;
              for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) db[j] += dc[i * cols + j];
            } else {
              for (std::size_t i = 0; i < dc.size(); ++i) db[i] += dc[i];
            }
          }
        },
        {a.impl(), b.impl(), c.impl()});
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shapes disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  bool rec = tape_should_record({&a, &b});
  Tensor c = make_op_output(a.shape(), std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), ib = b.impl(), ic = c.impl();
    GradTape::current()->record(
        [ia, ib, ic]() {
          const std::vector<double>& dc = grad_of(ic);
          if (ia->requires_grad) {
            std::vector<double>& da = grad_of(ia);
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
          }
          if (ib->requires_grad) {
            std::vector<double>& db = grad_of(ib);
            for (std::size_t i = 0; i < dc.size(); ++i) db[i] -= dc[i];
          }
        },
        {a.impl(), b.impl(), c.impl()});
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  bool rec = tape_should_record({&a, &b});
  Tensor c = make_op_output(a.shape(), std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), ib = b.impl(), ic = c.impl();
    GradTape::current()->record(
        [ia, ib, ic]() {
          const std::vector<double>& dc = grad_of(ic);
          if (ia->requires_grad) {
            std::vector<double>& da = grad_of(ia);
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * ib->value[i];
          }
          if (ib->requires_grad) {
            std::vector<double>& db = grad_of(ib);
            for (std::size_t i = 0; i < dc.size(); ++i) db[i] += dc[i] * ia->value[i];
          }
        },
        {a.impl(), b.impl(), c.impl()});
  }
  return c;
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
  bool rec = tape_should_record({&a});
  Tensor t = make_op_output(a.shape(), std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), it = t.impl();
    GradTape::current()->record(
        [ia, it, c]() {
          const std::vector<double>& dt = grad_of(it);
          std::vector<double>& da = grad_of(ia);
          for (std::size_t i = 0; i < dt.size(); ++i) da[i] += dt[i] * c;
        },
        {a.impl(), t.impl()});
  }
  return t;
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = pa[i];
    out[i] = x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  }
  bool rec = tape_should_record({&a});
  Tensor t = make_op_output(a.shape(), std::move(out), rec);
  if (rec) {
    auto ia = a.impl(), it = t.impl();
    GradTape::current()->record(
        [ia, it]() {
          const std::vector<double>& dt = grad_of(it);
          std::vector<double>& da = grad_of(ia);
          for (std::size_t i = 0; i < dt.size(); ++i) {
            double x = ia->value[i];
            double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double dens = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            da[i] += dt[i] * (phi + x * dens);
          }
        },
        {a.impl(), t.impl()});
  }
  return t;
}

namespace {

// Shared forward kernel: row-wise stabilized softmax.
void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * cols;
    double* y = out + r * cols;
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  RowView rv = last_axis_rows(logits, "softmax");
  check_finite_span(logits.values(), "softmax");
  std::vector<double> out(logits.size());
  softmax_rows(logits.values().data(), out.data(), rv.rows, rv.cols);
  bool rec = tape_should_record({&logits});
  Tensor y = make_op_output(logits.shape(), std::move(out), rec);
  if (rec) {
    auto ix = logits.impl(), iy = y.impl();
    std::size_t rows = rv.rows, cols = rv.cols;
    GradTape::current()->record(
        [ix, iy, rows, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* yv = iy->value.data() + r * cols;
            const double* dyv = dy.data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += dyv[j] * yv[j];
            double* dxv = dx.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) dxv[j] += yv[j] * (dyv[j] - dot);
          }
        },
        {logits.impl(), y.impl()});
  }
  return y;
}

Tensor cross_entropy(const Tensor& pred_logits, const Tensor& target_dist) {
  if (pred_logits.rank() != 2 || target_dist.rank() != 2 ||
      pred_logits.shape() != target_dist.shape()) {
    throw ShapeError("cross_entropy: expected matching [B x C] tensors, got " +
                     shape_str(pred_logits.shape()) + " and " + shape_str(target_dist.shape()));
  }
  if (target_dist.requires_grad()) {
    throw ValidationError("cross_entropy: target must not require gradients (stop-gradient)");
  }
  check_finite_span(pred_logits.values(), "cross_entropy");
  const std::size_t rows = static_cast<std::size_t>(pred_logits.dim(0));
  const std::size_t cols = static_cast<std::size_t>(pred_logits.dim(1));
  const double* pt = target_dist.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      double v = pt[r * cols + j];
      if (!std::isfinite(v) || v < -1e-12) {
        throw ValidationError("cross_entropy: target row " + std::to_string(r) +
                              " is not a probability distribution");
      }
      s += v;
    }
    if (std::fabs(s - 1.0) > 1e-6) {
      throw ValidationError("cross_entropy: target row " + std::to_string(r) +
                            " sums to " + std::to_string(s) + ", expected 1");
    }
  }
  // Fused log-softmax: loss = -(1/B) sum target * (x - max - log sum exp(x - max))
  const double* px = pred_logits.values().data();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = px + r * cols;
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
    double lse = mx + std::log(sum);
    const double* t = pt + r * cols;
    for (std::size_t j = 0; j < cols; ++j) loss -= t[j] * (x[j] - lse);
  }
  loss /= static_cast<double>(rows);
  bool rec = tape_should_record({&pred_logits});
  Tensor out = make_op_output({1}, {loss}, rec);
  if (rec) {
    auto ix = pred_logits.impl(), it = target_dist.impl(), io = out.impl();
    GradTape::current()->record(
        [ix, it, io, rows, cols]() {
          const double g = grad_of(io)[0] / static_cast<double>(rows);
          std::vector<double>& dx = grad_of(ix);
          std::vector<double> sm(rows * cols);
          softmax_rows(ix->value.data(), sm.data(), rows, cols);
          for (std::size_t i = 0; i < rows * cols; ++i) dx[i] += g * (sm[i] - it->value[i]);
        },
        {pred_logits.impl(), out.impl()});
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  RowView rv = last_axis_rows(x, "layer_norm");
  if (rv.cols < 2) throw ValidationError("layer_norm: last axis must have D >= 2");
  if (eps <= 0.0) throw ValidationError("layer_norm: eps must be positive");
  if (gain.rank() != 1 || bias.rank() != 1 ||
      gain.size() != rv.cols || bias.size() != rv.cols) {
    throw ShapeError("layer_norm: gain/bias must be [D] with D matching the last axis");
  }
  const std::size_t rows = rv.rows, cols = rv.cols;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.values().data();
  const double* pg = gain.values().data();
  const double* pb = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (std::size_t j = 0; j < cols; ++j) {
      double h = (xr[j] - mean) * istd;
      (*xhat)[r * cols + j] = h;
      out[r * cols + j] = h * pg[j] + pb[j];
    }
  }
  bool rec = tape_should_record({&x, &gain, &bias});
  Tensor y = make_op_output(x.shape(), std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), ig = gain.impl(), ib = bias.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, ig, ib, iy, xhat, inv_std, rows, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* dyr = dy.data() + r * cols;
            const double* hr = xhat->data() + r * cols;
            if (ig->requires_grad) {
              std::vector<double>& dg = grad_of(ig);
              for (std::size_t j = 0; j < cols; ++j) dg[j] += dyr[j] * hr[j];
            }
            if (ib->requires_grad) {
              std::vector<double>& db = grad_of(ib);
              for (std::size_t j = 0; j < cols; ++j) db[j] += dyr[j];
            }
            if (ix->requires_grad) {
              std::vector<double>& dx = grad_of(ix);
              double m1 = 0.0, m2 = 0.0;
              for (std::size_t j = 0; j < cols; ++j) {
                double gdy = ig->value[j] * dyr[j];
                m1 += gdy;
                m2 += gdy * hr[j];
              }
              m1 /= static_cast<double>(cols);
              m2 /= static_cast<double>(cols);
              double istd = (*inv_std)[r];
              double* dxr = dx.data() + r * cols;
              for (std::size_t j = 0; j < cols; ++j) {
                double gdy = ig->value[j] * dyr[j];
                dxr[j] += istd * (gdy - m1 - hr[j] * m2);
              }
            }
          }
        },
        {x.impl(), gain.impl(), bias.impl(), y.impl()});
  }
  return y;
}

namespace {

// Gathers the contiguous [L x hd] head slice for clip c, head h, optionally
// pre-scaled.
void gather_head(const double* src, double* dst, int c, int h, int L, int dim, int hd,
                 double mul = 1.0) {
  for (int i = 0; i < L; ++i) {
    const double* row = src + (static_cast<std::size_t>(c) * L + i) * dim + h * hd;
    double* out = dst + static_cast<std::size_t>(i) * hd;
    for (int t = 0; t < hd; ++t) out[t] = row[t] * mul;
  }
}

void scatter_head_add(const double* src, double* dst, int c, int h, int L, int dim, int hd) {
  for (int i = 0; i < L; ++i) {
    const double* in = src + static_cast<std::size_t>(i) * hd;
    double* row = dst + (static_cast<std::size_t>(c) * L + i) * dim + h * hd;
    for (int t = 0; t < hd; ++t) row[t] += in[t];
  }
}

void transpose_into(const double* a, double* at, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      at[static_cast<std::size_t>(j) * rows + i] = a[static_cast<std::size_t>(i) * cols + j];
}

}  // namespace

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                           int heads) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q, k, v must share a rank-2 shape");
  }
  const int rows = q.dim(0), dim = q.dim(1);
  if (batch < 1 || rows % batch != 0) throw ShapeError("attention: rows not divisible by batch");
  if (heads < 1 || dim % heads != 0) throw ShapeError("attention: heads must divide dim");
  const int L = rows / batch;
  const int hd = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t ll = static_cast<std::size_t>(L) * L;
  const std::size_t lh = static_cast<std::size_t>(L) * hd;

  // Saved row-softmax matrices, one [L x L] block per (clip, head); written
  // in full by softmax_rows, so left uninitialized here.
  auto att = std::shared_ptr<double[]>(new double[static_cast<std::size_t>(batch) * heads * ll]);
  std::vector<double> out(q.size(), 0.0);
  const double* pq = q.values().data();
  const double* pk = k.values().data();
  const double* pv = v.values().data();
  std::vector<double> qh(lh), kh(lh), vh(lh), kt(lh), scores(ll), oh(lh);
  for (int c = 0; c < batch; ++c) {
    for (int h = 0; h < heads; ++h) {
      gather_head(pq, qh.data(), c, h, L, dim, hd, sc);
      gather_head(pk, kh.data(), c, h, L, dim, hd);
      gather_head(pv, vh.data(), c, h, L, dim, hd);
      transpose_into(kh.data(), kt.data(), L, hd);
      std::fill(scores.begin(), scores.end(), 0.0);
      mm_nn(qh.data(), kt.data(), scores.data(), L, hd, L);
      double* ablock = att.get() + (static_cast<std::size_t>(c) * heads + h) * ll;
      softmax_rows(scores.data(), ablock, static_cast<std::size_t>(L),
                   static_cast<std::size_t>(L));
      std::fill(oh.begin(), oh.end(), 0.0);
      mm_nn(ablock, vh.data(), oh.data(), L, L, hd);
      scatter_head_add(oh.data(), out.data(), c, h, L, dim, hd);
    }
  }
  bool rec = tape_should_record({&q, &k, &v});
  Tensor y = make_op_output(q.shape(), std::move(out), rec);
  if (rec) {
    auto iq = q.impl(), ik = k.impl(), iv = v.impl(), iy = y.impl();
    GradTape::current()->record(
        [iq, ik, iv, iy, att, batch, heads, L, hd, sc]() {
          const int dim = heads * hd;
          const bool need_q = iq->requires_grad;
          const bool need_k = ik->requires_grad;
          const bool need_v = iv->requires_grad;
          const std::vector<double>& dy = grad_of(iy);
          const std::size_t ll = static_cast<std::size_t>(L) * L;
          const std::size_t lh = static_cast<std::size_t>(L) * hd;
          std::vector<double> dyo(lh), qh(lh), kh(lh), vh(lh), vt(lh);
          std::vector<double> datt(ll), ds(ll), scratch(lh);
          for (int c = 0; c < batch; ++c) {
            for (int h = 0; h < heads; ++h) {
              const double* ablock = att.get() + (static_cast<std::size_t>(c) * heads + h) * ll;
              gather_head(dy.data(), dyo.data(), c, h, L, dim, hd);
              gather_head(iv->value.data(), vh.data(), c, h, L, dim, hd);
              transpose_into(vh.data(), vt.data(), L, hd);
              // dAtt = dOut * V^T
              std::fill(datt.begin(), datt.end(), 0.0);
              mm_nn(dyo.data(), vt.data(), datt.data(), L, hd, L);
              if (need_v) {
                // dV += Att^T * dOut
                std::fill(scratch.begin(), scratch.end(), 0.0);
                mm_tn(ablock, dyo.data(), scratch.data(), L, L, hd);
                scatter_head_add(scratch.data(), grad_of(iv).data(), c, h, L, dim, hd);
              }
              if (!need_q && !need_k) continue;
              // dS = Att o (dAtt - rowsum(dAtt o Att)), folding the 1/sqrt(hd) scale
              for (int i = 0; i < L; ++i) {
                const double* arow = ablock + static_cast<std::size_t>(i) * L;
                const double* drow = datt.data() + static_cast<std::size_t>(i) * L;
                double dot = 0.0;
                for (int j = 0; j < L; ++j) dot += arow[j] * drow[j];
                double* srow = ds.data() + static_cast<std::size_t>(i) * L;
                for (int j = 0; j < L; ++j) srow[j] = arow[j] * (drow[j] - dot) * sc;
              }
              if (need_q) {
                gather_head(ik->value.data(), kh.data(), c, h, L, dim, hd);
                std::fill(scratch.begin(), scratch.end(), 0.0);
                mm_nn(ds.data(), kh.data(), scratch.data(), L, L, hd);
                scatter_head_add(scratch.data(), grad_of(iq).data(), c, h, L, dim, hd);
              }
              if (need_k) {
                gather_head(iq->value.data(), qh.data(), c, h, L, dim, hd);
                std::fill(scratch.begin(), scratch.end(), 0.0);
                mm_tn(ds.data(), qh.data(), scratch.data(), L, L, hd);
                scatter_head_add(scratch.data(), grad_of(ik).data(), c, h, L, dim, hd);
              }
            }
          }
        },
        {q.impl(), k.impl(), v.impl(), y.impl()});
  }
  return y;
}

Tensor batch_standardize(const Tensor& x, double eps) {
  if (x.rank() != 2) throw ShapeError("batch_standardize: rank-2 required");
  if (eps <= 0.0) throw ValidationError("batch_standardize: eps must be positive");
  const std::size_t rows = static_cast<std::size_t>(x.dim(0));
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(cols);
  const double* px = x.values().data();
  for (std::size_t d = 0; d < cols; ++d) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += px[r * cols + d];
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double dv = px[r * cols + d] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(rows);
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[d] = istd;
    for (std::size_t r = 0; r < rows; ++r) out[r * cols + d] = (px[r * cols + d] - mean) * istd;
  }
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output(x.shape(), std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, inv_std, rows, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t d = 0; d < cols; ++d) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
              m1 += dy[r * cols + d];
              m2 += dy[r * cols + d] * iy->value[r * cols + d];
            }
            m1 /= static_cast<double>(rows);
            m2 /= static_cast<double>(rows);
            const double istd = (*inv_std)[d];
            for (std::size_t r = 0; r < rows; ++r) {
              dx[r * cols + d] +=
                  istd * (dy[r * cols + d] - m1 - iy->value[r * cols + d] * m2);
            }
          }
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: rank-2 required, got " + shape_str(x.shape()));
  const std::size_t rows = static_cast<std::size_t>(x.dim(0));
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(cols, 0.0);
  const double* px = x.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j] += px[r * cols + j];
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({static_cast<int>(cols)}, std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, rows, cols, inv]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) dx[r * cols + j] += dy[j] * inv;
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({1}, {s}, rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy]() {
          const double g = grad_of(iy)[0];
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({1}, {s * inv}, rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, inv]() {
          const double g = grad_of(iy)[0] * inv;
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output(std::move(shape), std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor slice_rows(const Tensor& x, int row0, int nrows) {
  if (x.rank() != 2) throw ShapeError("slice_rows: rank-2 required");
  if (row0 < 0 || nrows < 1 || row0 + nrows > x.dim(0)) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(static_cast<std::size_t>(nrows) * cols);
  const double* px = x.values().data() + static_cast<std::size_t>(row0) * cols;
  std::copy(px, px + out.size(), out.data());
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({nrows, static_cast<int>(cols)}, std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, row0, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          double* dst = dx.data() + static_cast<std::size_t>(row0) * cols;
          for (std::size_t i = 0; i < dy.size(); ++i) dst[i] += dy[i];
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor tile_rows(const Tensor& x, int times) {
  if (x.rank() != 2) throw ShapeError("tile_rows: rank-2 required");
  if (times < 1) throw ShapeError("tile_rows: times must be >= 1");
  const std::size_t block = x.size();
  std::vector<double> out(block * static_cast<std::size_t>(times));
  for (int t = 0; t < times; ++t) {
    std::copy(x.values().begin(), x.values().end(), out.begin() + static_cast<std::size_t>(t) * block);
  }
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({x.dim(0) * times, x.dim(1)}, std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, times, block]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (int t = 0; t < times; ++t) {
            const double* src = dy.data() + static_cast<std::size_t>(t) * block;
            for (std::size_t i = 0; i < block; ++i) dx[i] += src[i];
          }
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor block_mean_rows(const Tensor& x, int rows_per_block) {
  if (x.rank() != 2) throw ShapeError("block_mean_rows: rank-2 required");
  if (rows_per_block < 1 || x.dim(0) % rows_per_block != 0) {
    throw ShapeError("block_mean_rows: row count not divisible by block size");
  }
  const int blocks = x.dim(0) / rows_per_block;
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  const double inv = 1.0 / static_cast<double>(rows_per_block);
  std::vector<double> out(static_cast<std::size_t>(blocks) * cols, 0.0);
  const double* px = x.values().data();
  for (int b = 0; b < blocks; ++b) {
    double* po = out.data() + static_cast<std::size_t>(b) * cols;
    for (int r = 0; r < rows_per_block; ++r) {
      const double* row = px + (static_cast<std::size_t>(b) * rows_per_block + r) * cols;
      for (std::size_t j = 0; j < cols; ++j) po[j] += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) po[j] *= inv;
  }
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({blocks, static_cast<int>(cols)}, std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, blocks, rows_per_block, cols, inv]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (int b = 0; b < blocks; ++b) {
            const double* src = dy.data() + static_cast<std::size_t>(b) * cols;
            for (int r = 0; r < rows_per_block; ++r) {
              double* dst = dx.data() + (static_cast<std::size_t>(b) * rows_per_block + r) * cols;
              for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j] * inv;
            }
          }
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 required");
  const int rows = x.dim(0);
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  for (int i : idx) {
    if (i < 0 || i >= rows) throw ValidationError("gather_rows: index out of range");
  }
  std::vector<double> out(idx.size() * cols);
  const double* px = x.values().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const double* src = px + static_cast<std::size_t>(idx[r]) * cols;
    std::copy(src, src + cols, out.data() + r * cols);
  }
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({static_cast<int>(idx.size()), static_cast<int>(cols)},
                            std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    auto indices = std::make_shared<std::vector<int>>(idx);
    GradTape::current()->record(
        [ix, iy, indices, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t r = 0; r < indices->size(); ++r) {
            double* dst = dx.data() + static_cast<std::size_t>((*indices)[r]) * cols;
            const double* src = dy.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
          }
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor scatter_rows(const Tensor& base, const std::vector<int>& idx, const Tensor& rows) {
  if (base.rank() != 2 || rows.rank() != 2 || base.dim(1) != rows.dim(1)) {
    throw ShapeError("scatter_rows: column widths disagree");
  }
  if (static_cast<int>(idx.size()) != rows.dim(0)) {
    throw ShapeError("scatter_rows: index count does not match row count");
  }
  const int nbase = base.dim(0);
  const std::size_t cols = static_cast<std::size_t>(base.dim(1));
  std::vector<char> taken(static_cast<std::size_t>(nbase), 0);
  for (int i : idx) {
    if (i < 0 || i >= nbase) throw ValidationError("scatter_rows: index out of range");
    if (taken[static_cast<std::size_t>(i)]) {
      throw ValidationError("scatter_rows: duplicate index");
    }
    taken[static_cast<std::size_t>(i)] = 1;
  }
  std::vector<double> out(base.values().begin(), base.values().end());
  const double* pr = rows.values().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(pr + r * cols, pr + (r + 1) * cols,
              out.data() + static_cast<std::size_t>(idx[r]) * cols);
  }
  bool rec = tape_should_record({&base, &rows});
  Tensor y = make_op_output(base.shape(), std::move(out), rec);
  if (rec) {
    auto ib = base.impl(), ir = rows.impl(), iy = y.impl();
    auto indices = std::make_shared<std::vector<int>>(idx);
    GradTape::current()->record(
        [ib, ir, iy, indices, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          if (ir->requires_grad) {
            std::vector<double>& dr = grad_of(ir);
            for (std::size_t r = 0; r < indices->size(); ++r) {
              const double* src = dy.data() + static_cast<std::size_t>((*indices)[r]) * cols;
              double* dst = dr.data() + r * cols;
              for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
            }
          }
          if (ib->requires_grad) {
            std::vector<double>& db = grad_of(ib);
            std::vector<char> replaced(db.size() / cols, 0);
            for (int i : *indices) replaced[static_cast<std::size_t>(i)] = 1;
            const std::size_t nrows = db.size() / cols;
            for (std::size_t r = 0; r < nrows; ++r) {
              if (replaced[r]) continue;
              for (std::size_t j = 0; j < cols; ++j) db[r * cols + j] += dy[r * cols + j];
            }
          }
        },
        {base.impl(), rows.impl(), y.impl()});
  }
  return y;
}

Tensor broadcast_row(const Tensor& row, int rows) {
  if (row.rank() != 1) throw ShapeError("broadcast_row: rank-1 required");
  if (rows < 1) throw ShapeError("broadcast_row: rows must be >= 1");
  const std::size_t cols = row.size();
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  const double* pr = row.values().data();
  for (int r = 0; r < rows; ++r) std::copy(pr, pr + cols, out.data() + static_cast<std::size_t>(r) * cols);
  bool rec = tape_should_record({&row});
  Tensor y = make_op_output({rows, static_cast<int>(cols)}, std::move(out), rec);
  if (rec) {
    auto ir = row.impl(), iy = y.impl();
    GradTape::current()->record(
        [ir, iy, rows, cols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dr = grad_of(ir);
          for (int r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j)
              dr[j] += dy[static_cast<std::size_t>(r) * cols + j];
        },
        {row.impl(), y.impl()});
  }
  return y;
}

Tensor slice_cols(const Tensor& x, int col0, int ncols) {
  if (x.rank() != 2) throw ShapeError("slice_cols: rank-2 required");
  if (col0 < 0 || ncols < 1 || col0 + ncols > x.dim(1)) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  const std::size_t rows = static_cast<std::size_t>(x.dim(0));
  const std::size_t cols = static_cast<std::size_t>(x.dim(1));
  std::vector<double> out(rows * static_cast<std::size_t>(ncols));
  const double* px = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(px + r * cols + col0, px + r * cols + col0 + ncols,
              out.data() + r * static_cast<std::size_t>(ncols));
  }
  bool rec = tape_should_record({&x});
  Tensor y = make_op_output({static_cast<int>(rows), ncols}, std::move(out), rec);
  if (rec) {
    auto ix = x.impl(), iy = y.impl();
    GradTape::current()->record(
        [ix, iy, rows, cols, col0, ncols]() {
          const std::vector<double>& dy = grad_of(iy);
          std::vector<double>& dx = grad_of(ix);
          for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < ncols; ++j)
              dx[r * cols + static_cast<std::size_t>(col0 + j)] +=
                  dy[r * static_cast<std::size_t>(ncols) + static_cast<std::size_t>(j)];
        },
        {x.impl(), y.impl()});
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const int rows = parts[0].dim(0);
  int total = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols: row counts disagree");
    total += p.dim(1);
    if (GradTape::current() && p.requires_grad()) rec = true;
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * static_cast<std::size_t>(total));
  int off = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    const double* pp = p.values().data();
    for (int r = 0; r < rows; ++r) {
      std::copy(pp + static_cast<std::size_t>(r) * pc, pp + static_cast<std::size_t>(r + 1) * pc,
                out.data() + static_cast<std::size_t>(r) * total + off);
    }
    off += pc;
  }
  Tensor y = make_op_output({rows, total}, std::move(out), rec);
  if (rec) {
    auto iy = y.impl();
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    std::vector<std::shared_ptr<detail::TensorImpl>> touched = impls;
    touched.push_back(iy);
    GradTape::current()->record(
        [impls, iy, rows, total]() {
          const std::vector<double>& dy = grad_of(iy);
          int off = 0;
          for (const auto& ip : impls) {
            const int pc = ip->shape[1];
            if (ip->requires_grad) {
              std::vector<double>& dp = grad_of(ip);
              for (int r = 0; r < rows; ++r)
                for (int j = 0; j < pc; ++j)
                  dp[static_cast<std::size_t>(r) * pc + j] +=
                      dy[static_cast<std::size_t>(r) * total + off + j];
            }
            off += pc;
          }
        },
        std::move(touched));
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  int cols = -1;
  int total_rows = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    int pc = (p.rank() == 1) ? p.dim(0) : p.dim(1);
    int pr = (p.rank() == 1) ? 1 : p.dim(0);
    if (p.rank() > 2) throw ShapeError("concat_rows: rank must be 1 or 2");
    if (cols == -1) cols = pc;
    if (pc != cols) throw ShapeError("concat_rows: column widths disagree");
    total_rows += pr;
    if (GradTape::current() && p.requires_grad()) rec = true;
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total_rows) * static_cast<std::size_t>(cols));
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor y = make_op_output({total_rows, cols}, std::move(out), rec);
  if (rec) {
    auto iy = y.impl();
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    std::vector<std::shared_ptr<detail::TensorImpl>> touched = impls;
    touched.push_back(iy);
    GradTape::current()->record(
        [impls, iy]() {
          const std::vector<double>& dy = grad_of(iy);
          std::size_t off = 0;
          for (const auto& ip : impls) {
            const std::size_t n = ip->value.size();
            if (ip->requires_grad) {
              std::vector<double>& dp = grad_of(ip);
              for (std::size_t i = 0; i < n; ++i) dp[i] += dy[off + i];
            }
            off += n;
          }
        },
        std::move(touched));
  }
  return y;
}

// ---- ModelParams ------------------------------------------------------------

void ModelParams::insert(const std::string& name, Tensor t) {
  if (by_name_.count(name)) throw ConsistencyError("duplicate parameter name: " + name);
  by_name_.emplace(name, std::move(t));
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConsistencyError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConsistencyError("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  out.reserve(by_name_.size());
  for (const auto& [k, v] : by_name_) out.push_back(k);
  return out;
}

ModelParams ModelParams::clone(bool requires_grad) const {
  ModelParams out;
  for (const auto& [k, v] : by_name_) out.insert(k, v.clone(requires_grad));
  return out;
}

ModelParams ModelParams::subset_prefix(const std::vector<std::string>& prefixes) const {
  ModelParams out;
  for (const auto& [k, v] : by_name_) {
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        out.insert(k, v);
        break;
      }
    }
  }
  return out;
}

ModelParams ModelParams::without_prefix(const std::vector<std::string>& prefixes) const {
  ModelParams out;
  for (const auto& [k, v] : by_name_) {
    bool drop = false;
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        drop = true;
        break;
      }
    }
    if (!drop) out.insert(k, v);
  }
  return out;
}

void ModelParams::check_finite(const std::string& context) const {
  for (const auto& [k, v] : by_name_) {
    for (double x : v.values()) {
      if (!std::isfinite(x)) {
        throw NumericError(context + ": parameter " + k + " is non-finite");
      }
    }
  }
}

double ModelParams::l2_distance(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) throw ConsistencyError("l2_distance: parameter sets differ in size");
  double s = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw ConsistencyError("l2_distance: parameter name mismatch: " + ia->first + " vs " +
                             ib->first);
    }
    auto va = ia->second.values();
    auto vb = ib->second.values();
    if (va.size() != vb.size()) throw ConsistencyError("l2_distance: shape mismatch: " + ia->first);
    for (std::size_t i = 0; i < va.size(); ++i) {
      double d = va[i] - vb[i];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

std::string param_group(const std::string& name) {
  auto pos = name.find('.');
  return pos == std::string::npos ? name : name.substr(0, pos);
}

}  // namespace cdfsl
