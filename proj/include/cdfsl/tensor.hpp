#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cdfsl/errors.hpp"
#include "cdfsl/rng.hpp"

namespace cdfsl {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward() touches this tensor
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float64 tensor. Copies are shallow handles onto the same
// buffer; values are treated as immutable once produced by an op, except for
// leaf mutation through raw() (initialization, optimizer updates, gradient
// checking).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  std::size_t size() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  // Mutable access to leaf storage. Never call on a tensor that is part of a
  // live tape.
  std::vector<double>& raw() { return impl_->value; }

  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  // Gradient buffer, or nullptr if this tensor did not participate in the
  // last backward pass.
  const std::vector<double>* grad() const {
    return impl_->grad.empty() ? nullptr : &impl_->grad;
  }

  // Deep copy with gradient tracking severed.
  Tensor detach() const;
  // Deep copy preserving values; fresh grad state.
  Tensor clone(bool requires_grad) const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class GradTape;
  friend Tensor make_op_output(Shape, std::vector<double>, bool);
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record backward closures onto it when any input
// requires a gradient. backward() recomputes gradients from scratch (zeroing
// every participating buffer first), so repeated reverse passes over the same
// recorded ops are bit-identical. The op list is cleared once backward()
// completes.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current();

  void record(std::function<void()> backward_fn,
              std::initializer_list<std::shared_ptr<detail::TensorImpl>> touched);
  void record(std::function<void()> backward_fn,
              std::vector<std::shared_ptr<detail::TensorImpl>> touched);

  // Seeds d(loss)=1, runs the reverse pass, clears the tape.
  void backward(const Tensor& loss);
  // Same reverse pass but keeps the recorded ops (test hook for replay).
  void backward_keep(const Tensor& loss);

  std::size_t size() const { return ops_.size(); }

 private:
  void run_reverse(const Tensor& loss);
  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<detail::TensorImpl>> touched_;
  GradTape* prev_ = nullptr;
};

// Temporarily disables recording on the active tape (teacher forward passes,
// feature extraction inside a training step).
class TapePause {
 public:
  TapePause();
  ~TapePause();
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  GradTape* saved_;
};

// ---- differentiable ops ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// Same-shape add, or [R x C] + [C] bias broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor gelu(const Tensor& a);

// Softmax over the last axis, max-subtracted for stability.
Tensor softmax(const Tensor& logits);

// -(1/B) sum_b sum_c target[b,c] * log softmax(pred)[b,c]. target rows must
// be probability distributions and must not require gradients.
Tensor cross_entropy(const Tensor& pred_logits, const Tensor& target_dist);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Standardizes each column of [B x D] to zero mean and unit variance over
// the batch rows (no learned affine). Deterministic for a fixed batch.
Tensor batch_standardize(const Tensor& x, double eps);

// Fused scaled-dot-product attention over per-clip row blocks: q, k, v are
// [batch*L x D] with D split into `heads` slices; each clip attends within
// its own rows. Equivalent to the composition of slice/matmul/softmax ops,
// fused into one tape node.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch,
                           int heads);

Tensor mean_rows(const Tensor& x);  // [R x C] -> [C]
Tensor sum_all(const Tensor& x);    // -> scalar
Tensor mean_all(const Tensor& x);   // -> scalar

Tensor reshape(const Tensor& x, Shape shape);  // contiguous, numel preserved
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor slice_rows(const Tensor& x, int row0, int nrows);
// Repeats a [R x C] block `times` times along rows; gradient sums the tiles.
Tensor tile_rows(const Tensor& x, int times);
// Mean over each consecutive block of rows: [B*L x C] -> [B x C].
Tensor block_mean_rows(const Tensor& x, int rows_per_block);
// base with base[idx[i], :] replaced by rows[i, :].
Tensor scatter_rows(const Tensor& base, const std::vector<int>& idx, const Tensor& rows);
Tensor broadcast_row(const Tensor& row, int rows);  // [C] -> [R x C]
Tensor slice_cols(const Tensor& x, int col0, int ncols);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Stacks [C] vectors (or [R_i x C] blocks) along rows.
Tensor concat_rows(const std::vector<Tensor>& parts);

// ---- named parameter collection --------------------------------------------

class ModelParams {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  Map::iterator begin() { return by_name_.begin(); }
  Map::iterator end() { return by_name_.end(); }
  Map::const_iterator begin() const { return by_name_.begin(); }
  Map::const_iterator end() const { return by_name_.end(); }
  std::size_t size() const { return by_name_.size(); }
  bool empty() const { return by_name_.empty(); }

  std::vector<std::string> names() const;

  // Deep copy; requires_grad of every copied tensor set to the flag.
  ModelParams clone(bool requires_grad) const;
  // Subset whose names start with any of the given prefixes.
  ModelParams subset_prefix(const std::vector<std::string>& prefixes) const;
  // Subset excluding names that start with any of the given prefixes.
  ModelParams without_prefix(const std::vector<std::string>& prefixes) const;

  // Throws NumericError naming the first non-finite parameter.
  void check_finite(const std::string& context) const;

  // sqrt(sum of squared differences) over aligned parameters.
  static double l2_distance(const ModelParams& a, const ModelParams& b);

 private:
  Map by_name_;
};

// Parameter-group name: leading path segment ("head.w" -> "head").
std::string param_group(const std::string& name);

}  // namespace cdfsl
