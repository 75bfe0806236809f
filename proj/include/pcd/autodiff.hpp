// Reverse-mode automatic differentiation over dense float64 matrices.
//
// A Tape owns a graph built by free-function ops. Records are appended in
// creation order, which under single-threaded graph construction is already
// a topological order, so backward() is a single reverse sweep. Gradients
// accumulate additively, so fan-out (the same tensor consumed twice) needs
// no special casing. Independent tapes on different threads are safe; a
// single tape must not be shared across threads.

#pragma once

#include "pcd/matrix.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pcd {

// A named trainable parameter living outside any tape. Models own Params;
// each training step mounts them onto a fresh Tape via Tape::leaf, and
// backward() adds the resulting gradients into `grad`.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  Param(std::string name_, Matrix value_)
      : name(std::move(name_)), value(std::move(value_)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

namespace detail {

struct TensorNode {
  Matrix value;
  Matrix grad;  // allocated iff requires_grad
  bool requires_grad = false;
  Tape* tape = nullptr;
  Param* origin = nullptr;
};

struct Access;

}  // namespace detail

// Lightweight handle to a node owned by a Tape. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return node_ != nullptr; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  const Matrix& value() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  // Populated after backward() on the owning tape. Contract: requires_grad.
  const Matrix& grad() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend struct detail::Access;
  friend class Tape;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf with no gradient tracking.
  Tensor constant(Matrix value);

  // Anonymous differentiable leaf (grad readable through the handle).
  Tensor variable(Matrix value);

  // Mounts a persistent parameter; backward() exports into param.grad.
  Tensor leaf(Param& param);

  // Reverse sweep from a scalar loss: seeds d(loss)/d(loss) = 1, replays
  // every record exactly once in reverse creation order, then adds leaf
  // gradients into their mounted Params. Contract: loss is 1x1 and was
  // built on this tape.
  void backward(const Tensor& loss);

  std::size_t op_count() const { return records_.size(); }

 private:
  struct Record {
    std::shared_ptr<detail::TensorNode> out;
    std::function<void(const Matrix&)> pull;
  };
  std::vector<Record> records_;
  // Owning: a mounted leaf must outlive every handle to it, since backward()
  // exports its gradient even when no op consumed the leaf.
  std::vector<std::pair<std::shared_ptr<detail::TensorNode>, Param*>> mounted_;
  friend struct detail::Access;
};

// Convenience mirror of Tape::backward.
void backward(const Tensor& loss);

// --- Ops. Shapes are validated; violations throw std::invalid_argument
// --- naming the offending shapes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor transpose(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

// Row-wise softmax with max subtraction. -inf entries are admitted (they
// map to exactly zero weight) as long as every row keeps one finite entry;
// each output row sums to 1 within 1e-12.
Tensor softmax_rows(const Tensor& x);

// Elementwise a*x + b where a and b are 1x1 tensors (typically mounted
// scalar parameters). d(a) = sum(dOut .* x), d(b) = sum(dOut).
Tensor scale_shift(const Tensor& x, const Tensor& a, const Tensor& b);

Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index width);
Tensor concat_cols(std::span<const Tensor> parts);

// Per-row normalization with learnable gain/bias (both 1 x cols).
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double epsilon = 1e-5);

Tensor sum(const Tensor& x);

// Mean over all elements of (pred - target)^2, returned as a 1x1 tensor.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// Central-difference verification of backward(). Rebuilds the loss graph
// via `build_loss` with each param element perturbed by +-step and compares
// against the analytic gradient, as
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Throws std::runtime_error naming the parameter element if either side is
// non-finite. Contract: step > 0, params non-empty.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
};

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           std::span<Param* const> params, double step = 1e-5);

}  // namespace pcd
