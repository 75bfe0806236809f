#include "pcd/autodiff.hpp"

#include <fmt/format.h>

#include <cmath>
#include <stdexcept>
#include <utility>

namespace pcd {

namespace detail {

struct Access {
  static const std::shared_ptr<TensorNode>& node(const Tensor& t) { return t.node_; }

  static Tensor wrap(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }

  static void record(Tape& tape, std::shared_ptr<TensorNode> out,
                     std::function<void(const Matrix&)> pull) {
    tape.records_.push_back({std::move(out), std::move(pull)});
  }

  static void mount(Tape& tape, std::shared_ptr<TensorNode> node, Param* param) {
    tape.mounted_.emplace_back(std::move(node), param);
  }
};

namespace {

std::string shape_of(const Matrix& m) {
  return fmt::format("{}x{}", m.rows(), m.cols());
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined())
    throw std::invalid_argument(fmt::format("{}: undefined tensor operand", op));
}

// Tape lookup for an op result: every operand was created through some tape,
// and mixing tapes in one expression is a usage error.
Tape* common_tape(std::initializer_list<const Tensor*> inputs, const char* op) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    Tape* candidate = Access::node(*t)->tape;
    if (candidate == nullptr) continue;
    if (tape == nullptr) {
      tape = candidate;
    } else if (tape != candidate) {
      throw std::invalid_argument(fmt::format("{}: operands belong to different tapes", op));
    }
  }
  if (tape == nullptr)
    throw std::invalid_argument(fmt::format("{}: no operand is attached to a tape", op));
  return tape;
}

std::shared_ptr<TensorNode> fresh_node(Matrix value, bool requires_grad, Tape* tape) {
  auto node = std::make_shared<TensorNode>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->tape = tape;
  if (requires_grad) node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
  return node;
}

// Builds the output node and records the pull closure when any input needs
// gradients. `pull` receives d(loss)/d(out) and must add into input grads.
Tensor make_op(std::initializer_list<const Tensor*> inputs, const char* op, Matrix value,
               std::function<void(const Matrix&)> pull) {
  for (const Tensor* t : inputs) require_defined(*t, op);
  Tape* tape = common_tape(inputs, op);
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  auto node = fresh_node(std::move(value), needs_grad, tape);
  if (needs_grad) Access::record(*tape, node, std::move(pull));
  return Access::wrap(std::move(node));
}

}  // namespace

}  // namespace detail

using detail::Access;

const Matrix& Tensor::grad() const {
  if (!defined() || !node_->requires_grad)
    throw std::logic_error("Tensor::grad: tensor does not track gradients");
  return node_->grad;
}

Tensor Tape::constant(Matrix value) {
  return Access::wrap(detail::fresh_node(std::move(value), false, this));
}

Tensor Tape::variable(Matrix value) {
  return Access::wrap(detail::fresh_node(std::move(value), true, this));
}

Tensor Tape::leaf(Param& param) {
  auto node = detail::fresh_node(param.value, true, this);
  Access::mount(*this, node, &param);
  return Access::wrap(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  detail::require_defined(loss, "backward");
  const auto& node = Access::node(loss);
  if (node->tape != this)
    throw std::invalid_argument("backward: loss was built on a different tape");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw std::invalid_argument(
        fmt::format("backward: loss must be a 1x1 scalar, got {}x{}", loss.rows(), loss.cols()));
  if (!node->requires_grad) return;

  node->grad(0, 0) += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->pull(it->out->grad);
  for (auto& [leaf_node, param] : mounted_) param->grad += leaf_node->grad;
}

void backward(const Tensor& loss) {
  detail::require_defined(loss, "backward");
  Access::node(loss)->tape->backward(loss);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_defined(a, "matmul");
  detail::require_defined(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument(fmt::format("matmul: inner dimensions disagree, {} vs {}",
                                            detail::shape_of(a.value()),
                                            detail::shape_of(b.value())));
  auto an = Access::node(a);
  auto bn = Access::node(b);
  return detail::make_op({&a, &b}, "matmul", a.value() * b.value(),
                         [an, bn](const Matrix& g) {
                           if (an->requires_grad) an->grad.noalias() += g * bn->value.transpose();
                           if (bn->requires_grad) bn->grad.noalias() += an->value.transpose() * g;
                         });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(fmt::format("{}: shapes disagree, {} vs {}", op,
                                            detail::shape_of(a.value()),
                                            detail::shape_of(b.value())));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_defined(a, "add");
  detail::require_defined(b, "add");
  require_same_shape(a, b, "add");
  auto an = Access::node(a);
  auto bn = Access::node(b);
  return detail::make_op({&a, &b}, "add", a.value() + b.value(), [an, bn](const Matrix& g) {
    if (an->requires_grad) an->grad += g;
    if (bn->requires_grad) bn->grad += g;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_defined(a, "sub");
  detail::require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  auto an = Access::node(a);
  auto bn = Access::node(b);
  return detail::make_op({&a, &b}, "sub", a.value() - b.value(), [an, bn](const Matrix& g) {
    if (an->requires_grad) an->grad += g;
    if (bn->requires_grad) bn->grad -= g;
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_defined(a, "hadamard");
  detail::require_defined(b, "hadamard");
  require_same_shape(a, b, "hadamard");
  auto an = Access::node(a);
  auto bn = Access::node(b);
  return detail::make_op({&a, &b}, "hadamard", a.value().cwiseProduct(b.value()),
                         [an, bn](const Matrix& g) {
                           if (an->requires_grad) an->grad += g.cwiseProduct(bn->value);
                           if (bn->requires_grad) bn->grad += g.cwiseProduct(an->value);
                         });
}

Tensor scale(const Tensor& x, double factor) {
  detail::require_defined(x, "scale");
  auto xn = Access::node(x);
  return detail::make_op({&x}, "scale", factor * x.value(), [xn, factor](const Matrix& g) {
    if (xn->requires_grad) xn->grad += factor * g;
  });
}

Tensor transpose(const Tensor& x) {
  detail::require_defined(x, "transpose");
  auto xn = Access::node(x);
  return detail::make_op({&x}, "transpose", x.value().transpose(), [xn](const Matrix& g) {
    if (xn->requires_grad) xn->grad += g.transpose();
  });
}

Tensor sigmoid(const Tensor& x) {
  detail::require_defined(x, "sigmoid");
  // Branch on sign to avoid overflow in exp for large |x|.
  Matrix out = x.value().unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
  auto xn = Access::node(x);
  Matrix cached = out;
  return detail::make_op({&x}, "sigmoid", std::move(out),
                         [xn, cached = std::move(cached)](const Matrix& g) {
                           if (!xn->requires_grad) return;
                           xn->grad.array() +=
                               g.array() * cached.array() * (1.0 - cached.array());
                         });
}

Tensor relu(const Tensor& x) {
  detail::require_defined(x, "relu");
  auto xn = Access::node(x);
  return detail::make_op({&x}, "relu", x.value().cwiseMax(0.0), [xn](const Matrix& g) {
    if (!xn->requires_grad) return;
    xn->grad.array() += g.array() * (xn->value.array() > 0.0).cast<double>();
  });
}

Tensor softmax_rows(const Tensor& x) {
  detail::require_defined(x, "softmax_rows");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double row_max = x.value().row(i).maxCoeff();
    if (!std::isfinite(row_max))
      throw std::invalid_argument(
          fmt::format("softmax_rows: row {} has no finite entry", i));
    Eigen::ArrayXd shifted = (x.value().row(i).array() - row_max).exp();
    double total = shifted.sum();
    out.row(i) = (shifted / total).matrix();
  }
  auto xn = Access::node(x);
  Matrix cached = out;
  return detail::make_op(
      {&x}, "softmax_rows", std::move(out),
      [xn, cached = std::move(cached)](const Matrix& g) {
        if (!xn->requires_grad) return;
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          double weighted = g.row(i).dot(cached.row(i));
          xn->grad.row(i).array() += cached.row(i).array() * (g.row(i).array() - weighted);
        }
      });
}

Tensor scale_shift(const Tensor& x, const Tensor& a, const Tensor& b) {
  detail::require_defined(x, "scale_shift");
  detail::require_defined(a, "scale_shift");
  detail::require_defined(b, "scale_shift");
  if (a.rows() != 1 || a.cols() != 1 || b.rows() != 1 || b.cols() != 1)
    throw std::invalid_argument(
        fmt::format("scale_shift: scale and shift must be 1x1, got {} and {}",
                    detail::shape_of(a.value()), detail::shape_of(b.value())));
  auto xn = Access::node(x);
  auto an = Access::node(a);
  auto bn = Access::node(b);
  double av = a.value()(0, 0);
  double bv = b.value()(0, 0);
  Matrix out = (av * x.value().array() + bv).matrix();
  return detail::make_op({&x, &a, &b}, "scale_shift", std::move(out),
                         [xn, an, bn, av](const Matrix& g) {
                           if (xn->requires_grad) xn->grad += av * g;
                           if (an->requires_grad) an->grad(0, 0) += g.cwiseProduct(xn->value).sum();
                           if (bn->requires_grad) bn->grad(0, 0) += g.sum();
                         });
}

Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index width) {
  detail::require_defined(x, "slice_cols");
  if (start < 0 || width <= 0 || start + width > x.cols())
    throw std::invalid_argument(
        fmt::format("slice_cols: range [{}, {}) outside {} columns", start, start + width,
                    x.cols()));
  auto xn = Access::node(x);
  return detail::make_op({&x}, "slice_cols", x.value().middleCols(start, width),
                         [xn, start, width](const Matrix& g) {
                           if (xn->requires_grad) xn->grad.middleCols(start, width) += g;
                         });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts given");
  Eigen::Index rows = -1;
  Eigen::Index cols = 0;
  for (const Tensor& t : parts) {
    detail::require_defined(t, "concat_cols");
    if (rows < 0) rows = t.rows();
    if (t.rows() != rows)
      throw std::invalid_argument(fmt::format("concat_cols: row counts disagree, {} vs {}",
                                              rows, t.rows()));
    cols += t.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  std::vector<Eigen::Index> offsets;
  nodes.reserve(parts.size());
  Eigen::Index at = 0;
  for (const Tensor& t : parts) {
    out.middleCols(at, t.cols()) = t.value();
    nodes.push_back(Access::node(t));
    offsets.push_back(at);
    at += t.cols();
  }

  // make_op takes an initializer_list; validate and record manually instead.
  Tape* tape = nullptr;
  bool needs_grad = false;
  for (const Tensor& t : parts) {
    Tape* candidate = Access::node(t)->tape;
    if (tape == nullptr) tape = candidate;
    if (candidate != nullptr && candidate != tape)
      throw std::invalid_argument("concat_cols: operands belong to different tapes");
    needs_grad = needs_grad || t.requires_grad();
  }
  auto node = detail::fresh_node(std::move(out), needs_grad, tape);
  if (needs_grad) {
    Access::record(*tape, node,
                   [nodes = std::move(nodes), offsets = std::move(offsets)](const Matrix& g) {
                     for (std::size_t k = 0; k < nodes.size(); ++k) {
                       if (!nodes[k]->requires_grad) continue;
                       nodes[k]->grad += g.middleCols(offsets[k], nodes[k]->value.cols());
                     }
                   });
  }
  return Access::wrap(std::move(node));
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double epsilon) {
  detail::require_defined(x, "layer_norm_rows");
  detail::require_defined(gain, "layer_norm_rows");
  detail::require_defined(bias, "layer_norm_rows");
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    throw std::invalid_argument(
        fmt::format("layer_norm_rows: gain/bias must be 1x{}, got {} and {}", x.cols(),
                    detail::shape_of(gain.value()), detail::shape_of(bias.value())));

  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  Matrix normalized(rows, cols);
  Matrix out(rows, cols);
  Eigen::VectorXd inv_sigma(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mu = x.value().row(i).mean();
    double var = (x.value().row(i).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + epsilon);
    inv_sigma(i) = inv;
    normalized.row(i) = ((x.value().row(i).array() - mu) * inv).matrix();
    out.row(i) = (normalized.row(i).array() * gain.value().row(0).array() +
                  bias.value().row(0).array())
                     .matrix();
  }

  auto xn = Access::node(x);
  auto gn = Access::node(gain);
  auto bn = Access::node(bias);
  using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
  return detail::make_op(
      {&x, &gain, &bias}, "layer_norm_rows", std::move(out),
      [xn, gn, bn, normalized = std::move(normalized),
       inv_sigma = std::move(inv_sigma)](const Matrix& g) {
        if (gn->requires_grad)
          gn->grad.row(0) += (g.array() * normalized.array()).colwise().sum().matrix();
        if (bn->requires_grad) bn->grad.row(0) += g.colwise().sum();
        if (!xn->requires_grad) return;
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          RowArray d_norm = g.row(i).array() * gn->value.row(0).array();
          double mean_d = d_norm.mean();
          double mean_dn = (d_norm * normalized.row(i).array()).mean();
          xn->grad.row(i).array() +=
              inv_sigma(i) * (d_norm - mean_d - normalized.row(i).array() * mean_dn);
        }
      });
}

Tensor sum(const Tensor& x) {
  detail::require_defined(x, "sum");
  auto xn = Access::node(x);
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return detail::make_op({&x}, "sum", std::move(out), [xn](const Matrix& g) {
    if (xn->requires_grad) xn->grad.array() += g(0, 0);
  });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::require_defined(pred, "mse_loss");
  detail::require_defined(target, "mse_loss");
  require_same_shape(pred, target, "mse_loss");
  auto pn = Access::node(pred);
  auto tn = Access::node(target);
  const double n = static_cast<double>(pred.rows() * pred.cols());
  Matrix out(1, 1);
  out(0, 0) = (pred.value() - target.value()).squaredNorm() / n;
  return detail::make_op({&pred, &target}, "mse_loss", std::move(out),
                         [pn, tn, n](const Matrix& g) {
                           Matrix diff = (2.0 / n) * g(0, 0) * (pn->value - tn->value);
                           if (pn->requires_grad) pn->grad += diff;
                           if (tn->requires_grad) tn->grad -= diff;
                         });
}

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           std::span<Param* const> params, double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  if (params.empty()) throw std::invalid_argument("grad_check: no parameters given");

  for (Param* p : params) p->zero_grad();
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Tensor loss = build_loss(tape);
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  auto eval = [&build_loss]() {
    Tape tape;
    Tensor loss = build_loss(tape);
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("grad_check: build_loss must return a scalar");
    return loss.value()(0, 0);
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
        const double saved = p.value(i, j);
        p.value(i, j) = saved + step;
        const double up = eval();
        p.value(i, j) = saved - step;
        const double down = eval();
        p.value(i, j) = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double exact = analytic[k](i, j);
        if (!std::isfinite(numeric) || !std::isfinite(exact))
          throw std::runtime_error(
              fmt::format("grad_check: non-finite gradient for parameter '{}' at ({}, {})",
                          p.name, i, j));
        const double rel = std::abs(exact - numeric) /
                           std::max({std::abs(exact), std::abs(numeric), 1e-8});
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_param = fmt::format("{}[{},{}]", p.name, i, j);
        }
      }
    }
  }
  return report;
}

}  // namespace pcd
