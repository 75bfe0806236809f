#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pcd/autodiff.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

using pcd::Matrix;
using pcd::Param;
using pcd::Tape;
using pcd::Tensor;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                     double span = 1.0) {
  std::mt19937_64 engine(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = span * (2.0 * (static_cast<double>(engine() >> 11) * 0x1.0p-53) - 1.0);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("matmul forward values") {
  Tape tape;
  Matrix x = random_matrix(3, 3, 11);
  CHECK(max_abs_diff(matmul(tape.constant(x), tape.constant(Matrix::Identity(3, 3))).value(),
                     x) == 0.0);

  Matrix a(1, 2);
  a << 1, 2;
  Matrix b(2, 1);
  b << 3, 4;
  CHECK(matmul(tape.constant(a), tape.constant(b)).value()(0, 0) == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
  Tape tape;
  Tensor a = tape.constant(Matrix::Zero(2, 3));
  Tensor b = tape.constant(Matrix::Zero(4, 2));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("4x2"), std::invalid_argument);
}

TEST_CASE("matmul gradient of a summed product matches finite differences") {
  Matrix a = random_matrix(4, 3, 21);
  Matrix b = random_matrix(3, 5, 22);

  Tape tape;
  Tensor ta = tape.variable(a);
  Tensor tb = tape.constant(b);
  Tensor loss = sum(matmul(ta, tb));
  tape.backward(loss);

  auto eval = [&]() {
    Tape t;
    return sum(matmul(t.constant(a), t.constant(b))).value()(0, 0);
  };
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      double numeric = oracle::finite_diff(eval, &a(i, j), 1e-5);
      double analytic = ta.grad()(i, j);
      double rel = std::abs(analytic - numeric) /
                   std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      CHECK(rel < 1e-6);
    }
  }
}

TEST_CASE("hadamard forward identities") {
  Tape tape;
  Matrix x = random_matrix(3, 4, 31);
  CHECK(max_abs_diff(hadamard(tape.constant(x), tape.constant(Matrix::Ones(3, 4))).value(),
                     x) == 0.0);
  CHECK(hadamard(tape.constant(x), tape.constant(Matrix::Zero(3, 4)))
            .value()
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("hadamard gradients route through both operands") {
  Matrix a = random_matrix(3, 3, 41);
  Matrix b = random_matrix(3, 3, 42);
  Tape tape;
  Tensor ta = tape.variable(a);
  Tensor tb = tape.variable(b);
  tape.backward(sum(hadamard(ta, tb)));
  CHECK(max_abs_diff(ta.grad(), b) == 0.0);
  CHECK(max_abs_diff(tb.grad(), a) == 0.0);
}

TEST_CASE("sigmoid fixed points and derivative") {
  Tape tape;
  Matrix zero = Matrix::Zero(1, 1);
  Tensor tz = tape.variable(zero);
  Tensor s = sigmoid(tz);
  CHECK(s.value()(0, 0) == 0.5);
  tape.backward(sum(s));
  CHECK(tz.grad()(0, 0) == 0.25);

  Tape other;
  Matrix large(1, 2);
  large << 50.0, -50.0;
  Matrix out = sigmoid(other.constant(large)).value();
  CHECK(std::abs(out(0, 0) - 1.0) < 1e-12);
  CHECK(out(0, 1) < 1e-12);
}

TEST_CASE("softmax rows on degenerate and extreme inputs") {
  Tape tape;
  Matrix flat(1, 2);
  flat << 0.0, 0.0;
  Matrix w = softmax_rows(tape.constant(flat)).value();
  CHECK(w(0, 0) == 0.5);
  CHECK(w(0, 1) == 0.5);

  Matrix spiked(1, 2);
  spiked << 1000.0, 0.0;
  Matrix s = softmax_rows(tape.constant(spiked)).value();
  CHECK(std::abs(s(0, 0) - 1.0) <= 1e-12);
  CHECK(s(0, 1) <= 1e-12);
}

TEST_CASE("softmax rows sum to one for any finite magnitude") {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    Matrix x = random_matrix(5, 6, seed, 1e3);
    Tape tape;
    Matrix w = softmax_rows(tape.constant(x)).value();
    for (Eigen::Index i = 0; i < w.rows(); ++i) CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  Matrix x = random_matrix(4, 4, 51);
  Matrix w = random_matrix(4, 4, 52);

  Tape tape;
  Tensor tx = tape.variable(x);
  tape.backward(sum(hadamard(tape.constant(w), softmax_rows(tx))));

  auto eval = [&]() {
    Tape t;
    return sum(hadamard(t.constant(w), softmax_rows(t.constant(x)))).value()(0, 0);
  };
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) {
      double numeric = oracle::finite_diff(eval, &x(i, j), 1e-5);
      double analytic = tx.grad()(i, j);
      double rel = std::abs(analytic - numeric) /
                   std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      CHECK(rel < 1e-6);
    }
  }
}

TEST_CASE("relu forward and gradient mask") {
  Matrix x(2, 2);
  x << -1.0, 2.0, 0.5, -3.0;
  Tape tape;
  Tensor tx = tape.variable(x);
  Tensor y = relu(tx);
  CHECK(y.value()(0, 0) == 0.0);
  CHECK(y.value()(0, 1) == 2.0);
  tape.backward(sum(y));
  Matrix expected(2, 2);
  expected << 0, 1, 1, 0;
  CHECK(max_abs_diff(tx.grad(), expected) == 0.0);
}

TEST_CASE("scale_shift identity and hand-computed parameter gradients") {
  Matrix x(2, 2);
  x << 1, 2, 3, 4;
  Tape tape;
  Param a("a", Matrix::Ones(1, 1));
  Param b("b", Matrix::Zero(1, 1));
  Tensor out = scale_shift(tape.constant(x), tape.leaf(a), tape.leaf(b));
  CHECK(max_abs_diff(out.value(), x) == 0.0);

  tape.backward(sum(out));
  CHECK(a.grad(0, 0) == 10.0);  // sum of x
  CHECK(b.grad(0, 0) == 4.0);   // element count
}

TEST_CASE("scale_shift rejects non-scalar parameters") {
  Tape tape;
  Tensor x = tape.constant(Matrix::Zero(2, 2));
  Tensor bad = tape.constant(Matrix::Zero(2, 1));
  Tensor ok = tape.constant(Matrix::Zero(1, 1));
  CHECK_THROWS_AS(scale_shift(x, bad, ok), std::invalid_argument);
}

TEST_CASE("layer norm rows centers each row and matches finite differences") {
  Matrix x = random_matrix(4, 6, 61);
  Matrix gain = Matrix::Ones(1, 6);
  Matrix bias = Matrix::Zero(1, 6);
  {
    Tape tape;
    Matrix out =
        layer_norm_rows(tape.constant(x), tape.constant(gain), tape.constant(bias)).value();
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      CHECK(std::abs(out.row(i).mean()) < 1e-12);
  }

  Param px("x", x);
  Param pg("gain", random_matrix(1, 6, 62));
  Param pb("bias", random_matrix(1, 6, 63));
  std::vector<Param*> params{&px, &pg, &pb};
  auto build = [&](Tape& t) {
    return mse_loss(layer_norm_rows(t.leaf(px), t.leaf(pg), t.leaf(pb)),
                    t.constant(random_matrix(4, 6, 64)));
  };
  auto report = pcd::grad_check(build, params, 1e-5);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("slice and concat are exact inverses and route gradients") {
  Matrix x = random_matrix(3, 5, 71);
  Tape tape;
  Tensor tx = tape.variable(x);
  Tensor left = slice_cols(tx, 0, 2);
  Tensor right = slice_cols(tx, 2, 3);
  std::vector<Tensor> parts{left, right};
  Tensor back = concat_cols(parts);
  CHECK(max_abs_diff(back.value(), x) == 0.0);

  tape.backward(sum(back));
  CHECK(max_abs_diff(tx.grad(), Matrix::Ones(3, 5)) == 0.0);

  CHECK_THROWS_AS(slice_cols(tx, 4, 3), std::invalid_argument);
}

TEST_CASE("mse_loss values") {
  Tape tape;
  Matrix a(1, 2);
  a << 1, 2;
  CHECK(mse_loss(tape.constant(a), tape.constant(a)).value()(0, 0) == 0.0);

  Matrix zeros = Matrix::Zero(1, 2);
  Matrix ones = Matrix::Ones(1, 2);
  CHECK(mse_loss(tape.constant(zeros), tape.constant(ones)).value()(0, 0) == 1.0);
}

TEST_CASE("sum backward fills ones") {
  Matrix x = random_matrix(3, 4, 81);
  Tape tape;
  Tensor tx = tape.variable(x);
  tape.backward(sum(tx));
  CHECK(max_abs_diff(tx.grad(), Matrix::Ones(3, 4)) == 0.0);
}

TEST_CASE("fan-out accumulates additively") {
  Matrix x = random_matrix(2, 2, 91);
  Tape tape;
  Tensor tx = tape.variable(x);
  tape.backward(sum(add(tx, tx)));
  CHECK(max_abs_diff(tx.grad(), 2.0 * Matrix::Ones(2, 2)) == 0.0);
}

TEST_CASE("gradient accumulation is independent of branch construction order") {
  Matrix x = random_matrix(3, 3, 101);
  Matrix a = random_matrix(3, 3, 102);
  Matrix b = random_matrix(3, 3, 103);

  auto run = [&](bool matmul_first) {
    Tape tape;
    Tensor tx = tape.variable(x);
    Tensor lhs, rhs;
    if (matmul_first) {
      lhs = matmul(tx, tape.constant(a));
      rhs = hadamard(tx, tape.constant(b));
    } else {
      rhs = hadamard(tx, tape.constant(b));
      lhs = matmul(tx, tape.constant(a));
    }
    tape.backward(sum(add(lhs, rhs)));
    return Matrix(tx.grad());
  };

  CHECK(max_abs_diff(run(true), run(false)) <= 1e-12);
}

TEST_CASE("mounted leaves outlive their handles, consumed or not") {
  // backward() exports a gradient for every mounted leaf, including one no op
  // ever consumed, so the tape must keep such leaves alive after the caller
  // drops the returned handle.
  Param used("used", random_matrix(2, 3, 106));
  Param idle("idle", random_matrix(3, 3, 107));
  Tape tape;
  Tensor loss;
  {
    Tensor tu = tape.leaf(used);
    tape.leaf(idle);  // handle discarded immediately
    loss = mse_loss(tu, tape.constant(Matrix::Zero(2, 3)));
  }
  tape.backward(loss);
  CHECK(max_abs_diff(idle.grad, Matrix::Zero(3, 3)) == 0.0);
  CHECK(used.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("ops on constants record nothing") {
  Tape tape;
  Tensor a = tape.constant(random_matrix(2, 2, 111));
  Tensor b = tape.constant(random_matrix(2, 2, 112));
  Tensor out = sigmoid(matmul(a, b));
  CHECK_FALSE(out.requires_grad());
  CHECK(tape.op_count() == 0);
}

TEST_CASE("backward contract violations") {
  Tape tape;
  Tensor x = tape.variable(random_matrix(2, 2, 121));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);  // non-scalar

  Tape other;
  Tensor y = other.variable(random_matrix(2, 2, 122));
  CHECK_THROWS_AS(add(x, y), std::invalid_argument);  // mixed tapes

  Tensor loss = sum(y);
  CHECK_THROWS_AS(tape.backward(loss), std::invalid_argument);  // foreign loss
}

TEST_CASE("grad_check on a linear map is exact to rounding") {
  Param p("weights", random_matrix(3, 2, 131));
  Matrix c = random_matrix(4, 3, 132);
  std::vector<Param*> params{&p};
  auto build = [&](Tape& t) { return sum(matmul(t.constant(c), t.leaf(p))); };
  // A linear map has zero truncation error, so a larger step only shrinks
  // the floating-point rounding term.
  auto report = pcd::grad_check(build, params, 1e-3);
  CHECK(report.max_rel_error < 1e-10);
}

TEST_CASE("grad_check through a sigmoid chain") {
  Param p("weights", random_matrix(3, 3, 141));
  Matrix x = random_matrix(5, 3, 142);
  std::vector<Param*> params{&p};
  auto build = [&](Tape& t) { return sum(sigmoid(matmul(t.constant(x), t.leaf(p)))); };
  auto report = pcd::grad_check(build, params, 1e-5);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("grad_check rejects bad steps and names non-finite parameters") {
  Param p("blow_up", Matrix::Constant(1, 1, 1e200));
  std::vector<Param*> params{&p};
  auto build = [&](Tape& t) {
    Tensor leaf = t.leaf(p);
    return sum(hadamard(leaf, leaf));
  };
  CHECK_THROWS_AS(pcd::grad_check(build, params, 0.0), std::invalid_argument);
  CHECK_THROWS_WITH_AS(pcd::grad_check(build, params, 1e-5), doctest::Contains("blow_up"),
                       std::runtime_error);
}

TEST_CASE("composed graphs stay within finite-difference tolerance") {
  // Without softmax the whole chain is smooth and tight tolerances hold.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Param p1("p1", random_matrix(4, 4, 1000 + seed));
    Param p2("p2", random_matrix(4, 4, 2000 + seed));
    Matrix x = random_matrix(3, 4, 3000 + seed);
    Matrix target = random_matrix(3, 4, 4000 + seed);
    std::vector<Param*> params{&p1, &p2};

    auto smooth = [&](Tape& t) {
      Tensor h = sigmoid(matmul(t.constant(x), t.leaf(p1)));
      return mse_loss(hadamard(h, matmul(t.constant(x), t.leaf(p2))), t.constant(target));
    };
    CHECK(pcd::grad_check(smooth, params, 1e-5).max_rel_error < 1e-6);

    auto with_softmax = [&](Tape& t) {
      Tensor h = softmax_rows(matmul(t.constant(x), t.leaf(p1)));
      return mse_loss(matmul(h, t.leaf(p2)), t.constant(target));
    };
    CHECK(pcd::grad_check(with_softmax, params, 1e-5).max_rel_error < 1e-4);
  }
}

TEST_CASE("transpose reverses gradients") {
  Matrix x = random_matrix(2, 4, 151);
  Matrix w = random_matrix(4, 2, 152);
  Tape tape;
  Tensor tx = tape.variable(x);
  tape.backward(sum(hadamard(transpose(tx), tape.constant(w))));
  CHECK(max_abs_diff(tx.grad(), w.transpose()) == 0.0);
}
