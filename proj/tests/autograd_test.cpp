#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "sceneiqa/autograd.hpp"

using namespace sceneiqa;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  return Matrix::NullaryExpr(r, c, [&]() { return d(rng); });
}

void expect_grad_ok(const gradcheck::Graph& g, std::vector<Matrix> leaves, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const auto r = gradcheck::check_graph(g, std::move(leaves), rng);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

}  // namespace

TEST(Autograd, ForwardValues) {
  Tape t;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  const Var x = t.leaf(a);
  EXPECT_EQ(ad::matmul(x, x).value(), a * a);
  EXPECT_EQ(ad::transpose(x).value(), a.transpose());
  EXPECT_DOUBLE_EQ(ad::sum(x).value()(0, 0), 10.0);
  const Matrix m = ad::mean_rows(x).value();
  EXPECT_EQ(m.rows(), 1);
  EXPECT_DOUBLE_EQ(m(0, 1), 3.0);
  const Matrix r = ad::reshape(x, 1, 4).value();
  EXPECT_EQ(r(0, 1), 3.0);  // column-major
  const Matrix s = ad::softmax_rows(x).value();
  EXPECT_NEAR(s.row(0).sum(), 1.0, 1e-15);
  const Matrix ls = ad::log_softmax_cols(x).value();
  EXPECT_NEAR(ls.col(1).array().exp().sum(), 1.0, 1e-15);
  EXPECT_THROW(ad::matmul(x, t.leaf(Matrix::Ones(3, 1))), ValidationError);
}

TEST(Autograd, AccumulatesOverReuse) {
  Tape t;
  const Var x = t.leaf(Matrix::Constant(1, 1, 3.0));
  const Var y = ad::add(ad::hadamard(x, x), x);  // x^2 + x
  t.backward(y, Matrix::Ones(1, 1));
  EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 7.0);
}

TEST(Autograd, SeedShapeChecked) {
  Tape t;
  const Var x = t.leaf(Matrix::Ones(2, 1));
  EXPECT_THROW(t.backward(x, Matrix::Ones(1, 1)), ValidationError);
}

TEST(AutogradGrad, Elementwise) {
  std::mt19937_64 rng(1);
  const Matrix a = randn(3, 4, rng), b = randn(3, 4, rng);
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); }, {a, b});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); }, {a, b});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::hadamard(v[0], v[1]); }, {a, b});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -2.5); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::rsub(1.0, v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::tanh(v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::sigmoid(v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::exp(v[0]); }, {a});
  // relu away from its kink
  Matrix shifted = a;
  for (Eigen::Index i = 0; i < shifted.size(); ++i) shifted(i) += shifted(i) > 0 ? 0.1 : -0.1;
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::relu(v[0]); }, {shifted});
}

TEST(AutogradGrad, Broadcasting) {
  std::mt19937_64 rng(2);
  const Matrix a = randn(3, 4, rng), col = randn(3, 1, rng), row = randn(1, 4, rng);
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::add_col(v[0], v[1]); }, {a, col});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); }, {a, row});
}

TEST(AutogradGrad, Structural) {
  std::mt19937_64 rng(3);
  const Matrix a = randn(3, 4, rng), b = randn(4, 2, rng), c = randn(3, 2, rng);
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }, {a, b});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::transpose(v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::reshape(v[0], 6, 2); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::slice_rows(v[0], 1, 2); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::slice_cols(v[0], 1, 3); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::concat_cols({v[0], v[1], v[0]}); }, {a, c});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::concat_rows({v[0], v[1]}); }, {b, randn(1, 2, rng)});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::sum(v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::mean_rows(v[0]); }, {a});
  expect_grad_ok(
      [](Tape&, const std::vector<Var>& v) {
        // reversal plus a duplicated source index
        return ad::gather(v[0], {11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 1}, 4, 3);
      },
      {a});
}

TEST(AutogradGrad, Normalizers) {
  std::mt19937_64 rng(4);
  const Matrix a = randn(3, 5, rng, 2.0);
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); }, {a});
  expect_grad_ok([](Tape&, const std::vector<Var>& v) { return ad::log_softmax_cols(v[0]); }, {a});
}

TEST(AutogradGrad, BatchedMatvec) {
  std::mt19937_64 rng(5);
  const Eigen::Index rows = 3, in = 4, batch = 5;
  const Matrix w = randn(rows * in, batch, rng), x = randn(in, batch, rng);
  expect_grad_ok([&](Tape&, const std::vector<Var>& v) { return ad::batched_matvec(v[0], v[1], rows); }, {w, x});

  Tape t;
  const Var out = ad::batched_matvec(t.leaf(w), t.leaf(x), rows);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Matrix wb = Eigen::Map<const Matrix>(w.col(b).data(), rows, in);
    EXPECT_LT((out.value().col(b) - wb * x.col(b)).norm(), 1e-14);
  }
}

TEST(AutogradGrad, Composite) {
  std::mt19937_64 rng(6);
  const Matrix w1 = randn(5, 3, rng), w2 = randn(1, 5, rng), x = randn(3, 7, rng), b = randn(5, 1, rng);
  expect_grad_ok(
      [](Tape&, const std::vector<Var>& v) {
        const Var h = ad::tanh(ad::add_col(ad::matmul(v[0], v[2]), v[3]));
        return ad::sigmoid(ad::matmul(v[1], ad::hadamard(h, h)));
      },
      {w1, w2, x, b});
}
