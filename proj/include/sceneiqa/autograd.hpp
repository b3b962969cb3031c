#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records every
// operation of one forward pass; backward() replays it in reverse, accumulating
// gradients into each node. Batches are laid out one sample per column.

#include <cassert>
#include <cmath>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sceneiqa/error.hpp"

namespace sceneiqa::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var leaf(Matrix value) { return push(std::move(value), nullptr); }

  Var push(Matrix value, Backward backward) {
    nodes_.push_back({std::move(value), Matrix(), std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }

  // Empty matrix when no gradient reached the node.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

  void accumulate(std::size_t id, const Matrix& g) {
    auto& node = nodes_[id];
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  // Seeds each (var, d loss / d var) pair and propagates to every earlier node.
  void backward(std::span<const std::pair<Var, Matrix>> seeds) {
    std::size_t last = 0;
    for (const auto& [var, g] : seeds) {
      if (g.rows() != var.rows() || g.cols() != var.cols()) throw ValidationError("backward: seed shape mismatch");
      accumulate(var.id, g);
      last = std::max(last, var.id);
    }
    for (std::size_t i = last + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(*this, node.grad);
    }
  }

  void backward(Var output, const Matrix& seed) {
    const std::pair<Var, Matrix> s{output, seed};
    backward(std::span<const std::pair<Var, Matrix>>(&s, 1));
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ValidationError(std::string("shape mismatch in ") + what);
}
}  // namespace detail

inline Var constant(Tape& tape, Matrix value) { return tape.leaf(std::move(value)); }

inline Var matmul(Var a, Var b) {
  detail::require(a.cols() == b.rows(), "matmul");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g * t.value(ib).transpose());
    t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

// a (r x c) + column vector b (r x 1) broadcast over columns.
inline Var add_col(Var a, Var b) {
  detail::require(b.cols() == 1 && a.rows() == b.rows(), "add_col");
  const std::size_t ia = a.id, ib = b.id;
  Matrix out = a.value().colwise() + b.value().col(0);
  return a.tape->push(std::move(out), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g.rowwise().sum());
  });
}

// a (r x c) + row vector b (1 x c) broadcast over rows.
inline Var add_row(Var a, Var b) {
  detail::require(b.rows() == 1 && a.cols() == b.cols(), "add_row");
  const std::size_t ia = a.id, ib = b.id;
  Matrix out = a.value().rowwise() + b.value().row(0);
  return a.tape->push(std::move(out), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g.colwise().sum());
  });
}

inline Var hadamard(Var a, Var b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var scale(Var a, double s) {
  const std::size_t ia = a.id;
  return a.tape->push(a.value() * s, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

// s - a, elementwise.
inline Var rsub(double s, Var a) {
  const std::size_t ia = a.id;
  Matrix out = (-a.value()).array() + s;
  return a.tape->push(std::move(out), [ia](Tape& t, const Matrix& g) { t.accumulate(ia, -g); });
}

inline Var tanh(Var a) {
  const std::size_t ia = a.id;
  const std::size_t out = a.tape->size();
  return a.tape->push(a.value().array().tanh().matrix(), [ia, out](Tape& t, const Matrix& g) {
    const auto& y = t.value(out).array();
    t.accumulate(ia, (g.array() * (1.0 - y * y)).matrix());
  });
}

inline Var sigmoid(Var a) {
  const std::size_t ia = a.id;
  const std::size_t out = a.tape->size();
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(y), [ia, out](Tape& t, const Matrix& g) {
    const auto& y = t.value(out).array();
    t.accumulate(ia, (g.array() * y * (1.0 - y)).matrix());
  });
}

inline Var relu(Var a) {
  const std::size_t ia = a.id;
  return a.tape->push(a.value().cwiseMax(0.0), [ia](Tape& t, const Matrix& g) {
    const Matrix mask = (t.value(ia).array() > 0.0).cast<double>().matrix();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

inline Var exp(Var a) {
  const std::size_t ia = a.id;
  const std::size_t out = a.tape->size();
  return a.tape->push(a.value().array().exp().matrix(),
                      [ia, out](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseProduct(t.value(out))); });
}

inline Var transpose(Var a) {
  const std::size_t ia = a.id;
  return a.tape->push(a.value().transpose(), [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

// Column-major reinterpretation to rows x cols.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  detail::require(a.value().size() == rows * cols, "reshape");
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape->push(std::move(out), [ia, r0, c0](Tape& t, const Matrix& g) {
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

// out(k) = a(index[k]) over column-major linear indices; out has rows x cols.
inline Var gather(Var a, std::vector<Eigen::Index> index, Eigen::Index rows, Eigen::Index cols) {
  detail::require(static_cast<Eigen::Index>(index.size()) == rows * cols, "gather");
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < index.size(); ++k) out.data()[k] = a.value().data()[index[k]];
  return a.tape->push(std::move(out), [ia, r0, c0, index = std::move(index)](Tape& t, const Matrix& g) {
    Matrix back = Matrix::Zero(r0, c0);
    for (std::size_t k = 0; k < index.size(); ++k) back.data()[index[k]] += g.data()[k];
    t.accumulate(ia, back);
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.rows(), "slice_rows");
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return a.tape->push(a.value().middleRows(start, count), [ia, r0, c0, start, count](Tape& t, const Matrix& g) {
    Matrix back = Matrix::Zero(r0, c0);
    back.middleRows(start, count) = g;
    t.accumulate(ia, back);
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.cols(), "slice_cols");
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return a.tape->push(a.value().middleCols(start, count), [ia, r0, c0, start, count](Tape& t, const Matrix& g) {
    Matrix back = Matrix::Zero(r0, c0);
    back.middleCols(start, count) = g;
    t.accumulate(ia, back);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    offset += p.rows();
  }
  return parts.front().tape->push(std::move(out), [spans](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& [id, n] : spans) {
      t.accumulate(id, g.middleRows(off, n));
      off += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    spans.emplace_back(p.id, p.cols());
    offset += p.cols();
  }
  return parts.front().tape->push(std::move(out), [spans](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& [id, n] : spans) {
      t.accumulate(id, g.middleCols(off, n));
      off += n;
    }
  });
}

// Softmax along each row.
inline Var softmax_rows(Var a) {
  const std::size_t ia = a.id;
  const std::size_t out_id = a.tape->size();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return a.tape->push(std::move(y), [ia, out_id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out_id);
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix back = y.cwiseProduct(g.colwise() - dot);
    t.accumulate(ia, back);
  });
}

// Log-softmax along each column.
inline Var log_softmax_cols(Var a) {
  const std::size_t ia = a.id;
  const std::size_t out_id = a.tape->size();
  Matrix y = a.value();
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double m = y.col(c).maxCoeff();
    const double lse = m + std::log((y.col(c).array() - m).exp().sum());
    y.col(c).array() -= lse;
  }
  return a.tape->push(std::move(y), [ia, out_id](Tape& t, const Matrix& g) {
    const Matrix p = t.value(out_id).array().exp().matrix();
    const Eigen::RowVectorXd colsum = g.colwise().sum();
    Matrix back = g - p.cwiseProduct(colsum.replicate(p.rows(), 1));
    t.accumulate(ia, back);
  });
}

inline Var sum(Var a) {
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), [ia, r0, c0](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r0, c0, g(0, 0)));
  });
}

// Mean over rows: (r x c) -> (1 x c).
inline Var mean_rows(Var a) {
  const std::size_t ia = a.id;
  const Eigen::Index r0 = a.rows();
  Matrix out = a.value().colwise().mean();
  return a.tape->push(std::move(out), [ia, r0](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(r0, 1) / static_cast<double>(r0));
  });
}

// Per-sample matrix-vector product. Column b of `weights` holds a rows x in
// matrix in column-major order; out.col(b) = W_b * x.col(b).
inline Var batched_matvec(Var weights, Var x, Eigen::Index rows) {
  const Eigen::Index in = x.rows();
  const Eigen::Index batch = x.cols();
  detail::require(weights.cols() == batch && weights.rows() == rows * in, "batched_matvec");
  const std::size_t iw = weights.id, ix = x.id;
  Matrix out(rows, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::Map<const Matrix> w(weights.value().col(b).data(), rows, in);
    out.col(b) = w * x.value().col(b);
  }
  return x.tape->push(std::move(out), [iw, ix, rows, in, batch](Tape& t, const Matrix& g) {
    const Matrix& wv = t.value(iw);
    const Matrix& xv = t.value(ix);
    Matrix gw(rows * in, batch);
    Matrix gx(in, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::Map<const Matrix> w(wv.col(b).data(), rows, in);
      Eigen::Map<Matrix> gwb(gw.col(b).data(), rows, in);
      gwb.noalias() = g.col(b) * xv.col(b).transpose();
      gx.col(b) = w.transpose() * g.col(b);
    }
    t.accumulate(iw, gw);
    t.accumulate(ix, gx);
  });
}

}  // namespace sceneiqa::ad
