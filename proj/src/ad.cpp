#include "popdg/ad.hpp"

#include <cmath>
#include <utility>

namespace popdg::ad {

namespace {

constexpr Scalar kInvSqrt2 = 0.70710678118654752440;
constexpr Scalar kInvSqrt2Pi = 0.39894228040143267794;

void check_same_tape(const Var& a, const Var& b, const char* op) {
  check(a.valid() && b.valid() && a.tape() == b.tape(),
        std::string(op) + ": operands must live on the same tape");
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
            std::to_string(b.cols()) + ")");
}

// Reads the 3x3 matrix stored column-major within row i (entry (r,c) at col 3c+r).
Mat3 load3(const Mat& m, int i) {
  Mat3 out;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) out(r, c) = m(i, 3 * c + r);
  return out;
}

void store3(Mat& m, int i, const Mat3& v) {
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) m(i, 3 * c + r) = v(r, c);
}

bool rg(const Var& a) { return a.tape()->requires_grad(a); }

// Builds an op node. The closure receives (tape, upstream gradient, output
// index) so ops whose adjoint needs the forward output can read it back.
template <typename Backprop>
Var op(Tape* t, Mat value, bool any_parent_grad, Backprop bp) {
  if (!(any_parent_grad && t->grad_enabled())) {
    return t->emplace(std::move(value), false, nullptr);
  }
  Var out = t->emplace(std::move(value), true, nullptr);
  const int io = out.index();
  t->set_backprop(io, [io, bp](Tape& tp) { bp(tp, tp.grad_ref(io), io); });
  return out;
}

}  // namespace

const Mat& Var::value() const {
  check(tape_ != nullptr, "Var::value on an empty handle");
  return tape_->node(index_).val();
}

Var Tape::emplace(Mat value, bool requires_grad, std::function<void(Tape&)> backprop) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  if (n.requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::set_backprop(int index, std::function<void(Tape&)> backprop) {
  nodes_[index].backprop = std::move(backprop);
}

Var Tape::constant(Mat v) { return emplace(std::move(v), false, nullptr); }

Var Tape::leaf(const Mat& external) {
  Node n;
  n.external = &external;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Mat& Tape::value(const Var& v) const { return nodes_[v.index()].val(); }

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.index()];
  if (!n.has_grad) return Mat::Zero(n.val().rows(), n.val().cols());
  return n.grad;
}

void Tape::accum(int index, const Mat& g) {
  Node& n = nodes_[index];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& output) {
  check(output.valid() && output.tape() == this, "backward: output not on this tape");
  check(output.rows() == 1 && output.cols() == 1, "backward: output must be a 1x1 scalar");
  check(grad_enabled_, "backward: tape was built with gradients disabled");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accum(output.index(), Mat::Ones(1, 1));
  for (int i = output.index(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backprop) n.backprop(*this);
  }
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  check_same_shape(a, b, "add");
  const int ia = a.index(), ib = b.index();
  return op(a.tape(), a.value() + b.value(), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g);
              tp.accum(ib, g);
            });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a, b, "sub");
  const int ia = a.index(), ib = b.index();
  return op(a.tape(), a.value() - b.value(), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g);
              tp.accum(ib, Mat(-g));
            });
}

Var cmul(Var a, Var b) {
  check_same_tape(a, b, "cmul");
  check_same_shape(a, b, "cmul");
  const int ia = a.index(), ib = b.index();
  return op(a.tape(), a.value().cwiseProduct(b.value()), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g.cwiseProduct(tp.val(ib)));
              tp.accum(ib, g.cwiseProduct(tp.val(ia)));
            });
}

Var cdiv(Var a, Var b) {
  check_same_tape(a, b, "cdiv");
  check_same_shape(a, b, "cdiv");
  const int ia = a.index(), ib = b.index();
  return op(a.tape(), a.value().cwiseQuotient(b.value()), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              const Mat& bv = tp.val(ib);
              tp.accum(ia, g.cwiseQuotient(bv));
              tp.accum(ib, Mat(-g.cwiseProduct(tp.val(ia))
                                    .cwiseQuotient(bv.cwiseProduct(bv))));
            });
}

Var neg(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(-a.value()), rg(a),
            [ia](Tape& tp, const Mat& g, int) { tp.accum(ia, Mat(-g)); });
}

Var scale(Var a, Scalar s) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value() * s), rg(a),
            [ia, s](Tape& tp, const Mat& g, int) { tp.accum(ia, Mat(g * s)); });
}

Var add_scalar(Var a, Scalar s) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().array() + s), rg(a),
            [ia](Tape& tp, const Mat& g, int) { tp.accum(ia, g); });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  check(a.cols() == b.rows(), "matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                  " vs " + std::to_string(b.rows()) + ")");
  const int ia = a.index(), ib = b.index();
  return op(a.tape(), Mat(a.value() * b.value()), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              tp.accum(ia, Mat(g * tp.val(ib).transpose()));
              tp.accum(ib, Mat(tp.val(ia).transpose() * g));
            });
}

Var transpose(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().transpose()), rg(a),
            [ia](Tape& tp, const Mat& g, int) { tp.accum(ia, Mat(g.transpose())); });
}

Var sum(Var a) {
  const int ia = a.index();
  const int r = a.rows(), c = a.cols();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return op(a.tape(), std::move(out), rg(a), [ia, r, c](Tape& tp, const Mat& g, int) {
    tp.accum(ia, Mat(Mat::Constant(r, c, g(0, 0))));
  });
}

Var mean(Var a) {
  check(a.rows() > 0 && a.cols() > 0, "mean of an empty matrix");
  return scale(sum(a), 1.0 / (static_cast<Scalar>(a.rows()) * static_cast<Scalar>(a.cols())));
}

Var rowsum(Var a) {
  const int ia = a.index();
  const int c = a.cols();
  return op(a.tape(), Mat(a.value().rowwise().sum()), rg(a),
            [ia, c](Tape& tp, const Mat& g, int) { tp.accum(ia, Mat(g.replicate(1, c))); });
}

Var rowmean(Var a) {
  check(a.cols() > 0, "rowmean of an empty matrix");
  return scale(rowsum(a), 1.0 / static_cast<Scalar>(a.cols()));
}

Var colsum(Var a) {
  const int ia = a.index();
  const int r = a.rows();
  return op(a.tape(), Mat(a.value().colwise().sum()), rg(a),
            [ia, r](Tape& tp, const Mat& g, int) { tp.accum(ia, Mat(g.replicate(r, 1))); });
}

Var add_rowvec(Var a, Var v) {
  check_same_tape(a, v, "add_rowvec");
  check(v.rows() == 1 && v.cols() == a.cols(), "add_rowvec: v must be 1 x cols(a)");
  const int ia = a.index(), iv = v.index();
  return op(a.tape(), Mat(a.value().rowwise() + v.value().row(0)), rg(a) || rg(v),
            [ia, iv](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g);
              tp.accum(iv, Mat(g.colwise().sum()));
            });
}

Var mul_rowvec(Var a, Var v) {
  check_same_tape(a, v, "mul_rowvec");
  check(v.rows() == 1 && v.cols() == a.cols(), "mul_rowvec: v must be 1 x cols(a)");
  const int ia = a.index(), iv = v.index();
  Mat out = a.value().array().rowwise() * v.value().row(0).array();
  return op(a.tape(), std::move(out), rg(a) || rg(v),
            [ia, iv](Tape& tp, const Mat& g, int) {
              tp.accum(ia, Mat(g.array().rowwise() * tp.val(iv).row(0).array()));
              tp.accum(iv, Mat(g.cwiseProduct(tp.val(ia)).colwise().sum()));
            });
}

Var add_colvec(Var a, Var v) {
  check_same_tape(a, v, "add_colvec");
  check(v.cols() == 1 && v.rows() == a.rows(), "add_colvec: v must be rows(a) x 1");
  const int ia = a.index(), iv = v.index();
  return op(a.tape(), Mat(a.value().colwise() + v.value().col(0)), rg(a) || rg(v),
            [ia, iv](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g);
              tp.accum(iv, Mat(g.rowwise().sum()));
            });
}

Var mul_colvec(Var a, Var v) {
  check_same_tape(a, v, "mul_colvec");
  check(v.cols() == 1 && v.rows() == a.rows(), "mul_colvec: v must be rows(a) x 1");
  const int ia = a.index(), iv = v.index();
  Mat out = a.value().array().colwise() * v.value().col(0).array();
  return op(a.tape(), std::move(out), rg(a) || rg(v),
            [ia, iv](Tape& tp, const Mat& g, int) {
              tp.accum(ia, Mat(g.array().colwise() * tp.val(iv).col(0).array()));
              tp.accum(iv, Mat(g.cwiseProduct(tp.val(ia)).rowwise().sum()));
            });
}

Var div_colvec(Var a, Var v) {
  check_same_tape(a, v, "div_colvec");
  check(v.cols() == 1 && v.rows() == a.rows(), "div_colvec: v must be rows(a) x 1");
  const int ia = a.index(), iv = v.index();
  Mat out = a.value().array().colwise() / v.value().col(0).array();
  return op(a.tape(), std::move(out), rg(a) || rg(v),
            [ia, iv](Tape& tp, const Mat& g, int) {
              const auto vcol = tp.val(iv).col(0).array();
              tp.accum(ia, Mat(g.array().colwise() / vcol));
              Mat num = g.cwiseProduct(tp.val(ia)).rowwise().sum();
              tp.accum(iv, Mat(-num.array() / (vcol * vcol)));
            });
}

Var slice(Var a, int row0, int nrows, int col0, int ncols) {
  check(row0 >= 0 && col0 >= 0 && nrows >= 0 && ncols >= 0 && row0 + nrows <= a.rows() &&
            col0 + ncols <= a.cols(),
        "slice: block out of range");
  const int ia = a.index();
  const int ar = a.rows(), ac = a.cols();
  return op(a.tape(), Mat(a.value().block(row0, col0, nrows, ncols)), rg(a),
            [=](Tape& tp, const Mat& g, int) {
              Mat full = Mat::Zero(ar, ac);
              full.block(row0, col0, nrows, ncols) = g;
              tp.accum(ia, full);
            });
}

Var concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: empty input");
  int rows = 0;
  const int cols = parts[0].cols();
  bool any = false;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p, "concat_rows");
    check(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
    any = any || rg(p);
  }
  Mat out(rows, cols);
  int r = 0;
  std::vector<std::pair<int, int>> spans;  // (node index, row count)
  spans.reserve(parts.size());
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.index(), p.rows());
    r += p.rows();
  }
  return op(parts[0].tape(), std::move(out), any, [spans](Tape& tp, const Mat& g, int) {
    int r0 = 0;
    for (const auto& [idx, nr] : spans) {
      tp.accum(idx, Mat(g.middleRows(r0, nr)));
      r0 += nr;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  int cols = 0;
  const int rows = parts[0].rows();
  bool any = false;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p, "concat_cols");
    check(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
    any = any || rg(p);
  }
  Mat out(rows, cols);
  int c = 0;
  std::vector<std::pair<int, int>> spans;  // (node index, col count)
  spans.reserve(parts.size());
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.index(), p.cols());
    c += p.cols();
  }
  return op(parts[0].tape(), std::move(out), any, [spans](Tape& tp, const Mat& g, int) {
    int c0 = 0;
    for (const auto& [idx, nc] : spans) {
      tp.accum(idx, Mat(g.middleCols(c0, nc)));
      c0 += nc;
    }
  });
}

Var reshape_rowmajor(Var a, int rows, int cols) {
  check(rows >= 0 && cols >= 0 && rows * cols == a.rows() * a.cols(),
        "reshape_rowmajor: element count mismatch");
  const int ia = a.index();
  const int ar = a.rows(), ac = a.cols();
  Mat out(rows, cols);
  for (int k = 0; k < rows * cols; ++k) out(k / cols, k % cols) = a.value()(k / ac, k % ac);
  return op(a.tape(), std::move(out), rg(a), [=](Tape& tp, const Mat& g, int) {
    Mat da(ar, ac);
    for (int k = 0; k < ar * ac; ++k) da(k / ac, k % ac) = g(k / cols, k % cols);
    tp.accum(ia, da);
  });
}

Var softmax_rows(Var a) {
  const int ia = a.index();
  Mat out = a.value();
  for (int i = 0; i < out.rows(); ++i) {
    const Scalar m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  // dX_row = (g_row - <g_row, y_row>) .* y_row
  return op(a.tape(), std::move(out), rg(a), [ia](Tape& tp, const Mat& g, int io) {
    const Mat& y = tp.val(io);
    Mat da(y.rows(), y.cols());
    for (int i = 0; i < y.rows(); ++i) {
      const Scalar dot = g.row(i).cwiseProduct(y.row(i)).sum();
      da.row(i) = (g.row(i).array() - dot) * y.row(i).array();
    }
    tp.accum(ia, da);
  });
}

Var sigmoid(Var a) {
  const int ia = a.index();
  Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return op(a.tape(), std::move(out), rg(a), [ia](Tape& tp, const Mat& g, int io) {
    const auto y = tp.val(io).array();
    tp.accum(ia, Mat(g.array() * y * (1.0 - y)));
  });
}

Var vexp(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().array().exp()), rg(a),
            [ia](Tape& tp, const Mat& g, int io) {
              tp.accum(ia, g.cwiseProduct(tp.val(io)));
            });
}

Var vlog(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().array().log()), rg(a),
            [ia](Tape& tp, const Mat& g, int) {
              tp.accum(ia, g.cwiseQuotient(tp.val(ia)));
            });
}

Var vsqrt(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().array().sqrt()), rg(a),
            [ia](Tape& tp, const Mat& g, int io) {
              tp.accum(ia, Mat(g.array() * 0.5 / tp.val(io).array()));
            });
}

Var gelu(Var a) {
  const int ia = a.index();
  // gelu(x) = x * Phi(x) with the exact Gaussian CDF.
  Mat out = a.value().unaryExpr(
      [](Scalar x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return op(a.tape(), std::move(out), rg(a), [ia](Tape& tp, const Mat& g, int) {
    // d/dx = Phi(x) + x * phi(x)
    Mat d = tp.val(ia).unaryExpr([](Scalar x) {
      const Scalar cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const Scalar pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    });
    tp.accum(ia, g.cwiseProduct(d));
  });
}

Var square(Var a) {
  const int ia = a.index();
  return op(a.tape(), Mat(a.value().array().square()), rg(a),
            [ia](Tape& tp, const Mat& g, int) {
              tp.accum(ia, Mat(2.0 * g.cwiseProduct(tp.val(ia))));
            });
}

Var detach(Var a) { return a.tape()->constant(a.value()); }

Var normalize_rows(Var a, Scalar eps) {
  const int ia = a.index();
  const int n = a.rows();
  Mat out(a.rows(), a.cols());
  Vec norms(n);
  for (int i = 0; i < n; ++i) {
    norms(i) = std::max(a.value().row(i).norm(), eps);
    out.row(i) = a.value().row(i) / norms(i);
  }
  // Above eps: d x_row = (g_row - <g_row, y_row> y_row) / norm_row.
  // Below eps the map is linear (x / eps), so d x_row = g_row / eps.
  return op(a.tape(), std::move(out), rg(a),
            [ia, norms, eps](Tape& tp, const Mat& g, int io) {
              const Mat& y = tp.val(io);
              Mat da(y.rows(), y.cols());
              for (int i = 0; i < y.rows(); ++i) {
                if (norms(i) <= eps) {
                  da.row(i) = g.row(i) / eps;
                } else {
                  const Scalar dot = g.row(i).cwiseProduct(y.row(i)).sum();
                  da.row(i) = (g.row(i) - dot * y.row(i)) / norms(i);
                }
              }
              tp.accum(ia, da);
            });
}

Var cross3(Var a, Var b) {
  check_same_tape(a, b, "cross3");
  check_same_shape(a, b, "cross3");
  check(a.cols() == 3, "cross3: operands must be Nx3");
  const int ia = a.index(), ib = b.index();
  const Mat& av = a.value();
  const Mat& bv = b.value();
  Mat out(av.rows(), 3);
  for (int i = 0; i < av.rows(); ++i)
    out.row(i) = Vec3(av.row(i)).cross(Vec3(bv.row(i))).transpose();
  return op(a.tape(), std::move(out), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              const Mat& A = tp.val(ia);
              const Mat& B = tp.val(ib);
              Mat da(A.rows(), 3), db(A.rows(), 3);
              for (int i = 0; i < A.rows(); ++i) {
                const Vec3 gi = g.row(i), ai = A.row(i), bi = B.row(i);
                da.row(i) = bi.cross(gi).transpose();
                db.row(i) = gi.cross(ai).transpose();
              }
              tp.accum(ia, da);
              tp.accum(ib, db);
            });
}

Var matmul3_rows(Var a, Var b) {
  check_same_tape(a, b, "matmul3_rows");
  check(a.cols() == 9 && b.cols() == 9 && a.rows() == b.rows(),
        "matmul3_rows: operands must be Nx9 with equal row counts");
  const int ia = a.index(), ib = b.index();
  Mat out(a.rows(), 9);
  for (int i = 0; i < a.rows(); ++i) store3(out, i, load3(a.value(), i) * load3(b.value(), i));
  return op(a.tape(), std::move(out), rg(a) || rg(b),
            [ia, ib](Tape& tp, const Mat& g, int) {
              const Mat& A = tp.val(ia);
              const Mat& B = tp.val(ib);
              Mat da(A.rows(), 9), db(A.rows(), 9);
              for (int i = 0; i < A.rows(); ++i) {
                const Mat3 gi = load3(g, i), Ai = load3(A, i), Bi = load3(B, i);
                store3(da, i, gi * Bi.transpose());
                store3(db, i, Ai.transpose() * gi);
              }
              tp.accum(ia, da);
              tp.accum(ib, db);
            });
}

Var mse(Var a, Var b) {
  check_same_tape(a, b, "mse");
  check_same_shape(a, b, "mse");
  return mean(square(sub(a, b)));
}

}  // namespace popdg::ad
