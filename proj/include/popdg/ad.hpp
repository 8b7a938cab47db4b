#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "popdg/types.hpp"

namespace popdg::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; values live on the tape.
class Var {
 public:
  Var() = default;
  const Mat& value() const;
  int rows() const { return static_cast<int>(value().rows()); }
  int cols() const { return static_cast<int>(value().cols()); }
  Tape* tape() const { return tape_; }
  int index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int i) : tape_(t), index_(i) {}
  Tape* tape_ = nullptr;
  int index_ = -1;
};

// Reverse-mode tape over dense matrices. Each op records its output value and
// an adjoint closure; backward() replays closures in reverse. A tape built
// with grad_enabled=false records values only (inference mode).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat v);
  // Leaf whose value lives outside the tape; must outlive it. Gradient is
  // accumulated on the tape and read back via grad().
  Var leaf(const Mat& external);

  const Mat& value(const Var& v) const;
  // Zero-filled if the node never received gradient.
  Mat grad(const Var& v) const;

  // Backpropagates from a 1x1 output; resets previous gradients.
  void backward(const Var& output);

  // --- internals used by op implementations ---
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&)> backprop;
    const Mat& val() const { return external ? *external : owned; }
  };
  Var emplace(Mat value, bool requires_grad, std::function<void(Tape&)> backprop);
  // Binds the adjoint closure after the node exists (so it can capture its
  // own index).
  void set_backprop(int index, std::function<void(Tape&)> backprop);
  const Node& node(int i) const { return nodes_[i]; }
  bool requires_grad(const Var& v) const { return nodes_[v.index()].requires_grad; }
  void accum(int index, const Mat& g);
  const Mat& grad_ref(int index) const { return nodes_[index].grad; }
  bool has_grad(int index) const { return nodes_[index].has_grad; }
  const Mat& val(int index) const { return nodes_[index].val(); }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// Elementwise, same shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var cmul(Var a, Var b);
Var cdiv(Var a, Var b);

Var neg(Var a);
Var scale(Var a, Scalar s);
Var add_scalar(Var a, Scalar s);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var sum(Var a);        // 1x1
Var mean(Var a);       // 1x1
Var rowsum(Var a);     // Nx1
Var rowmean(Var a);    // Nx1
Var colsum(Var a);     // 1xC

// Broadcasts: v is 1xC (row) or Nx1 (col).
Var add_rowvec(Var a, Var v);
Var mul_rowvec(Var a, Var v);
Var add_colvec(Var a, Var v);
Var mul_colvec(Var a, Var v);
Var div_colvec(Var a, Var v);

Var slice(Var a, int row0, int nrows, int col0, int ncols);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
// Reinterprets the row-major flattening of a as an R x C matrix.
Var reshape_rowmajor(Var a, int rows, int cols);

Var softmax_rows(Var a);
Var sigmoid(Var a);
Var vexp(Var a);
Var vlog(Var a);
Var vsqrt(Var a);
Var gelu(Var a);
Var square(Var a);

// Identity in value; blocks gradient flow.
Var detach(Var a);

// Row-wise geometry on Nx3 / Nx9 blocks (used by differentiable FK).
// normalize_rows: each row divided by max(||row||, eps), so well-conditioned
// rows come out exactly unit-norm and near-zero rows stay finite.
Var normalize_rows(Var a, Scalar eps = 1e-9);
Var cross3(Var a, Var b);  // per-row cross product, Nx3
// Per-row 3x3 matrix product. Rows store a 3x3 matrix column-major:
// entry (r,c) at column 3c+r. Returns the per-row product A*B.
Var matmul3_rows(Var a, Var b);

// Mean squared error over all elements.
Var mse(Var a, Var b);

}  // namespace popdg::ad
