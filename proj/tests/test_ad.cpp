#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "popdg/ad.hpp"
#include "popdg/rng.hpp"

using namespace popdg;
namespace ad = popdg::ad;

namespace {

struct GradCase {
  std::string name;
  std::vector<std::pair<int, int>> shapes;
  std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> build;
  bool positive = false;  // draw inputs from (0.5, 1.5) instead of N(0, 1)
};

Mat random_matrix(Rng& rng, int r, int c, bool positive) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = positive ? rng.uniform(0.5, 1.5) : rng.normal();
  return m;
}

// Weighted sum of the case's output under a gradient-free tape.
Scalar eval_scalar(const GradCase& c, const std::vector<Mat>& xs, const Mat& w) {
  ad::Tape tape(false);
  std::vector<ad::Var> vars;
  vars.reserve(xs.size());
  for (const Mat& x : xs) vars.push_back(tape.leaf(x));
  const ad::Var out = c.build(tape, vars);
  return out.value().cwiseProduct(w).sum();
}

void check_against_finite_differences(const GradCase& c) {
  INFO("op: " << c.name);
  Rng rng = Rng::stream(911, c.name);
  std::vector<Mat> xs;
  xs.reserve(c.shapes.size());
  for (auto [r, cc] : c.shapes) xs.push_back(random_matrix(rng, r, cc, c.positive));

  // Shape-discovering forward pass, then fixed random projection weights.
  Mat w;
  {
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const Mat& x : xs) vars.push_back(tape.leaf(x));
    const ad::Var out = c.build(tape, vars);
    w = random_matrix(rng, out.rows(), out.cols(), false);
  }

  std::vector<Mat> analytic;
  {
    ad::Tape tape(true);
    std::vector<ad::Var> vars;
    for (const Mat& x : xs) vars.push_back(tape.leaf(x));
    const ad::Var out = c.build(tape, vars);
    const ad::Var loss = ad::sum(ad::cmul(out, tape.constant(w)));
    tape.backward(loss);
    for (const ad::Var& v : vars) analytic.push_back(tape.grad(v));
  }

  const Scalar eps = 1e-5;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (int i = 0; i < xs[k].rows(); ++i) {
      for (int j = 0; j < xs[k].cols(); ++j) {
        std::vector<Mat> plus = xs, minus = xs;
        plus[k](i, j) += eps;
        minus[k](i, j) -= eps;
        const Scalar fd = (eval_scalar(c, plus, w) - eval_scalar(c, minus, w)) / (2 * eps);
        const Scalar an = analytic[k](i, j);
        const Scalar rel =
            std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), Scalar(1e-3)});
        INFO("input " << k << " entry (" << i << "," << j << "): analytic " << an
                      << " vs fd " << fd);
        CHECK(rel < 1e-5);
      }
    }
  }
}

}  // namespace

TEST_CASE("every tape op matches central finite differences") {
  using ad::Var;
  using VarList = std::vector<Var>;
  std::vector<GradCase> cases = {
      {"add", {{3, 4}, {3, 4}}, [](ad::Tape&, const VarList& v) { return ad::add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](ad::Tape&, const VarList& v) { return ad::sub(v[0], v[1]); }},
      {"cmul", {{3, 4}, {3, 4}},
       [](ad::Tape&, const VarList& v) { return ad::cmul(v[0], v[1]); }},
      {"cdiv", {{3, 4}, {3, 4}},
       [](ad::Tape&, const VarList& v) { return ad::cdiv(v[0], v[1]); }, true},
      {"neg", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::neg(v[0]); }},
      {"scale", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::scale(v[0], -1.7); }},
      {"add_scalar", {{3, 4}},
       [](ad::Tape&, const VarList& v) { return ad::add_scalar(v[0], 0.3); }},
      {"matmul", {{3, 4}, {4, 2}},
       [](ad::Tape&, const VarList& v) { return ad::matmul(v[0], v[1]); }},
      {"transpose", {{3, 4}},
       [](ad::Tape&, const VarList& v) { return ad::transpose(v[0]); }},
      {"sum", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::sum(v[0]); }},
      {"mean", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::mean(v[0]); }},
      {"rowsum", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::rowsum(v[0]); }},
      {"rowmean", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::rowmean(v[0]); }},
      {"colsum", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::colsum(v[0]); }},
      {"add_rowvec", {{3, 4}, {1, 4}},
       [](ad::Tape&, const VarList& v) { return ad::add_rowvec(v[0], v[1]); }},
      {"mul_rowvec", {{3, 4}, {1, 4}},
       [](ad::Tape&, const VarList& v) { return ad::mul_rowvec(v[0], v[1]); }},
      {"add_colvec", {{3, 4}, {3, 1}},
       [](ad::Tape&, const VarList& v) { return ad::add_colvec(v[0], v[1]); }},
      {"mul_colvec", {{3, 4}, {3, 1}},
       [](ad::Tape&, const VarList& v) { return ad::mul_colvec(v[0], v[1]); }},
      {"div_colvec", {{3, 4}, {3, 1}},
       [](ad::Tape&, const VarList& v) { return ad::div_colvec(v[0], v[1]); }, true},
      {"slice", {{4, 5}},
       [](ad::Tape&, const VarList& v) { return ad::slice(v[0], 1, 2, 1, 3); }},
      {"concat_rows", {{2, 3}, {1, 3}, {3, 3}},
       [](ad::Tape&, const VarList& v) { return ad::concat_rows({v[0], v[1], v[2]}); }},
      {"concat_cols", {{3, 2}, {3, 1}},
       [](ad::Tape&, const VarList& v) { return ad::concat_cols({v[0], v[1]}); }},
      {"reshape_rowmajor", {{2, 6}},
       [](ad::Tape&, const VarList& v) { return ad::reshape_rowmajor(v[0], 3, 4); }},
      {"softmax_rows", {{3, 5}},
       [](ad::Tape&, const VarList& v) { return ad::softmax_rows(v[0]); }},
      {"sigmoid", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::sigmoid(v[0]); }},
      {"vexp", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::vexp(v[0]); }},
      {"vlog", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::vlog(v[0]); }, true},
      {"vsqrt", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::vsqrt(v[0]); }, true},
      {"gelu", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::gelu(v[0]); }},
      {"square", {{3, 4}}, [](ad::Tape&, const VarList& v) { return ad::square(v[0]); }},
      {"normalize_rows", {{4, 3}},
       [](ad::Tape&, const VarList& v) { return ad::normalize_rows(v[0]); }},
      {"cross3", {{4, 3}, {4, 3}},
       [](ad::Tape&, const VarList& v) { return ad::cross3(v[0], v[1]); }},
      {"matmul3_rows", {{2, 9}, {2, 9}},
       [](ad::Tape&, const VarList& v) { return ad::matmul3_rows(v[0], v[1]); }},
      {"mse", {{3, 4}, {3, 4}}, [](ad::Tape&, const VarList& v) { return ad::mse(v[0], v[1]); }},
      {"composite attention-ish stack", {{3, 4}, {4, 4}},
       [](ad::Tape&, const VarList& v) {
         return ad::gelu(ad::matmul(ad::softmax_rows(v[0]), v[1]));
       }},
      {"composite rotation chain", {{2, 9}, {2, 3}},
       [](ad::Tape&, const VarList& v) {
         return ad::cross3(ad::normalize_rows(ad::slice(v[0], 0, 2, 0, 3)), v[1]);
       }},
  };
  for (const GradCase& c : cases) check_against_finite_differences(c);
}

TEST_CASE("values reuse a node through multiple consumers") {
  Mat x(2, 2);
  x << 1, 2, 3, 4;
  ad::Tape tape;
  ad::Var vx = tape.leaf(x);
  // L = sum(x + x) => dL/dx = 2 everywhere.
  tape.backward(ad::sum(ad::add(vx, vx)));
  CHECK((tape.grad(vx) - Mat::Constant(2, 2, 2.0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward resets gradients between calls") {
  Mat x(1, 3);
  x << 1, 2, 3;
  ad::Tape tape;
  ad::Var vx = tape.leaf(x);
  ad::Var loss = ad::sum(ad::square(vx));
  tape.backward(loss);
  const Mat once = tape.grad(vx);
  tape.backward(loss);
  CHECK((tape.grad(vx) - once).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("detach blocks gradient flow but keeps the value") {
  Mat x(2, 3);
  x << 1, -2, 3, 4, -5, 6;
  ad::Tape tape;
  ad::Var vx = tape.leaf(x);
  ad::Var d = ad::detach(vx);
  CHECK((d.value() - x).cwiseAbs().maxCoeff() == 0.0);
  // Mix a detached branch with a live one: only the live one contributes.
  tape.backward(ad::sum(ad::add(ad::square(d), vx)));
  CHECK((tape.grad(vx) - Mat::Ones(2, 3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient-free tapes evaluate but refuse backward") {
  Mat x(2, 2);
  x << 1, 2, 3, 4;
  ad::Tape tape(false);
  ad::Var vx = tape.leaf(x);
  ad::Var y = ad::square(vx);
  CHECK(y.value()(1, 1) == 16.0);
  CHECK_THROWS_AS(tape.backward(ad::sum(y)), Error);
}

TEST_CASE("softmax rows are simplex points and honor additive masks") {
  Mat x(2, 4);
  x << 1, 2, 3, 4, 0, 0, -1e9, 0;
  ad::Tape tape;
  Mat y = ad::softmax_rows(tape.leaf(x)).value();
  for (int i = 0; i < 2; ++i) CHECK(y.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y(1, 2) < 1e-300);             // masked entry vanishes
  CHECK(y(1, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("reshape uses row-major element order") {
  Mat x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  ad::Tape tape;
  Mat y = ad::reshape_rowmajor(tape.leaf(x), 3, 2).value();
  Mat want(3, 2);
  want << 1, 2, 3, 4, 5, 6;
  CHECK((y - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("per-row 3x3 products match explicit matrix algebra") {
  Rng rng = Rng::stream(911, "matmul3-value");
  Mat a = random_matrix(rng, 3, 9, false);
  Mat b = random_matrix(rng, 3, 9, false);
  ad::Tape tape;
  Mat out = ad::matmul3_rows(tape.leaf(a), tape.leaf(b)).value();
  for (int i = 0; i < 3; ++i) {
    Mat3 A, B;
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r) {
        A(r, c) = a(i, 3 * c + r);
        B(r, c) = b(i, 3 * c + r);
      }
    const Mat3 C = A * B;
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r)
        CHECK(out(i, 3 * c + r) == doctest::Approx(C(r, c)).epsilon(1e-12));
  }
}

TEST_CASE("shape violations throw") {
  ad::Tape tape;
  ad::Var a = tape.constant(Mat::Zero(2, 3));
  ad::Var b = tape.constant(Mat::Zero(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), Error);
  CHECK_THROWS_AS(ad::matmul(a, a), Error);
  CHECK_THROWS_AS(ad::slice(a, 0, 3, 0, 1), Error);
  CHECK_THROWS_AS(ad::reshape_rowmajor(a, 4, 2), Error);
  CHECK_THROWS_AS(ad::cross3(b, b), Error);  // columns must be exactly 3
  CHECK_THROWS_AS(tape.backward(a), Error);  // non-scalar output
}
