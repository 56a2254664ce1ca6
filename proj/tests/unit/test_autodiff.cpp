#include <functional>
#include <vector>

#include "causaltok/autodiff.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace causaltok;
using testutil::max_abs;

namespace {

using Fn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Evaluates f with plain constants.
Matrix value_of(const Fn& f, const std::vector<Matrix>& xs) {
  ad::Tape tape(false);
  std::vector<ad::Var> vs;
  for (const auto& x : xs) vs.push_back(tape.constant(x));
  return f(tape, vs).value();
}

// Checks reverse-mode gradients of <W, f(x)> and forward-mode tangents of f
// against central differences.
void check_op(const Fn& f, std::vector<Matrix> xs, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  const Matrix out0 = value_of(f, xs);
  const Matrix w = rng.normal_matrix(out0.rows(), out0.cols());
  std::vector<Matrix> tangents;
  for (const auto& x : xs) tangents.push_back(rng.normal_matrix(x.rows(), x.cols()));

  ad::Tape tape;
  std::vector<ad::Var> vs;
  for (std::size_t i = 0; i < xs.size(); ++i) vs.push_back(tape.input(xs[i], tangents[i]));
  ad::Var out = f(tape, vs);
  // <W, f> as 1^T (W .* f) 1.
  ad::Var weighted = ad::mul(out, tape.constant(w));
  ad::Var total = ad::matmul(ad::matmul(tape.constant(Matrix::Ones(1, out.rows())), weighted),
                             tape.constant(Matrix::Ones(out.cols(), 1)));
  tape.backward(total);

  const double h = 1e-6;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Matrix g = tape.grad(vs[i]);
    for (Eigen::Index j = 0; j < xs[i].size(); ++j) {
      auto p = xs, m = xs;
      p[i].data()[j] += h;
      m[i].data()[j] -= h;
      const double fd = (value_of(f, p) - value_of(f, m)).cwiseProduct(w).sum() / (2 * h);
      CHECK(std::abs(fd - g.data()[j]) <= tol * std::max(1.0, std::abs(fd)));
    }
  }

  REQUIRE(out.has_tangent());
  auto p = xs, m = xs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    p[i] += h * tangents[i];
    m[i] -= h * tangents[i];
  }
  const Matrix fd_tangent = (value_of(f, p) - value_of(f, m)) / (2 * h);
  CHECK(max_abs(fd_tangent - out.tangent()) <= tol * std::max(1.0, max_abs(fd_tangent)));
}

Matrix rnd(Rng& rng, int r, int c, double s = 1.0) { return rng.normal_matrix(r, c, s); }

}  // namespace

TEST_CASE("elementwise and linear ops") {
  Rng rng(11);
  check_op([](ad::Tape&, const auto& v) { return ad::add(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 3, 4)}, 1);
  check_op([](ad::Tape&, const auto& v) { return ad::sub(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 3, 4)}, 2);
  check_op([](ad::Tape&, const auto& v) { return ad::mul(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 3, 4)}, 3);
  check_op([](ad::Tape&, const auto& v) { return ad::scale(v[0], -1.7); }, {rnd(rng, 2, 2)}, 4);
  check_op([](ad::Tape&, const auto& v) { return ad::add_scalar(v[0], 0.3); }, {rnd(rng, 2, 2)}, 5);
  check_op([](ad::Tape&, const auto& v) { return ad::matmul(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 4, 2)}, 6);
  check_op([](ad::Tape&, const auto& v) { return ad::linear(v[0], v[1], v[2]); },
           {rnd(rng, 3, 4), rnd(rng, 4, 5), rnd(rng, 1, 5)}, 7);
  check_op([](ad::Tape&, const auto& v) { return ad::add_row(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 1, 4)}, 8);
}

TEST_CASE("nonlinearities and normalisation") {
  Rng rng(12);
  check_op([](ad::Tape&, const auto& v) { return ad::gelu(v[0]); }, {rnd(rng, 3, 5)}, 1);
  check_op([](ad::Tape&, const auto& v) { return ad::silu(v[0]); }, {rnd(rng, 3, 5)}, 2);
  check_op([](ad::Tape&, const auto& v) { return ad::tanh(v[0]); }, {rnd(rng, 3, 5)}, 3);
  check_op([](ad::Tape&, const auto& v) { return ad::layer_norm(v[0]); }, {rnd(rng, 3, 6)}, 4);
  check_op([](ad::Tape&, const auto& v) { return ad::normalize_rows(v[0]); }, {rnd(rng, 3, 4)}, 5);
  check_op([](ad::Tape&, const auto& v) { return ad::sum_squares(v[0]); }, {rnd(rng, 3, 4)}, 6);
  check_op([](ad::Tape&, const auto& v) { return ad::mean(v[0]); }, {rnd(rng, 3, 4)}, 7);
  check_op([](ad::Tape&, const auto& v) { return ad::neg_mean_cosine(v[0], v[1]); },
           {rnd(rng, 4, 3), rnd(rng, 4, 3)}, 8);
  check_op([](ad::Tape&, const auto& v) { return ad::sinusoidal(v[0], 8, 10.0); },
           {Matrix::Constant(2, 1, 0.3)}, 9, 1e-5);
}

TEST_CASE("attention with and without a mask") {
  Rng rng(13);
  auto mask = std::make_shared<const BoolMatrix>(BoolMatrix::Ones(4, 4).triangularView<Eigen::Lower>().toDenseMatrix());
  check_op([](ad::Tape&, const auto& v) { return ad::attention(v[0], v[1], v[2], 2, nullptr); },
           {rnd(rng, 4, 6), rnd(rng, 4, 6), rnd(rng, 4, 6)}, 1);
  check_op([mask](ad::Tape&, const auto& v) { return ad::attention(v[0], v[1], v[2], 3, mask); },
           {rnd(rng, 4, 6), rnd(rng, 4, 6), rnd(rng, 4, 6)}, 2);
}

TEST_CASE("modulation, gating and reshaping") {
  Rng rng(14);
  check_op([](ad::Tape&, const auto& v) { return ad::modulate(v[0], v[1], v[2]); },
           {rnd(rng, 3, 4), rnd(rng, 1, 4), rnd(rng, 1, 4)}, 1);
  check_op([](ad::Tape&, const auto& v) { return ad::modulate(v[0], v[1], v[2]); },
           {rnd(rng, 3, 4), rnd(rng, 3, 4), rnd(rng, 3, 4)}, 2);
  check_op([](ad::Tape&, const auto& v) { return ad::gate(v[0], v[1]); }, {rnd(rng, 3, 4), rnd(rng, 1, 4)}, 3);
  check_op(
      [](ad::Tape&, const auto& v) {
        const ad::Var parts[] = {v[0], v[1]};
        return ad::concat_rows(parts);
      },
      {rnd(rng, 2, 3), rnd(rng, 1, 3)}, 4);
  check_op([](ad::Tape&, const auto& v) { return ad::slice_rows(v[0], 1, 2); }, {rnd(rng, 4, 3)}, 5);
  check_op([](ad::Tape&, const auto& v) { return ad::slice_cols(v[0], 1, 2); }, {rnd(rng, 3, 4)}, 6);
  check_op([](ad::Tape&, const auto& v) { return ad::gather_rows(v[0], {2, 0, 2}); }, {rnd(rng, 3, 4)}, 7);
  auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{5, 4, 3, 2, 1, 0});
  check_op([idx](ad::Tape&, const auto& v) { return ad::gather(v[0], idx, 3, 2); }, {rnd(rng, 2, 3)}, 8);
}

TEST_CASE("parameters: gradients accumulate and have no tangent") {
  ParamStore store;
  Parameter& p = store.add("w", Matrix::Constant(2, 2, 1.5));
  ad::Tape tape;
  ad::Var a = tape.param(p);
  ad::Var b = tape.param(p);
  CHECK(a.id() == b.id());
  CHECK_FALSE(a.has_tangent());
  ad::Var loss = ad::sum_squares(ad::add(a, b));  // 4 |p|^2
  tape.backward(loss);
  REQUIRE(tape.param_grad(p) != nullptr);
  CHECK(max_abs(*tape.param_grad(p) - 8.0 * p.value) < 1e-12);
  CHECK(store.scalar_count() == 4);
}

TEST_CASE("non-recording tapes still propagate tangents") {
  ad::Tape tape(false);
  ad::Var x = tape.input(Matrix::Constant(1, 2, 2.0), Matrix::Constant(1, 2, 1.0));
  ad::Var y = ad::mul(x, x);
  CHECK(y.has_tangent());
  CHECK(max_abs(y.tangent() - Matrix::Constant(1, 2, 4.0)) < 1e-15);
}

TEST_CASE("shape mismatches throw") {
  ad::Tape tape;
  ad::Var a = tape.constant(Matrix::Zero(2, 3));
  ad::Var b = tape.constant(Matrix::Zero(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
}
