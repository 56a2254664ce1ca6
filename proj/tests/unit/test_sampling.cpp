#include "causaltok/sampling.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace causaltok;
using testutil::max_abs;

namespace {

/// u = eps for every query: the returned value is the stored noise.
class NoiseField final : public VelocityModel {
 public:
  explicit NoiseField(Matrix eps) : eps_(std::move(eps)) {}
  DecoderVars forward(ad::Tape& tape, ad::Var, ad::Var, ad::Var, const TokenCondition&) const override {
    return {tape.constant(eps_), {}};
  }

 private:
  Matrix eps_;
};

/// Records the last (r, t) and token indices it was queried with.
class RecordingField final : public VelocityModel {
 public:
  mutable double r = -1, t = -1;
  mutable std::vector<int> indices;
  DecoderVars forward(ad::Tape&, ad::Var z, ad::Var rv, ad::Var tv, const TokenCondition& c) const override {
    r = rv.scalar();
    t = tv.scalar();
    indices = c.indices;
    return {ad::scale(z, 0.0), {}};
  }
};

}  // namespace

TEST_CASE("one_step algebra") {
  Rng rng(1);
  const Matrix x = testutil::random_image(rng, {3, 8, 8});
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));

  CHECK(max_abs(one_step(NoiseField(eps), tokens, eps)) == 0.0);
  const Matrix out = one_step(testutil::PerfectVelocity(x, eps), tokens, eps);
  CHECK(out.rows() == eps.rows());
  CHECK(out.cols() == eps.cols());
  CHECK(max_abs(out - x) < 1e-15);

  RecordingField rec;
  QueryCounter q;
  one_step(rec, tokens, eps, &q);
  CHECK(rec.r == 0.0);
  CHECK(rec.t == 1.0);
  CHECK(rec.indices == std::vector<int>{0, 1, 2, 3});
  CHECK(q.cond == 1);
  CHECK(q.uncond == 0);
}

TEST_CASE("multi_step integrates the straight path for every step count") {
  Rng rng(2);
  const Matrix x = testutil::random_image(rng, {3, 8, 8});
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));
  const testutil::PerfectVelocity perfect(x, eps);
  for (int n : {1, 2, 3, 7, 25, 100}) {
    CHECK(max_abs(multi_step(perfect, tokens, eps, n, 1.0) - x) < 1e-12);
    CHECK(max_abs(multi_step(perfect, tokens, eps, n, 2.0) - x) < 1e-12);
  }
  CHECK_THROWS_AS(multi_step(perfect, tokens, eps, 0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(multi_step(perfect, tokens, eps, 5, -1.0), std::invalid_argument);
}

TEST_CASE("guidance query counts") {
  Rng rng(3);
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));
  testutil::CountingField field;
  QueryCounter q;
  multi_step(field, tokens, eps, 25, 1.0, &q);
  CHECK(field.null_calls == 0);
  CHECK(field.cond_calls == 25);
  CHECK(q.uncond == 0);
  multi_step(field, tokens, eps, 25, 2.0, &q);
  CHECK(field.null_calls == 25);
  CHECK(q.uncond == 25);
  CHECK(q.cond == 50);
}

TEST_CASE("multi_step queries the instantaneous mode on a uniform grid") {
  Rng rng(4);
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));
  RecordingField rec;
  multi_step(rec, tokens, eps, 4, 1.0);
  CHECK(rec.r == rec.t);
  CHECK(rec.t == doctest::Approx(0.25));
  CHECK(rec.indices.size() == 4);
}

TEST_CASE("cfg_combine") {
  const Matrix c = Matrix::Constant(2, 2, 1.0);
  const Matrix u = Matrix::Zero(2, 2);
  CHECK(cfg_combine(c, u, 1.0) == c);
  CHECK(cfg_combine(c, u, 0.0) == u);
  CHECK(max_abs(cfg_combine(c, u, 2.0) - Matrix::Constant(2, 2, 2.0)) == 0.0);
  Rng rng(5);
  const Matrix a = rng.normal_matrix(2, 2), b = rng.normal_matrix(2, 2), d = rng.normal_matrix(2, 2);
  // Affine in each argument: midpoints map to midpoints.
  CHECK(max_abs(cfg_combine(0.5 * (a + b), d, 1.7) -
                0.5 * (cfg_combine(a, d, 1.7) + cfg_combine(b, d, 1.7))) < 1e-14);
  CHECK(max_abs(cfg_combine(d, 0.5 * (a + b), 1.7) -
                0.5 * (cfg_combine(d, a, 1.7) + cfg_combine(d, b, 1.7))) < 1e-14);
  CHECK_THROWS_AS(cfg_combine(c, Matrix::Zero(2, 3), 1.0), std::invalid_argument);
}

TEST_CASE("subpath reconstruction") {
  Rng rng(6);
  const Matrix x = testutil::random_image(rng, {3, 8, 8});
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));
  const testutil::PerfectVelocity perfect(x, eps);

  for (const auto& [r, t] : std::vector<std::pair<double, double>>{{0.0, 1.0}, {0.25, 0.5}, {0.1, 0.9}}) {
    const Matrix out = subpath_reconstruct(perfect, x, TimePair::make(r, t), tokens, eps);
    CHECK(max_abs(out - interpolate(x, eps, r)) < 1e-12);
  }

  Decoder dec(testutil::tiny_decoder(), rng);
  testutil::randomize(dec.params(), rng, 0.1);
  CHECK(max_abs(subpath_reconstruct(dec, x, TimePair::make(0.0, 1.0), tokens, eps) -
                one_step(dec, tokens, eps)) < 1e-12);
  CHECK(max_abs(prefix_reconstruct(dec, x, 4, tokens, eps) - one_step(dec, tokens, eps)) < 1e-12);

  RecordingField rec;
  prefix_reconstruct(rec, x, 2, tokens, eps);
  CHECK(rec.indices == std::vector<int>{0, 1});
  CHECK(rec.t == doctest::Approx(0.5));
  segment_reconstruct(rec, x, 1, 3, tokens, eps);
  CHECK(rec.indices == std::vector<int>{1, 2});
  CHECK(rec.r == doctest::Approx(0.25));
  prefix_reconstruct(rec, x, 4, tokens, eps);
  CHECK(rec.indices.size() == 4);

  CHECK_THROWS_AS(subpath_reconstruct(perfect, x, TimePair::make(0.5, 0.5), tokens, eps), std::domain_error);
  CHECK_THROWS(prefix_reconstruct(perfect, x, 0, tokens, eps));
  CHECK_THROWS(prefix_reconstruct(perfect, x, 5, tokens, eps));
  CHECK_THROWS(segment_reconstruct(perfect, x, 2, 2, tokens, eps));
}

TEST_CASE("samplers are deterministic") {
  Rng rng(7);
  Decoder dec(testutil::tiny_decoder(), rng);
  testutil::randomize(dec.params(), rng, 0.1);
  const Matrix eps = rng.normal_matrix(3, 64);
  const Matrix tokens = normalize_tokens(rng.normal_matrix(4, 4));
  CHECK(one_step(dec, tokens, eps) == one_step(dec, tokens, eps));
  CHECK(multi_step(dec, tokens, eps, 5, 2.0) == multi_step(dec, tokens, eps, 5, 2.0));
}
