#include <doctest.h>

#include <atomic>
#include <cmath>
#include <numbers>
#include <vector>

#include "clvm/errors.hpp"
#include "clvm/num_core.hpp"

using namespace clvm;

namespace {

Matrix random_spd(Index d, RngStream& rng) {
  const Matrix a = rng.normal_matrix(d, d);
  return a * a.transpose() + Matrix::Identity(d, d);
}

}  // namespace

TEST_CASE("sym_eig reconstructs and orders eigenvalues descending") {
  RngStream rng(3);
  const Matrix a = random_spd(6, rng);
  const SymEig e = sym_eig(a);
  CHECK((e.vectors * e.values.asDiagonal() * e.vectors.transpose() - a).norm() < 1e-10);
  for (Index i = 1; i < e.values.size(); ++i) CHECK(e.values(i - 1) >= e.values(i));
  CHECK((e.vectors.transpose() * e.vectors - Matrix::Identity(6, 6)).norm() < 1e-10);
}

TEST_CASE("sym_eig sign convention is deterministic") {
  RngStream rng(4);
  const Matrix a = random_spd(5, rng);
  const SymEig e1 = sym_eig(a);
  const SymEig e2 = sym_eig(a);
  CHECK((e1.vectors - e2.vectors).norm() == 0.0);
}

TEST_CASE("cholesky_jittered factors a singular PSD matrix") {
  Matrix a = Matrix::Ones(3, 3);
  double jitter = 0.0;
  const auto llt = cholesky_jittered(a, &jitter);
  CHECK(llt.info() == Eigen::Success);
  CHECK(jitter > 0.0);
  CHECK(jitter < 1e-3);
}

TEST_CASE("cholesky_jittered uses no jitter on SPD input") {
  RngStream rng(5);
  double jitter = -1.0;
  const Matrix a = random_spd(4, rng);
  const auto llt = cholesky_jittered(a, &jitter);
  CHECK(jitter == 0.0);
  CHECK(log_det(llt) == doctest::Approx(std::log(a.determinant())).epsilon(1e-10));
  CHECK((spd_inverse(a) * a - Matrix::Identity(4, 4)).norm() < 1e-10);
}

TEST_CASE("gaussian_condition matches joint minus marginal log density") {
  RngStream rng(6);
  const Index d = 5;
  GaussianSpec joint{rng.normal_vector(d), random_spd(d, rng)};
  const std::vector<Index> observed{0, 3};
  const std::vector<Index> hidden{1, 2, 4};
  const Vector x = rng.normal_vector(d);
  Vector xo(2);
  xo << x(0), x(3);
  const GaussianSpec cond = gaussian_condition(joint, observed, xo);
  Vector xh(3);
  xh << x(1), x(2), x(4);
  GaussianSpec marg{Vector(2), Matrix(2, 2)};
  for (int i = 0; i < 2; ++i) {
    marg.mean(i) = joint.mean(observed[i]);
    for (int j = 0; j < 2; ++j) marg.cov(i, j) = joint.cov(observed[i], observed[j]);
  }
  const double lhs = gauss_logpdf(x, joint) - gauss_logpdf(xo, marg);
  CHECK(gauss_logpdf(xh, cond) == doctest::Approx(lhs).epsilon(1e-10));
}

TEST_CASE("quadrature_1d integrates known functions") {
  CHECK(quadrature_1d([](double x) { return x * x; }, 0.0, 3.0) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(quadrature_1d([](double x) { return std::exp(-x); }, 0.0, 50.0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("log densities integrate to one") {
  auto mass = [](auto logpdf, double lo, double hi) {
    return quadrature_1d([&](double x) { return std::exp(logpdf(x)); }, lo, hi, 1e-10);
  };
  CHECK(mass([](double x) { return log_normal_pdf(x, 0.5, 2.0); }, -40, 40) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(mass([](double x) { return log_student_t_pdf(x, 0.0, 5.0, 2.0); }, -1e3, 1e3) ==
        doctest::Approx(1.0).epsilon(1e-6));
  // Substitute x = e^u so the heavy tails are on a bounded interval.
  auto log_mass = [](auto logpdf) {
    return quadrature_1d([&](double u) { return std::exp(logpdf(std::exp(u)) + u); }, -60.0, 60.0, 1e-10);
  };
  CHECK(log_mass([](double x) { return log_inverse_gamma_pdf(x, 2.5, 1.5); }) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(log_mass([](double x) { return log_half_cauchy_pdf(x, 0.7); }) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("normal_cdf reference values") {
  CHECK(normal_cdf(0.0) == doctest::Approx(0.5));
  CHECK(normal_cdf(1.959963984540054) == doctest::Approx(0.975).epsilon(1e-12));
}

TEST_CASE("RngStream is deterministic and splits independently") {
  RngStream a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.normal() == b.normal());
  RngStream base(42);
  const RngStream s1 = base.split(1), s1b = base.split(1), s2 = base.split(2);
  CHECK(RngStream(s1).next_u64() == RngStream(s1b).next_u64());
  CHECK(RngStream(s1).next_u64() != RngStream(s2).next_u64());
  CHECK(RngStream(base.substream("init")).next_u64() == RngStream(base.substream("init")).next_u64());
  CHECK(RngStream(base.substream("init")).next_u64() != RngStream(base.substream("mc")).next_u64());
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
}

TEST_CASE("RngStream uniform and index stay in range") {
  RngStream rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-2.0, 3.0);
    CHECK(u >= -2.0);
    CHECK(u < 3.0);
    CHECK(rng.index(7) < 7u);
  }
}

TEST_CASE("for_each_chunk covers every index once for any thread count") {
  for (int threads : {1, 2, 4}) {
    std::vector<std::atomic<int>> hits(103);
    std::atomic<bool> chunk_ok{true};
    for_each_chunk(103, 10, threads, [&](Index chunk, Index begin, Index end) {
      if (chunk != begin / 10) chunk_ok = false;
      for (Index i = begin; i < end; ++i) hits[static_cast<std::size_t>(i)]++;
    });
    CHECK(chunk_ok.load());
    for (auto& h : hits) CHECK(h.load() == 1);
  }
  CHECK(chunk_count(103, 10) == 11);
  CHECK(chunk_count(0, 10) == 0);
}
