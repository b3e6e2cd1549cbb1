#include <doctest.h>

#include <cmath>
#include <vector>

#include "clvm/errors.hpp"
#include "clvm/variants.hpp"

using namespace clvm;

TEST_CASE("group penalty value on a hand-computed example") {
  Matrix W(3, 2);
  W << 3, 4, 0, 0, 1, 0;
  // Rows {0, 2} form one group, row 1 another.
  const GroupPartition g = GroupPartition::from_ids({7, 9, 7}, 2);
  CHECK(g.rows.size() == 2u);
  CHECK(group_penalty(W, 2.0, g) == doctest::Approx(2.0 * std::sqrt(4.0) * std::sqrt(26.0)));
  const GroupPartition per_row = GroupPartition::one_per_row(3, 2);
  CHECK(group_penalty(W, 1.0, per_row) == doctest::Approx(std::sqrt(2.0) * (5.0 + 1.0)));
  CHECK_THROWS_AS(group_penalty(W, -1.0, per_row), ConfigError);
}

TEST_CASE("group penalty gradient matches finite differences") {
  RngStream rng(2);
  const Matrix W = rng.normal_matrix(5, 3);
  const GroupPartition g = GroupPartition::from_ids({0, 1, 0, 2, 1}, 3);
  const Matrix grad = group_penalty_gradient(W, 1.7, g);
  const double h = 1e-6;
  for (Index i = 0; i < W.size(); ++i) {
    Matrix up = W, dn = W;
    up.data()[i] += h;
    dn.data()[i] -= h;
    const double fd = (group_penalty(up, 1.7, g) - group_penalty(dn, 1.7, g)) / (2 * h);
    CHECK(grad.data()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("group partition validation") {
  GroupPartition g = GroupPartition::one_per_row(3, 1);
  CHECK_NOTHROW(g.validate(3));
  CHECK_THROWS_AS(g.validate(4), ConfigError);
  g.rows[0].push_back(1);
  CHECK_THROWS_AS(g.validate(3), ConfigError);
}

TEST_CASE("log-space horseshoe density carries the log Jacobian") {
  const Matrix W = Matrix::Constant(1, 2, 0.3);
  HorseshoeSample hs{Vector::Constant(1, 0.8), Vector::Constant(1, 1.3), 0.6, 0.9};
  auto direct = [&](double rho2) {
    HorseshoeSample s = hs;
    s.rho2(0) = rho2;
    return std::exp(horseshoe_log_joint(W, s, 1.0));
  };
  auto in_logs = [&](double u) {
    HorseshoeSample s = hs;
    s.rho2(0) = std::exp(u);
    // Remove the Jacobian terms of the scales held fixed.
    return std::exp(horseshoe_log_joint_logspace(W, s, 1.0) - std::log(1.3) - std::log(0.6) - std::log(0.9));
  };
  const double a = quadrature_1d([&](double u) { return direct(std::exp(u)) * std::exp(u); }, -60, 60);
  const double b = quadrature_1d(in_logs, -60, 60);
  CHECK(b == doctest::Approx(a).epsilon(1e-10));
  CHECK(horseshoe_log_joint_logspace(W, hs, 1.0) - horseshoe_log_joint(W, hs, 1.0) ==
        doctest::Approx(std::log(0.8) + std::log(1.3) + std::log(0.6) + std::log(0.9)));
}

TEST_CASE("prune probability is the normal CDF at log delta") {
  CHECK(prune_probability(std::log(1e-3), 1.0, 1e-3) == doctest::Approx(0.5));
  CHECK(prune_probability(-10.0, 2.0, 1e-3) == doctest::Approx(normal_cdf((std::log(1e-3) + 10.0) / 2.0)));
  Vector m(3), s(3);
  m << -20.0, 0.0, std::log(1e-3);
  s << 1.0, 1.0, 1.0;
  const std::vector<bool> pruned = prune_rows(m, s, 1e-3, 0.9);
  CHECK(pruned == std::vector<bool>{true, false, false});
  CHECK_THROWS_AS(prune_rows(m, s, 1e-3, 1.0), ConfigError);
}

TEST_CASE("ARD prior sums Gaussian columns and inverse-gamma variances") {
  RngStream rng(4);
  const Matrix S = rng.normal_matrix(4, 2);
  Vector alpha(2);
  alpha << 0.5, 2.0;
  double expected = 0.0;
  for (Index j = 0; j < 2; ++j) {
    for (Index i = 0; i < 4; ++i) expected += log_normal_pdf(S(i, j), 0.0, alpha(j));
    expected += log_inverse_gamma_pdf(alpha(j), 1.5, 0.5);
  }
  CHECK(ard_log_prior(S, alpha, 1.5, 0.5) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("explained shares and effective rank") {
  Matrix S = Matrix::Zero(3, 3);
  S(0, 0) = 3.0;
  S(1, 1) = 4.0;
  S(2, 2) = 0.01;
  const Vector shares = explained_shares(S);
  CHECK(shares.sum() == doctest::Approx(1.0));
  CHECK(shares(0) == doctest::Approx(16.0 / 25.0001));
  CHECK(effective_shared_rank(S) == 2);
  CHECK(effective_shared_rank(Matrix::Zero(3, 2)) == 0);
}

TEST_CASE("Student-t log-likelihood sums per-coordinate densities") {
  Vector x(2), mu(2);
  x << 1.0, -0.5;
  mu << 0.0, 0.5;
  CHECK(student_t_loglik(x, mu, 4.0, 2.0) ==
        doctest::Approx(log_student_t_pdf(1.0, 0.0, 4.0, 2.0) + log_student_t_pdf(-0.5, 0.5, 4.0, 2.0)));
  CHECK_THROWS_AS(student_t_loglik(x, mu, 0.0, 1.0), ConfigError);
}

TEST_CASE("inverse-gamma density in log coordinates integrates to one") {
  const double mass = quadrature_1d([](double u) { return std::exp(log_inverse_gamma_u(u, 2.0, std::log(3.0))); },
                                    -60.0, 60.0);
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
}
