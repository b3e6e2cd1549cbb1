#include <doctest.h>

#include <cmath>
#include <vector>

#include "clvm/clvm_em.hpp"
#include "clvm/errors.hpp"

using namespace clvm;

namespace {

ClvmParams random_params(Index d, Index k, Index t, RngStream& rng) {
  ClvmParams p;
  p.S = rng.normal_matrix(d, k);
  p.W = rng.normal_matrix(d, t);
  p.mu_x = rng.normal_vector(d);
  p.mu_y = rng.normal_vector(d);
  p.sigma2 = 0.5 + rng.uniform();
  return p;
}

// Joint Gaussian over (z, t, x) for a target row.
GaussianSpec joint_target(const ClvmParams& p) {
  const Index d = p.dim(), k = p.shared_dim(), t = p.target_dim(), q = k + t;
  Matrix L(d, q);
  L << p.S, p.W;
  GaussianSpec g{Vector::Zero(q + d), Matrix::Zero(q + d, q + d)};
  g.mean.tail(d) = p.mu_x;
  g.cov.topLeftCorner(q, q).setIdentity();
  g.cov.block(q, 0, d, q) = L;
  g.cov.block(0, q, q, d) = L.transpose();
  g.cov.bottomRightCorner(d, d) = L * L.transpose() + p.sigma2 * Matrix::Identity(d, d);
  return g;
}

double brute_loglik(const ClvmParams& p, const ContrastivePair& pair) {
  const Index d = p.dim();
  const GaussianSpec gx{p.mu_x, p.S * p.S.transpose() + p.W * p.W.transpose() + p.sigma2 * Matrix::Identity(d, d)};
  const GaussianSpec gy{p.mu_y, p.S * p.S.transpose() + p.sigma2 * Matrix::Identity(d, d)};
  double total = 0.0;
  for (Index r = 0; r < pair.n(); ++r) total += gauss_logpdf(pair.target.row(r).transpose(), gx);
  for (Index r = 0; r < pair.m(); ++r) total += gauss_logpdf(pair.background.row(r).transpose(), gy);
  return total;
}

}  // namespace

TEST_CASE("posterior moments equal Gaussian conditioning of the joint") {
  RngStream rng(11);
  const ClvmParams p = random_params(6, 2, 3, rng);
  const Vector x = rng.normal_vector(6);
  const PosteriorMoments pm = posterior_moments(p, x, true);
  std::vector<Index> observed;
  for (Index i = 5; i < 11; ++i) observed.push_back(i);
  const GaussianSpec cond = gaussian_condition(joint_target(p), observed, x);
  CHECK((pm.mean_z - cond.mean.head(2)).norm() < 1e-10);
  CHECK((pm.mean_t - cond.mean.tail(3)).norm() < 1e-10);
  const Matrix second = cond.cov + cond.mean * cond.mean.transpose();
  CHECK((pm.zz - second.topLeftCorner(2, 2)).norm() < 1e-10);
  CHECK((pm.tt - second.bottomRightCorner(3, 3)).norm() < 1e-10);
  CHECK((pm.zt - second.topRightCorner(2, 3)).norm() < 1e-10);
  const PosteriorMoments bg = posterior_moments(p, x, false);
  CHECK(bg.mean_t.size() == 0);
}

TEST_CASE("log_likelihood matches the marginal Gaussian densities") {
  RngStream rng(12);
  const ClvmParams p = random_params(5, 2, 1, rng);
  const ContrastivePair pair = ContrastivePair::from_complete(rng.normal_matrix(20, 5), rng.normal_matrix(15, 5));
  CHECK(log_likelihood(p, pair) == doctest::Approx(brute_loglik(p, pair)).epsilon(1e-10));
}

TEST_CASE("EM never decreases the log-likelihood") {
  const ContrastivePair pair = generate_synthetic_subgroups(20, 80, 5);
  EmOptions opts;
  opts.max_iter = 60;
  opts.rel_tol = 0.0;
  opts.seed = 2;
  const FittedModel fit = fit_em(pair, 2, 2, opts);
  REQUIRE(fit.trace.size() >= 2);
  for (std::size_t i = 1; i < fit.trace.size(); ++i) {
    CHECK(fit.trace[i].objective - fit.trace[i - 1].objective >= -1e-8 * std::abs(fit.trace[i].objective));
  }
  CHECK(fit.params.sigma2 >= kSigma2Floor);
  CHECK(fit.target_t.rows() == pair.n());
  CHECK(fit.background_z.rows() == pair.m());
}

TEST_CASE("single EM step from the same stats is deterministic") {
  RngStream rng(13);
  const ContrastivePair pair = ContrastivePair::from_complete(rng.normal_matrix(30, 4), rng.normal_matrix(30, 4));
  const ClvmParams p0 = initial_params(pair, 1, 1, 0);
  const ClvmParams a = m_step(e_step(p0, pair), pair, p0);
  const ClvmParams b = m_step(e_step(p0, pair), pair, p0);
  CHECK((a.S - b.S).norm() == 0.0);
  CHECK(log_likelihood(a, pair) >= log_likelihood(p0, pair) - 1e-9);
}

TEST_CASE("fit_em refuses data with missing cells") {
  ContrastivePair pair = generate_synthetic_subgroups(5, 10, 1);
  pair.target_mask(0, 0) = false;
  CHECK_THROWS_AS(fit_em(pair, 2, 2), DataError);
}

TEST_CASE("masked transform equals conditioning on the observed coordinates") {
  RngStream rng(14);
  const ClvmParams p = random_params(5, 2, 2, rng);
  Matrix rows = rng.normal_matrix(1, 5);
  Mask mask = Mask::Constant(1, 5, true);
  mask(0, 1) = false;
  mask(0, 4) = false;
  const Latents lat = transform(p, rows, mask, true);
  const std::vector<Index> observed{4 + 0, 4 + 2, 4 + 3};
  Vector xo(3);
  xo << rows(0, 0), rows(0, 2), rows(0, 3);
  const GaussianSpec cond = gaussian_condition(joint_target(p), observed, xo);
  CHECK((lat.z.row(0).transpose() - cond.mean.head(2)).norm() < 1e-10);
  CHECK((lat.t.row(0).transpose() - cond.mean.segment(2, 2)).norm() < 1e-10);
  const Latents full = transform(p, rows, true);
  const Latents full_masked = transform(p, rows, Mask::Constant(1, 5, true), true);
  CHECK((full.z - full_masked.z).norm() < 1e-10);
}
