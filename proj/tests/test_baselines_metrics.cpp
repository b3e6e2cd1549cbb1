#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "clvm/baselines.hpp"
#include "clvm/errors.hpp"
#include "clvm/metrics.hpp"

using namespace clvm;

TEST_CASE("PPCA likelihood is maximal at the fitted parameters") {
  RngStream rng(1);
  const Matrix data = rng.normal_matrix(200, 2) * rng.normal_matrix(2, 5) + 0.3 * rng.normal_matrix(200, 5);
  const PpcaResult fit = fit_ppca(data, 2);
  const double ll = ppca_log_likelihood(data, fit.loading, fit.mean, fit.sigma2);
  CHECK(ll == doctest::Approx(fit.log_likelihood).epsilon(1e-10));
  CHECK(ppca_log_likelihood(data, fit.loading * 1.05, fit.mean, fit.sigma2) < ll);
  CHECK(ppca_log_likelihood(data, fit.loading, fit.mean, fit.sigma2 * 1.05) < ll);
}

TEST_CASE("PCA components are orthonormal and variances descending") {
  RngStream rng(2);
  Matrix data = rng.normal_matrix(100, 4);
  data.col(0) *= 5.0;
  const PcaResult p = fit_pca(data, 3);
  CHECK((p.components.transpose() * p.components - Matrix::Identity(3, 3)).norm() < 1e-10);
  CHECK(p.variances(0) >= p.variances(1));
  CHECK(std::abs(p.components(0, 0)) > 0.99);
  CHECK(p.latents.rows() == 100);
}

TEST_CASE("cPCA with alpha zero spans the target PCA subspace") {
  RngStream rng(3);
  Matrix t = rng.normal_matrix(80, 5);
  t.col(1) *= 4.0;
  t.col(3) *= 2.0;
  const ContrastivePair pair = ContrastivePair::from_complete(t, rng.normal_matrix(80, 5));
  const CpcaResult c = fit_cpca(pair, 0.0, 2);
  const PcaResult p = fit_pca(t, 2);
  // Angles come from acos of cosines near one, so resolution is about 1e-8.
  CHECK(max_principal_angle(c.projection, p.components) < 1e-6);
  CHECK(c.eigenvalues(0) == doctest::Approx(p.variances(0)).epsilon(1e-8));
}

TEST_CASE("sample covariance and principal angles") {
  Matrix x(3, 2);
  x << 1, 2, 3, 4, 5, 9;
  const Matrix c = sample_covariance(x);
  CHECK(c(0, 0) == doctest::Approx(8.0 / 3.0));
  CHECK(c(0, 1) == doctest::Approx(14.0 / 3.0));
  Matrix a = Matrix::Zero(3, 1), b = Matrix::Zero(3, 1);
  a(0, 0) = 1;
  b(0, 0) = std::sqrt(0.5);
  b(1, 0) = std::sqrt(0.5);
  CHECK(max_principal_angle(a, b) == doctest::Approx(std::numbers::pi / 4));
}

TEST_CASE("adjusted Rand index on known partitions") {
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 2}) == doctest::Approx(0.5714285714285715).epsilon(1e-14));
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {5, 5, 7, 7}) == doctest::Approx(1.0));
  RngStream rng(4);
  std::vector<int> a(1000), b(1000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<int>(rng.index(4));
    b[i] = static_cast<int>(rng.index(4));
  }
  CHECK(std::abs(adjusted_rand_index(a, b)) < 0.02);
}

TEST_CASE("silhouette of well separated clusters is near one") {
  RngStream rng(5);
  Matrix pts = 0.1 * rng.normal_matrix(40, 2);
  std::vector<int> labels(40);
  for (Index i = 0; i < 40; ++i) {
    labels[static_cast<std::size_t>(i)] = i < 20 ? 0 : 1;
    if (i >= 20) pts(i, 0) += 10.0;
  }
  CHECK(silhouette_score(pts, labels) > 0.95);
  std::vector<int> shuffled = labels;
  rng.shuffle(shuffled);
  CHECK(silhouette_score(pts, shuffled) < 0.2);
}

TEST_CASE("Procrustes distance ignores rotation, scale and shift") {
  RngStream rng(6);
  const Matrix a = rng.normal_matrix(30, 2);
  const double th = 0.7;
  Matrix r(2, 2);
  r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  Matrix b = 3.0 * a * r;
  b.rowwise() += Eigen::RowVector2d(4.0, -1.0);
  CHECK(procrustes_distance(a, b) < 1e-12);
  CHECK(procrustes_distance(a, rng.normal_matrix(30, 2)) > 0.5);
}

TEST_CASE("k-means recovers separated clusters") {
  RngStream rng(7);
  Matrix pts = 0.2 * rng.normal_matrix(60, 2);
  std::vector<int> truth(60);
  for (Index i = 0; i < 60; ++i) {
    const int c = static_cast<int>(i % 3);
    truth[static_cast<std::size_t>(i)] = c;
    pts(i, 0) += 5.0 * c;
  }
  const KMeansResult km = kmeans(pts, 3, 1);
  CHECK(adjusted_rand_index(km.labels, truth) == doctest::Approx(1.0));
  CHECK(km.centers.rows() == 3);
  CHECK(kmeans_ari(pts, truth, 1) == doctest::Approx(1.0));
}
