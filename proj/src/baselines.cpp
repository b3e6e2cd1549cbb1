#include "clvm/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "clvm/errors.hpp"

namespace clvm {

namespace {

Matrix complete_values(const Matrix& values, const Mask& mask) {
  return mask.all() ? values : mean_impute(values, mask);
}

}  // namespace

Matrix sample_covariance(const Matrix& data) {
  if (data.rows() < 1) throw DataError("sample_covariance: no rows");
  const Matrix centered = data.rowwise() - data.colwise().mean();
  return symmetrize(centered.transpose() * centered / static_cast<double>(data.rows()));
}

double ppca_log_likelihood(const Matrix& data, const Matrix& loading, const Vector& mean, double sigma2) {
  const Index d = data.cols();
  Matrix cov = loading * loading.transpose();
  cov.diagonal().array() += sigma2;
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("ppca_log_likelihood: covariance is not positive definite");
  const Matrix centered = (data.rowwise() - mean.transpose()).transpose();
  const double quad = llt.matrixL().solve(centered).squaredNorm();
  return -0.5 * (static_cast<double>(data.rows()) * (static_cast<double>(d) * kLog2Pi + log_det(llt)) + quad);
}

PpcaResult fit_ppca(const Matrix& data, Index q) {
  const Index d = data.cols();
  if (q < 0 || q >= d) throw ConfigError("fit_ppca: need 0 <= q < d");
  if (data.rows() <= q) throw DataError("fit_ppca: need more rows than latent dimensions");
  const SymEig eig = sym_eig(sample_covariance(data));
  PpcaResult out;
  out.mean = data.colwise().mean().transpose();
  out.sigma2 = eig.values.tail(d - q).mean();
  if (!(out.sigma2 > 1e-12 * std::max(1.0, eig.values(0)))) {
    throw NumericalError("fit_ppca: degenerate covariance (trailing eigenvalues vanish)");
  }
  out.loading = Matrix::Zero(d, q);
  for (Index j = 0; j < q; ++j) {
    out.loading.col(j) = eig.vectors.col(j) * std::sqrt(std::max(eig.values(j) - out.sigma2, 0.0));
  }
  out.log_likelihood = ppca_log_likelihood(data, out.loading, out.mean, out.sigma2);
  return out;
}

PcaResult fit_pca(const Matrix& data, Index q) {
  const Index d = data.cols();
  if (q < 1 || q > d) throw ConfigError("fit_pca: need 1 <= q <= d");
  const SymEig eig = sym_eig(sample_covariance(data));
  PcaResult out;
  out.mean = data.colwise().mean().transpose();
  out.components = eig.vectors.leftCols(q);
  out.variances = eig.values.head(q);
  out.latents = (data.rowwise() - out.mean.transpose()) * out.components;
  return out;
}

CpcaResult fit_cpca(const ContrastivePair& pair, double alpha, Index q) {
  pair.validate();
  if (!(alpha >= 0.0)) throw ConfigError("fit_cpca: alpha must be non-negative");
  if (q < 1 || q > pair.dim()) throw ConfigError("fit_cpca: need 1 <= q <= d");
  const Matrix x = complete_values(pair.target, pair.target_mask);
  const Matrix y = complete_values(pair.background, pair.background_mask);
  const Matrix c = sample_covariance(x) - alpha * sample_covariance(y);
  const SymEig eig = sym_eig(symmetrize(c));

  CpcaResult out;
  out.alpha = alpha;
  out.projection = eig.vectors.leftCols(q);
  out.eigenvalues = eig.values.head(q);
  out.target_latents = (x.rowwise() - x.colwise().mean()) * out.projection;
  out.background_latents = (y.rowwise() - y.colwise().mean()) * out.projection;
  return out;
}

Matrix cpca_nullspace_limit(const ContrastivePair& pair, Index q) {
  pair.validate();
  const Index d = pair.dim();
  const Matrix x = complete_values(pair.target, pair.target_mask);
  const Matrix y = complete_values(pair.background, pair.background_mask);
  const SymEig beig = sym_eig(sample_covariance(y));
  const double tol = 1e-10 * std::max(beig.values(0), 1e-300);
  Index rank = 0;
  while (rank < d && beig.values(rank) > tol) ++rank;
  if (rank == d) throw DataError("cpca_nullspace_limit: background covariance has full rank");
  const Index null_dim = d - rank;
  if (q < 1 || q > null_dim) throw ConfigError("cpca_nullspace_limit: q exceeds the background null-space dimension");

  const Matrix basis = beig.vectors.rightCols(null_dim);  // d × null_dim
  const Matrix reduced = basis.transpose() * sample_covariance(x) * basis;
  const SymEig eig = sym_eig(symmetrize(reduced));
  return basis * eig.vectors.leftCols(q);
}

double max_principal_angle(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ConfigError("max_principal_angle: row mismatch");
  Eigen::JacobiSVD<Matrix> svd(a.transpose() * b);
  const Vector s = svd.singularValues();
  if (s.size() == 0) return 0.0;
  const double smallest = std::clamp(s.minCoeff(), -1.0, 1.0);
  return std::acos(smallest);
}

}  // namespace clvm
