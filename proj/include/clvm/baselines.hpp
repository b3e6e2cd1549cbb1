#pragma once

// Reference methods: PCA, probabilistic PCA (closed form) and contrastive PCA.

#include "clvm/data_model.hpp"

namespace clvm {

struct PpcaResult {
  Matrix loading;  // d × q
  Vector mean;
  double sigma2 = 0.0;
  double log_likelihood = 0.0;
};

/// Maximum-likelihood PPCA: loading U_q (Λ_q − sigma2 I)^{1/2}, sigma2 the
/// mean of the trailing eigenvalues of the ML covariance.
PpcaResult fit_ppca(const Matrix& data, Index q);
double ppca_log_likelihood(const Matrix& data, const Matrix& loading, const Vector& mean, double sigma2);

struct PcaResult {
  Matrix components;  // d × q, orthonormal columns
  Vector variances;   // q
  Vector mean;
  Matrix latents;     // rows × q
};

PcaResult fit_pca(const Matrix& data, Index q);

struct CpcaResult {
  double alpha = 0.0;
  Matrix projection;  // d × q, orthonormal
  Vector eigenvalues;  // q leading algebraic eigenvalues of the contrastive covariance
  Matrix target_latents;
  Matrix background_latents;
};

/// Eigenvectors of C = Cov(target) − alpha Cov(background), each set centered
/// by its own mean.
CpcaResult fit_cpca(const ContrastivePair& pair, double alpha, Index q);

/// Projects the target onto the null space of the background covariance and
/// runs PCA there. Throws DataError when the background covariance has full
/// rank.
Matrix cpca_nullspace_limit(const ContrastivePair& pair, Index q);

/// ML covariance (divided by the row count) around the column means.
Matrix sample_covariance(const Matrix& data);

/// Largest principal angle (radians) between the column spans of two
/// matrices with orthonormal columns.
double max_principal_angle(const Matrix& a, const Matrix& b);

}  // namespace clvm
