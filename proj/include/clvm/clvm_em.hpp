#pragma once

// Gaussian contrastive latent variable model fit by expectation-maximization.
//
// The E-step uses the exact joint posterior of (t_i, z_i) given x_i,
//   cov  = sigma2 (AᵀA + sigma2 I)⁻¹,   mean = (AᵀA + sigma2 I)⁻¹ Aᵀ (x_i - mu_x),
// with A = [W S]; background rows use A = S. No orthogonality between S and W
// is assumed. The M-step maximizes the expected complete-data log-likelihood
// jointly over (W, S, mu_x, mu_y) and then sigma2.

#include <cstdint>
#include <optional>

#include "clvm/data_model.hpp"
#include "clvm/params.hpp"

namespace clvm {

struct PosteriorMoments {
  Vector mean_z;  // k
  Vector mean_t;  // t (empty for background rows)
  Matrix zz;      // E[z zᵀ]
  Matrix tt;      // E[t tᵀ]
  Matrix zt;      // E[z tᵀ], k × t
};

PosteriorMoments posterior_moments(const ClvmParams& params, const Vector& row, bool is_target);

/// Sums over rows of the regression features phi = [t; z; 1_target; 1_background]:
///   gram  = Σ E[phi phiᵀ]        (p × p, p = t + k + 2)
///   cross = Σ obs · E[phi]ᵀ       (d × p)
///   sum_sq = Σ ‖obs‖²
struct SufficientStats {
  Index n = 0;
  Index m = 0;
  Index d = 0;
  Index k = 0;
  Index t = 0;
  Matrix gram;
  Matrix cross;
  double sum_sq = 0.0;
};

SufficientStats e_step(const ClvmParams& params, const ContrastivePair& pair);
ClvmParams m_step(const SufficientStats& stats, const ContrastivePair& pair, const ClvmParams& current);

double log_likelihood(const ClvmParams& params, const ContrastivePair& pair);

struct EmOptions {
  int max_iter = 500;
  double rel_tol = 1e-7;
  std::uint64_t seed = 0;
  std::optional<ClvmParams> init;
};

/// Eigen-initialized starting point: S from the top-k eigenpairs of the pooled
/// within-set covariance, W ~ N(0, 0.01) from the seed, sigma2 the mean of
/// the discarded eigenvalues, means at the per-set sample means. Missing cells
/// are skipped in the means and mean-imputed for the covariance.
///
/// With `contrastive` set, S comes from the background covariance alone and W
/// from the leading eigenpairs of Cov(target) − Cov(background) plus the same
/// seeded noise. Gradient-based fits start here: from the pooled start they
/// tend to stall with the target structure held in S.
ClvmParams initial_params(const ContrastivePair& pair, Index k, Index t, std::uint64_t seed,
                          bool contrastive = false);

FittedModel fit_em(const ContrastivePair& pair, Index k, Index t, const EmOptions& opts = {});

struct Latents {
  Matrix t;  // rows × t (empty for background rows)
  Matrix z;  // rows × k
};

/// Posterior means per row.
Latents transform(const ClvmParams& params, const Matrix& rows, bool is_target);
/// As above; masked-out cells are marginalized rather than imputed.
Latents transform(const ClvmParams& params, const Matrix& rows, const Mask& mask, bool is_target);

}  // namespace clvm
