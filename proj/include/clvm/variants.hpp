#pragma once

// Priors and likelihoods for the sparse, ARD and robust model variants. The
// functions here are pure; vi_engine calls them on sampled values.

#include <vector>

#include "clvm/num_core.hpp"

namespace clvm {

// ---------------------------------------------------------------------------
// Group penalty on rows of W

/// Partition of the d rows of W into groups. `weights[g]` is p_g, the group
/// cardinality used in the penalty ρ Σ_g √p_g ‖W_g‖.
struct GroupPartition {
  std::vector<std::vector<Index>> rows;
  std::vector<double> weights;

  /// One group per row with p = cols (the number of coefficients per row).
  static GroupPartition one_per_row(Index d, Index cols);
  /// Groups from a per-row group id; p_g = rows in group × cols.
  static GroupPartition from_ids(const std::vector<int>& ids, Index cols);

  void validate(Index d) const;
};

inline constexpr double kNormSmoothing = 1e-12;

double group_penalty(const Matrix& W, double rho, const GroupPartition& groups);
/// Gradient of the penalty. Group norms are smoothed as √(‖·‖² + 1e-12).
Matrix group_penalty_gradient(const Matrix& W, double rho, const GroupPartition& groups);

// ---------------------------------------------------------------------------
// Horseshoe prior on rows of W
//
//   W_rc | ρ_r, τ ~ N(0, ρ_r² τ²)
//   ρ_r² | λ_r ~ IG(1/2, 1/λ_r),   λ_r ~ IG(1/2, 1)        (ρ_r ~ C⁺(0, 1))
//   τ²   | λ_τ ~ IG(1/2, 1/λ_τ),   λ_τ ~ IG(1/2, 1/b_g²)   (τ ~ C⁺(0, b_g))

struct HorseshoeSample {
  Vector rho2;    // d
  Vector lambda;  // d
  double tau2 = 1.0;
  double lambda_tau = 1.0;
};

/// log p(W | ρ, τ) + Σ_r log p(ρ_r², λ_r) + log p(τ², λ_τ) in the natural
/// (positive) parameterization. Throws NumericalError on a non-positive scale.
double horseshoe_log_joint(const Matrix& W, const HorseshoeSample& hs, double b_g);

/// The same joint expressed over u = log of each scale, Jacobian included:
/// horseshoe_log_joint + Σ log(scales).
double horseshoe_log_joint_logspace(const Matrix& W, const HorseshoeSample& hs, double b_g);

/// Pruning rule: row r is pruned when P(ρ_r² τ² < delta) > p0 under a
/// log-normal q with ln ρ_r² + ln τ² ~ N(mean_r, std_r²).
std::vector<bool> prune_rows(const Vector& log_scale_mean, const Vector& log_scale_std, double delta = 1e-3,
                             double p0 = 0.9);

/// Pruning probability P(exp(N(mean, std²)) < delta).
double prune_probability(double log_scale_mean, double log_scale_std, double delta);

// ---------------------------------------------------------------------------
// ARD on columns of S:  S_:j | α_j ~ N(0, α_j I),  α_j ~ IG(a0, b0)

double ard_log_prior(const Matrix& S, const Vector& alpha, double a0, double b0);

/// Number of columns whose share of Σ_j ‖S_:j‖² is at least `threshold`.
Index effective_shared_rank(const Matrix& S, double threshold = 0.01);

/// Column shares of Σ_j ‖S_:j‖², sorted descending.
Vector explained_shares(const Matrix& S);

// ---------------------------------------------------------------------------
// Robust likelihood

/// Σ_d log St(x_d | mean_d, ν, λ) with precision λ.
double student_t_loglik(const Vector& x, const Vector& mean, double nu, double lambda);

// ---------------------------------------------------------------------------
// Log-space inverse-gamma, used for log-normal variational families.

/// log IG(e^u; α, β) + u, i.e. the density of u = log x for x ~ IG(α, β).
double log_inverse_gamma_u(double u, double shape, double log_scale);

}  // namespace clvm
