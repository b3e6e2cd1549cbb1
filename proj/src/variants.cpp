#include "clvm/variants.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "clvm/errors.hpp"

namespace clvm {

GroupPartition GroupPartition::one_per_row(Index d, Index cols) {
  GroupPartition g;
  for (Index r = 0; r < d; ++r) {
    g.rows.push_back({r});
    g.weights.push_back(static_cast<double>(cols));
  }
  return g;
}

GroupPartition GroupPartition::from_ids(const std::vector<int>& ids, Index cols) {
  std::map<int, std::vector<Index>> by_id;
  for (std::size_t r = 0; r < ids.size(); ++r) by_id[ids[r]].push_back(static_cast<Index>(r));
  GroupPartition g;
  for (auto& [id, members] : by_id) {
    g.weights.push_back(static_cast<double>(members.size()) * static_cast<double>(cols));
    g.rows.push_back(std::move(members));
  }
  return g;
}

void GroupPartition::validate(Index d) const {
  if (rows.size() != weights.size()) throw ConfigError("groups: one weight per group required");
  std::vector<int> seen(static_cast<std::size_t>(d), 0);
  for (std::size_t g = 0; g < rows.size(); ++g) {
    if (!(weights[g] > 0.0)) throw ConfigError("groups: weights must be positive");
    for (Index r : rows[g]) {
      if (r < 0 || r >= d) throw ConfigError("groups: row index out of range");
      ++seen[static_cast<std::size_t>(r)];
    }
  }
  for (int s : seen) {
    if (s != 1) throw ConfigError("groups: every row of W must belong to exactly one group");
  }
}

namespace {

double group_sq_norm(const Matrix& W, const std::vector<Index>& rows) {
  double s = 0.0;
  for (Index r : rows) s += W.row(r).squaredNorm();
  return s;
}

}  // namespace

double group_penalty(const Matrix& W, double rho, const GroupPartition& groups) {
  if (rho < 0.0) throw ConfigError("group_penalty: rho must be non-negative");
  double total = 0.0;
  for (std::size_t g = 0; g < groups.rows.size(); ++g) {
    total += std::sqrt(groups.weights[g]) * std::sqrt(group_sq_norm(W, groups.rows[g]));
  }
  return rho * total;
}

Matrix group_penalty_gradient(const Matrix& W, double rho, const GroupPartition& groups) {
  Matrix grad = Matrix::Zero(W.rows(), W.cols());
  for (std::size_t g = 0; g < groups.rows.size(); ++g) {
    const double norm = std::sqrt(group_sq_norm(W, groups.rows[g]) + kNormSmoothing);
    const double c = rho * std::sqrt(groups.weights[g]) / norm;
    for (Index r : groups.rows[g]) grad.row(r) = c * W.row(r);
  }
  return grad;
}

double log_inverse_gamma_u(double u, double shape, double log_scale) {
  return shape * log_scale - std::lgamma(shape) - shape * u - std::exp(log_scale - u);
}

double horseshoe_log_joint(const Matrix& W, const HorseshoeSample& hs, double b_g) {
  const Index d = W.rows();
  if (hs.rho2.size() != d || hs.lambda.size() != d) throw ConfigError("horseshoe_log_joint: scale count mismatch");
  if (!(b_g > 0.0)) throw ConfigError("horseshoe_log_joint: b_g must be positive");
  if (!(hs.tau2 > 0.0) || !(hs.lambda_tau > 0.0) || !(hs.rho2.array() > 0.0).all() ||
      !(hs.lambda.array() > 0.0).all()) {
    throw NumericalError("horseshoe_log_joint: non-positive scale");
  }
  double lp = 0.0;
  for (Index r = 0; r < d; ++r) {
    const double var = hs.rho2(r) * hs.tau2;
    for (Index c = 0; c < W.cols(); ++c) lp += log_normal_pdf(W(r, c), 0.0, var);
    lp += log_inverse_gamma_pdf(hs.rho2(r), 0.5, 1.0 / hs.lambda(r));
    lp += log_inverse_gamma_pdf(hs.lambda(r), 0.5, 1.0);
  }
  lp += log_inverse_gamma_pdf(hs.tau2, 0.5, 1.0 / hs.lambda_tau);
  lp += log_inverse_gamma_pdf(hs.lambda_tau, 0.5, 1.0 / (b_g * b_g));
  return lp;
}

double horseshoe_log_joint_logspace(const Matrix& W, const HorseshoeSample& hs, double b_g) {
  const double jac = hs.rho2.array().log().sum() + hs.lambda.array().log().sum() + std::log(hs.tau2) +
                     std::log(hs.lambda_tau);
  return horseshoe_log_joint(W, hs, b_g) + jac;
}

double prune_probability(double log_scale_mean, double log_scale_std, double delta) {
  if (!(delta > 0.0)) throw ConfigError("prune_rows: delta must be positive");
  if (!(log_scale_std > 0.0)) return std::log(delta) > log_scale_mean ? 1.0 : 0.0;
  return normal_cdf((std::log(delta) - log_scale_mean) / log_scale_std);
}

std::vector<bool> prune_rows(const Vector& log_scale_mean, const Vector& log_scale_std, double delta, double p0) {
  if (!(p0 > 0.0 && p0 < 1.0)) throw ConfigError("prune_rows: p0 must lie in (0, 1)");
  if (log_scale_mean.size() != log_scale_std.size()) throw ConfigError("prune_rows: size mismatch");
  std::vector<bool> pruned(static_cast<std::size_t>(log_scale_mean.size()));
  for (Index r = 0; r < log_scale_mean.size(); ++r) {
    pruned[static_cast<std::size_t>(r)] = prune_probability(log_scale_mean(r), log_scale_std(r), delta) > p0;
  }
  return pruned;
}

double ard_log_prior(const Matrix& S, const Vector& alpha, double a0, double b0) {
  if (alpha.size() != S.cols()) throw ConfigError("ard_log_prior: one alpha per column required");
  if (!(a0 > 0.0 && b0 > 0.0)) throw ConfigError("ard_log_prior: a0 and b0 must be positive");
  double lp = 0.0;
  for (Index j = 0; j < S.cols(); ++j) {
    if (!(alpha(j) > 0.0)) throw NumericalError("ard_log_prior: non-positive alpha");
    lp += -0.5 * (static_cast<double>(S.rows()) * (kLog2Pi + std::log(alpha(j))) + S.col(j).squaredNorm() / alpha(j));
    lp += log_inverse_gamma_pdf(alpha(j), a0, b0);
  }
  return lp;
}

Vector explained_shares(const Matrix& S) {
  Vector norms = S.colwise().squaredNorm().transpose();
  const double total = norms.sum();
  if (total > 0.0) norms /= total;
  std::sort(norms.data(), norms.data() + norms.size(), std::greater<double>());
  return norms;
}

Index effective_shared_rank(const Matrix& S, double threshold) {
  const Vector shares = explained_shares(S);
  return (shares.array() >= threshold).count();
}

double student_t_loglik(const Vector& x, const Vector& mean, double nu, double lambda) {
  if (!(nu > 0.0 && lambda > 0.0)) throw ConfigError("student_t_loglik: nu and lambda must be positive");
  if (x.size() != mean.size()) throw ConfigError("student_t_loglik: size mismatch");
  double s = 0.0;
  for (Index i = 0; i < x.size(); ++i) s += log_student_t_pdf(x(i), mean(i), nu, lambda);
  return s;
}

}  // namespace clvm
