#include "clvm/clvm_em.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "clvm/errors.hpp"

namespace clvm {

namespace {

// Loading for a row of the given set: [W S] for target rows, S for background.
Matrix loading(const ClvmParams& p, bool is_target) {
  if (!is_target) return p.S;
  Matrix a(p.dim(), p.target_dim() + p.shared_dim());
  a << p.W, p.S;
  return a;
}

// (AᵀA + sigma2 I)
Matrix posterior_precision_scaled(const Matrix& a, double sigma2) {
  Matrix p = a.transpose() * a;
  p.diagonal().array() += sigma2;
  return p;
}

void require_complete(const ContrastivePair& pair) {
  if (!pair.complete()) {
    throw DataError("EM path requires complete data: " + std::to_string(pair.missing_count()) +
                    " missing entries present (use the variational method)");
  }
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

ClvmParams shift_means(ClvmParams p, const Vector& dx, const Vector& dy) {
  p.mu_x += dx;
  p.mu_y += dy;
  return p;
}

}  // namespace

PosteriorMoments posterior_moments(const ClvmParams& params, const Vector& row, bool is_target) {
  params.validate();
  if (row.size() != params.dim()) throw ConfigError("posterior_moments: row has wrong dimension");
  if (!row.allFinite()) throw DataError("posterior_moments: row has missing or non-finite entries");

  const Index k = params.shared_dim();
  const Index t = is_target ? params.target_dim() : 0;
  const Matrix a = loading(params, is_target);
  auto llt = cholesky_jittered(posterior_precision_scaled(a, params.sigma2));
  const Vector centered = row - (is_target ? params.mu_x : params.mu_y);
  const Vector mean = llt.solve(a.transpose() * centered);
  Matrix second = params.sigma2 * llt.solve(Matrix::Identity(t + k, t + k));
  second = symmetrize(second) + mean * mean.transpose();

  PosteriorMoments out;
  out.mean_t = mean.head(t);
  out.mean_z = mean.tail(k);
  out.tt = second.topLeftCorner(t, t);
  out.zz = second.bottomRightCorner(k, k);
  out.zt = second.bottomLeftCorner(k, t);
  return out;
}

SufficientStats e_step(const ClvmParams& params, const ContrastivePair& pair) {
  params.validate();
  pair.validate();
  require_complete(pair);
  if (pair.dim() != params.dim()) throw ConfigError("e_step: data width does not match parameters");

  const Index d = params.dim(), k = params.shared_dim(), t = params.target_dim();
  const Index q = t + k;
  const Index ix = q, iy = q + 1;

  SufficientStats s;
  s.n = pair.n();
  s.m = pair.m();
  s.d = d;
  s.k = k;
  s.t = t;
  s.gram = Matrix::Zero(q + 2, q + 2);
  s.cross = Matrix::Zero(d, q + 2);

  // Target rows: latent u = [t; z].
  {
    const Matrix a = loading(params, true);
    auto llt = cholesky_jittered(posterior_precision_scaled(a, params.sigma2));
    const Matrix centered = pair.target.rowwise() - params.mu_x.transpose();
    const Matrix u = llt.solve(a.transpose() * centered.transpose()).transpose();  // n × q
    const Matrix cov = params.sigma2 * llt.solve(Matrix::Identity(q, q));
    const double n = static_cast<double>(pair.n());
    const Vector u_sum = u.colwise().sum().transpose();

    s.gram.topLeftCorner(q, q) += n * symmetrize(cov) + u.transpose() * u;
    s.gram.block(0, ix, q, 1) += u_sum;
    s.gram.block(ix, 0, 1, q) += u_sum.transpose();
    s.gram(ix, ix) += n;
    s.cross.leftCols(q) += pair.target.transpose() * u;
    s.cross.col(ix) += pair.target.colwise().sum().transpose();
    s.sum_sq += pair.target.squaredNorm();
  }
  // Background rows: latent z only.
  {
    const Matrix& a = params.S;
    auto llt = cholesky_jittered(posterior_precision_scaled(a, params.sigma2));
    const Matrix centered = pair.background.rowwise() - params.mu_y.transpose();
    const Matrix v = llt.solve(a.transpose() * centered.transpose()).transpose();  // m × k
    const Matrix cov = params.sigma2 * llt.solve(Matrix::Identity(k, k));
    const double m = static_cast<double>(pair.m());
    const Vector v_sum = v.colwise().sum().transpose();

    s.gram.block(t, t, k, k) += m * symmetrize(cov) + v.transpose() * v;
    s.gram.block(t, iy, k, 1) += v_sum;
    s.gram.block(iy, t, 1, k) += v_sum.transpose();
    s.gram(iy, iy) += m;
    s.cross.middleCols(t, k) += pair.background.transpose() * v;
    s.cross.col(iy) += pair.background.colwise().sum().transpose();
    s.sum_sq += pair.background.squaredNorm();
  }
  return s;
}

ClvmParams m_step(const SufficientStats& stats, const ContrastivePair& pair, const ClvmParams& current) {
  if (stats.d != pair.dim() || stats.n != pair.n() || stats.m != pair.m()) {
    throw ConfigError("m_step: statistics do not match the data");
  }
  if (stats.k != current.shared_dim() || stats.t != current.target_dim()) {
    throw ConfigError("m_step: statistics do not match the parameter dimensions");
  }
  const Index k = stats.k, t = stats.t, q = t + k;
  auto llt = cholesky_jittered(stats.gram);
  const Matrix theta = llt.solve(stats.cross.transpose()).transpose();  // d × (q + 2)

  ClvmParams next;
  next.W = theta.leftCols(t);
  next.S = theta.middleCols(t, k);
  next.mu_x = theta.col(q);
  next.mu_y = theta.col(q + 1);
  const double total = static_cast<double>((stats.n + stats.m) * stats.d);
  const double residual = stats.sum_sq - (theta.array() * stats.cross.array()).sum();
  next.sigma2 = std::max(kSigma2Floor, residual / total);
  if (!theta.allFinite() || !std::isfinite(next.sigma2)) throw NumericalError("m_step: non-finite update");
  return next;
}

double log_likelihood(const ClvmParams& params, const ContrastivePair& pair) {
  params.validate();
  pair.validate();
  require_complete(pair);
  if (pair.dim() != params.dim()) throw ConfigError("log_likelihood: data width does not match parameters");
  const Index d = params.dim();

  auto set_loglik = [&](const Matrix& data, const Vector& mean, const Matrix& cov) {
    Eigen::LLT<Matrix> llt(symmetrize(cov));
    if (llt.info() != Eigen::Success) throw NumericalError("log_likelihood: marginal covariance is not positive definite");
    const Matrix centered = (data.rowwise() - mean.transpose()).transpose();  // d × rows
    const double quad = llt.matrixL().solve(centered).squaredNorm();
    const double rows = static_cast<double>(data.rows());
    return -0.5 * (rows * (static_cast<double>(d) * kLog2Pi + log_det(llt)) + quad);
  };

  Matrix cov_y = params.S * params.S.transpose();
  cov_y.diagonal().array() += params.sigma2;
  const Matrix cov_x = cov_y + params.W * params.W.transpose();
  return set_loglik(pair.target, params.mu_x, cov_x) + set_loglik(pair.background, params.mu_y, cov_y);
}

ClvmParams initial_params(const ContrastivePair& pair, Index k, Index t, std::uint64_t seed, bool contrastive) {
  pair.validate();
  const Index d = pair.dim();
  auto observed_mean = [&](const Matrix& x, const Mask& mask) {
    Vector mean = Vector::Zero(d);
    for (Index c = 0; c < d; ++c) {
      double sum = 0;
      Index count = 0;
      for (Index r = 0; r < x.rows(); ++r) {
        if (mask(r, c)) {
          sum += x(r, c);
          ++count;
        }
      }
      mean(c) = count ? sum / static_cast<double>(count) : 0.0;
    }
    return mean;
  };
  auto centered_imputed = [&](const Matrix& x, const Mask& mask, const Vector& mean) {
    Matrix out = Matrix::Zero(x.rows(), d);
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < d; ++c) {
        if (mask(r, c)) out(r, c) = x(r, c) - mean(c);
      }
    }
    return out;
  };

  ClvmParams p = ClvmParams::zeros(d, k, t);
  p.mu_x = observed_mean(pair.target, pair.target_mask);
  p.mu_y = observed_mean(pair.background, pair.background_mask);
  const Matrix xc = centered_imputed(pair.target, pair.target_mask, p.mu_x);
  const Matrix yc = centered_imputed(pair.background, pair.background_mask, p.mu_y);
  if (contrastive) {
    const Matrix tcov = xc.transpose() * xc / static_cast<double>(pair.n());
    const Matrix bcov = yc.transpose() * yc / static_cast<double>(pair.m());
    const SymEig beig = sym_eig(symmetrize(bcov));
    const double sigma2 = k < d ? beig.values.tail(d - k).mean() : 1e-3 * beig.values.mean();
    p.sigma2 = std::max(sigma2, 1e-6);
    for (Index j = 0; j < k; ++j) {
      p.S.col(j) = beig.vectors.col(j) * std::sqrt(std::max(beig.values(j) - p.sigma2, 0.0));
    }
    const SymEig ceig = sym_eig(symmetrize(tcov - bcov));
    RngStream rng = RngStream(seed).substream("init");
    p.W = 0.1 * rng.normal_matrix(d, t);
    for (Index j = 0; j < t; ++j) p.W.col(j) += ceig.vectors.col(j) * std::sqrt(std::max(ceig.values(j), 0.0));
    return p;
  }
  const Matrix pooled = (xc.transpose() * xc + yc.transpose() * yc) / static_cast<double>(pair.n() + pair.m());

  const SymEig eig = sym_eig(symmetrize(pooled));
  double sigma2 = 0.0;
  if (k < d) {
    sigma2 = eig.values.tail(d - k).mean();
  } else {
    sigma2 = 1e-3 * eig.values.mean();
  }
  p.sigma2 = std::max(sigma2, 1e-6);
  for (Index j = 0; j < k; ++j) {
    p.S.col(j) = eig.vectors.col(j) * std::sqrt(std::max(eig.values(j) - p.sigma2, 0.0));
  }
  RngStream rng = RngStream(seed).substream("init");
  p.W = 0.1 * rng.normal_matrix(d, t);
  return p;
}

FittedModel fit_em(const ContrastivePair& pair, Index k, Index t, const EmOptions& opts) {
  pair.validate();
  if (k < 0 || t < 0 || k + t < 1) throw ConfigError("fit_em: need k >= 0, t >= 0 and k + t >= 1");
  if (k + t > pair.dim()) throw ConfigError("fit_em: k + t exceeds the data dimension");
  if (opts.max_iter < 0) throw ConfigError("fit_em: max_iter must be non-negative");
  require_complete(pair);

  ClvmParams start = opts.init ? *opts.init : initial_params(pair, k, t, opts.seed);
  start.validate();
  if (start.shared_dim() != k || start.target_dim() != t || start.dim() != pair.dim()) {
    throw ConfigError("fit_em: initial parameters do not match k, t or the data width");
  }

  // Work on per-set centered data; only the means shift.
  const Vector xbar = pair.target.colwise().mean().transpose();
  const Vector ybar = pair.background.colwise().mean().transpose();
  ContrastivePair centered = pair;
  centered.target = pair.target.rowwise() - xbar.transpose();
  centered.background = pair.background.rowwise() - ybar.transpose();
  ClvmParams params = shift_means(start, -xbar, -ybar);

  FittedModel fit;
  auto clock = std::chrono::steady_clock::now();
  double ll = log_likelihood(params, centered);
  fit.trace.push_back({0, ll, 0.0, elapsed_ms(clock)});
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    const SufficientStats stats = e_step(params, centered);
    params = m_step(stats, centered, params);
    const double next = log_likelihood(params, centered);
    if (!std::isfinite(next)) {
      std::ostringstream msg;
      msg << "fit_em: non-finite log-likelihood at iteration " << iter;
      throw NumericalError(msg.str());
    }
    fit.trace.push_back({iter, next, 0.0, elapsed_ms(clock)});
    fit.iterations = iter;
    const double change = std::abs(next - ll);
    ll = next;
    if (change <= opts.rel_tol * std::abs(ll)) {
      fit.converged = true;
      break;
    }
  }

  fit.params = shift_means(params, xbar, ybar);
  Latents target = transform(fit.params, pair.target, true);
  Latents background = transform(fit.params, pair.background, false);
  fit.target_t = std::move(target.t);
  fit.target_z = std::move(target.z);
  fit.background_z = std::move(background.z);
  return fit;
}

Latents transform(const ClvmParams& params, const Matrix& rows, bool is_target) {
  params.validate();
  if (rows.cols() != params.dim()) throw ConfigError("transform: row width does not match parameters");
  if (!rows.allFinite()) throw DataError("transform: rows contain missing or non-finite entries");
  const Index k = params.shared_dim();
  const Index t = is_target ? params.target_dim() : 0;
  const Matrix a = loading(params, is_target);
  auto llt = cholesky_jittered(posterior_precision_scaled(a, params.sigma2));
  const Matrix centered = rows.rowwise() - (is_target ? params.mu_x : params.mu_y).transpose();
  const Matrix u = llt.solve(a.transpose() * centered.transpose()).transpose();
  return {u.leftCols(t), u.rightCols(k)};
}

}  // namespace clvm

namespace clvm {

Latents transform(const ClvmParams& params, const Matrix& rows, const Mask& mask, bool is_target) {
  if (mask.rows() != rows.rows() || mask.cols() != rows.cols()) throw ConfigError("transform: mask shape mismatch");
  if (mask.all()) return transform(params, rows, is_target);
  params.validate();
  if (rows.cols() != params.dim()) throw ConfigError("transform: row width does not match parameters");
  const Index k = params.shared_dim();
  const Index t = is_target ? params.target_dim() : 0;
  const Matrix a = loading(params, is_target);
  const Vector& mu = is_target ? params.mu_x : params.mu_y;
  Latents out{Matrix(rows.rows(), t), Matrix(rows.rows(), k)};
  for (Index i = 0; i < rows.rows(); ++i) {
    // Missing cells drop out of the likelihood, so only observed rows of A enter.
    std::vector<Index> obs;
    for (Index j = 0; j < rows.cols(); ++j) {
      if (mask(i, j)) obs.push_back(j);
    }
    Matrix ao(static_cast<Index>(obs.size()), t + k);
    Vector r(static_cast<Index>(obs.size()));
    for (std::size_t o = 0; o < obs.size(); ++o) {
      ao.row(static_cast<Index>(o)) = a.row(obs[o]);
      r(static_cast<Index>(o)) = rows(i, obs[o]) - mu(obs[o]);
    }
    if (!r.allFinite()) throw DataError("transform: non-finite observed entry in row " + std::to_string(i));
    auto llt = cholesky_jittered(posterior_precision_scaled(ao, params.sigma2));
    const Vector u = llt.solve(ao.transpose() * r);
    out.t.row(i) = u.head(t).transpose();
    out.z.row(i) = u.tail(k).transpose();
  }
  return out;
}

}  // namespace clvm
