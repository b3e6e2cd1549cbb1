#include "clvm/vi_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "clvm/clvm_em.hpp"
#include "clvm/errors.hpp"

namespace clvm {

namespace {

constexpr double kHalfLog2PiE = 0.5 * (1.0 + kLog2Pi);
constexpr double kLogStdMin = -12.0;
constexpr double kLogStdMax = 6.0;

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError(std::string("unknown ") + what + ": '" + s + "'");
}

}  // namespace

const char* to_string(Likelihood v) { return v == Likelihood::gaussian ? "gaussian" : "student_t"; }
const char* to_string(WPrior v) {
  switch (v) {
    case WPrior::none: return "none";
    case WPrior::group: return "group";
    case WPrior::horseshoe: return "horseshoe";
  }
  return "none";
}
const char* to_string(SPrior v) { return v == SPrior::none ? "none" : "ard"; }
const char* to_string(NoisePrior v) { return v == NoisePrior::none ? "none" : "inverse_gamma"; }

Likelihood parse_likelihood(const std::string& s) {
  return parse_enum<Likelihood>(s, {{"gaussian", Likelihood::gaussian}, {"student_t", Likelihood::student_t}},
                                "likelihood");
}
WPrior parse_w_prior(const std::string& s) {
  return parse_enum<WPrior>(s, {{"none", WPrior::none}, {"group", WPrior::group}, {"horseshoe", WPrior::horseshoe}},
                            "w_prior");
}
SPrior parse_s_prior(const std::string& s) {
  return parse_enum<SPrior>(s, {{"none", SPrior::none}, {"ard", SPrior::ard}}, "s_prior");
}
NoisePrior parse_noise_prior(const std::string& s) {
  return parse_enum<NoisePrior>(s, {{"none", NoisePrior::none}, {"inverse_gamma", NoisePrior::inverse_gamma}},
                                "noise_prior");
}

void ModelSpec::validate() const {
  if (d < 1) throw ConfigError("model: d must be positive");
  if (k < 0 || t < 0 || k + t < 1) throw ConfigError("model: need k >= 0, t >= 0 and k + t >= 1");
  if (k + t > d) throw ConfigError("model: k + t must not exceed d");
  if (likelihood == Likelihood::student_t && !(student_a > 0.0)) throw ConfigError("model: student_a must be positive");
  if (w_prior == WPrior::group) {
    if (!(rho >= 0.0)) throw ConfigError("model: rho must be non-negative");
    if (!group_ids.empty() && static_cast<Index>(group_ids.size()) != d) {
      throw ConfigError("model: group_ids needs one entry per feature");
    }
  }
  if (w_prior != WPrior::none && t == 0) throw ConfigError("model: a prior on W requires t >= 1");
  if (w_prior == WPrior::horseshoe && !(horseshoe_b > 0.0)) throw ConfigError("model: horseshoe_b must be positive");
  if (s_prior == SPrior::ard) {
    if (k == 0) throw ConfigError("model: ARD requires k >= 1");
    if (!(ard_a0 > 0.0 && ard_b0 > 0.0)) throw ConfigError("model: ard_a0 and ard_b0 must be positive");
  }
  if (noise_prior == NoisePrior::inverse_gamma && !(noise_a > 0.0 && noise_b > 0.0)) {
    throw ConfigError("model: noise_a and noise_b must be positive");
  }
}

GroupPartition ModelSpec::groups() const {
  return group_ids.empty() ? GroupPartition::one_per_row(d, t) : GroupPartition::from_ids(group_ids, t);
}

// ---------------------------------------------------------------------------
// State

namespace {

template <typename State, typename F>
void visit_blocks(State& s, F&& f) {
  f("target_z", s.target_z);
  f("target_t", s.target_t);
  f("background_z", s.background_z);
  f("target_missing", s.target_missing);
  f("background_missing", s.background_missing);
  f("S", s.S);
  f("W", s.W);
  f("mu_x", s.mu_x);
  f("mu_y", s.mu_y);
  f("log_sigma2", s.log_sigma2);
  f("hs_log_rho2", s.hs_log_rho2);
  f("hs_log_lambda", s.hs_log_lambda);
  f("hs_log_tau2", s.hs_log_tau2);
  f("hs_log_lambda_tau", s.hs_log_lambda_tau);
  f("ard_log_alpha", s.ard_log_alpha);
}

GaussianBlock zeros_like(const GaussianBlock& b) {
  return {Matrix::Zero(b.loc.rows(), b.loc.cols()), Matrix::Zero(b.logstd.rows(), b.logstd.cols())};
}

GaussianBlock point(Matrix loc) { return {std::move(loc), Matrix()}; }
GaussianBlock factor(Matrix loc, double logstd) {
  Matrix ls = Matrix::Constant(loc.rows(), loc.cols(), logstd);
  return {std::move(loc), std::move(ls)};
}

std::vector<Index> missing_cells(const Mask& mask) {
  std::vector<Index> cells;
  for (Index r = 0; r < mask.rows(); ++r) {
    for (Index c = 0; c < mask.cols(); ++c) {
      if (!mask(r, c)) cells.push_back(r * mask.cols() + c);
    }
  }
  return cells;
}

}  // namespace

void VariationalState::for_each_matrix(const std::function<void(const std::string&, Matrix&)>& f) {
  visit_blocks(*this, [&](const char* name, GaussianBlock& b) {
    if (b.loc.size() > 0) f(std::string(name) + ".loc", b.loc);
    if (b.logstd.size() > 0) f(std::string(name) + ".logstd", b.logstd);
  });
}

void VariationalState::for_each_matrix(const std::function<void(const std::string&, const Matrix&)>& f) const {
  visit_blocks(*this, [&](const char* name, const GaussianBlock& b) {
    if (b.loc.size() > 0) f(std::string(name) + ".loc", b.loc);
    if (b.logstd.size() > 0) f(std::string(name) + ".logstd", b.logstd);
  });
}

VariationalState VariationalState::zeros_like() const {
  VariationalState out;
  out.target_missing_cells = target_missing_cells;
  out.background_missing_cells = background_missing_cells;
  const VariationalState& self = *this;
  out.target_z = clvm::zeros_like(self.target_z);
  out.target_t = clvm::zeros_like(self.target_t);
  out.background_z = clvm::zeros_like(self.background_z);
  out.target_missing = clvm::zeros_like(self.target_missing);
  out.background_missing = clvm::zeros_like(self.background_missing);
  out.S = clvm::zeros_like(self.S);
  out.W = clvm::zeros_like(self.W);
  out.mu_x = clvm::zeros_like(self.mu_x);
  out.mu_y = clvm::zeros_like(self.mu_y);
  out.log_sigma2 = clvm::zeros_like(self.log_sigma2);
  out.hs_log_rho2 = clvm::zeros_like(self.hs_log_rho2);
  out.hs_log_lambda = clvm::zeros_like(self.hs_log_lambda);
  out.hs_log_tau2 = clvm::zeros_like(self.hs_log_tau2);
  out.hs_log_lambda_tau = clvm::zeros_like(self.hs_log_lambda_tau);
  out.ard_log_alpha = clvm::zeros_like(self.ard_log_alpha);
  return out;
}

ClvmParams VariationalState::point_params() const {
  ClvmParams p;
  p.S = S.loc;
  p.W = W.loc;
  p.mu_x = mu_x.loc.col(0);
  p.mu_y = mu_y.loc.col(0);
  p.sigma2 = std::max(std::exp(log_sigma2.loc(0, 0)), kSigma2Floor);
  return p;
}

VariationalState initial_state(const ModelSpec& spec, const ContrastivePair& pair, std::uint64_t seed) {
  spec.validate();
  pair.validate();
  if (pair.dim() != spec.d) throw ConfigError("model: d does not match the data");
  const Index d = spec.d, k = spec.k, t = spec.t;
  const ClvmParams init = initial_params(pair, k, t, seed, true);

  VariationalState s;
  s.S = spec.variational_s() ? factor(init.S, std::log(0.05)) : point(init.S);
  s.W = spec.variational_w() ? factor(init.W, std::log(0.05)) : point(init.W);
  s.mu_x = point(init.mu_x);
  s.mu_y = point(init.mu_y);
  Matrix ls(1, 1);
  ls(0, 0) = std::log(init.sigma2);
  s.log_sigma2 = spec.variational_noise() ? factor(ls, std::log(0.1)) : point(ls);

  if (spec.variational_w()) {
    // Scales start consistent with the initial W.
    const Vector row_var = (init.W.rowwise().squaredNorm() / static_cast<double>(t)).array() + 1e-6;
    const double log_tau2 = std::log(row_var.mean());
    Matrix rho(d, 1);
    rho.col(0) = (row_var.array().log() - log_tau2).matrix();
    s.hs_log_rho2 = factor(rho, std::log(0.1));
    s.hs_log_lambda = factor(Matrix::Zero(d, 1), std::log(0.1));
    Matrix tau(1, 1);
    tau(0, 0) = log_tau2;
    s.hs_log_tau2 = factor(tau, std::log(0.1));
    Matrix lam_tau(1, 1);
    lam_tau(0, 0) = -2.0 * std::log(spec.horseshoe_b);
    s.hs_log_lambda_tau = factor(lam_tau, std::log(0.1));
  }
  if (spec.variational_s()) {
    Matrix a(k, 1);
    for (Index j = 0; j < k; ++j) a(j, 0) = std::log(init.S.col(j).squaredNorm() / static_cast<double>(d) + 1e-3);
    s.ard_log_alpha = factor(a, std::log(0.1));
  }

  const Matrix x = pair.target_mask.all() ? pair.target : mean_impute(pair.target, pair.target_mask);
  const Matrix y = pair.background_mask.all() ? pair.background : mean_impute(pair.background, pair.background_mask);

  // Exact posterior under the initial parameters.
  Matrix A(d, t + k);
  A << init.W, init.S;
  Matrix P = A.transpose() * A;
  P.diagonal().array() += init.sigma2;
  const Matrix Pinv = spd_inverse(P);
  const Matrix target_mean = ((x.rowwise() - init.mu_x.transpose()) * A) * Pinv.transpose();
  const Vector target_logstd = (0.5 * (init.sigma2 * Pinv.diagonal()).array().log()).matrix();

  Matrix Pb = init.S.transpose() * init.S;
  Pb.diagonal().array() += init.sigma2;
  const Matrix Pb_inv = spd_inverse(Pb);
  const Matrix bg_mean = ((y.rowwise() - init.mu_y.transpose()) * init.S) * Pb_inv.transpose();
  const Vector bg_logstd = (0.5 * (init.sigma2 * Pb_inv.diagonal()).array().log()).matrix();

  auto rows_of = [](const Vector& v, Index rows) { return Matrix(v.transpose().replicate(rows, 1)); };
  s.target_t = {target_mean.leftCols(t), rows_of(target_logstd.head(t), pair.n())};
  s.target_z = {target_mean.rightCols(k), rows_of(target_logstd.tail(k), pair.n())};
  s.background_z = {bg_mean, rows_of(bg_logstd, pair.m())};

  const double cell_logstd = 0.5 * std::log(init.sigma2);
  auto init_missing = [&](const Matrix& filled, const Mask& mask, std::vector<Index>& cells, GaussianBlock& block) {
    cells = missing_cells(mask);
    Matrix loc(static_cast<Index>(cells.size()), 1);
    for (std::size_t c = 0; c < cells.size(); ++c) loc(static_cast<Index>(c), 0) = filled(cells[c] / d, cells[c] % d);
    block = factor(loc, cell_logstd);
    if (cells.empty()) block = {Matrix(0, 1), Matrix(0, 1)};
  };
  init_missing(x, pair.target_mask, s.target_missing_cells, s.target_missing);
  init_missing(y, pair.background_mask, s.background_missing_cells, s.background_missing);
  return s;
}

double gaussian_kl(double mean, double logstd) {
  return 0.5 * (mean * mean + std::exp(2.0 * logstd) - 1.0 - 2.0 * logstd);
}

// ---------------------------------------------------------------------------
// ELBO

namespace {

struct Draw {
  Matrix value;
  Matrix eps;  // empty for point blocks
};

Draw draw(const GaussianBlock& b, RngStream& rng) {
  if (!b.variational()) return {b.loc, Matrix()};
  Draw out;
  out.eps = rng.normal_matrix(b.loc.rows(), b.loc.cols());
  out.value = b.loc + (b.logstd.array().exp() * out.eps.array()).matrix();
  return out;
}

double block_entropy(const GaussianBlock& b) {
  if (!b.variational()) return 0.0;
  return static_cast<double>(b.logstd.size()) * kHalfLog2PiE + b.logstd.sum();
}

/// Accumulates d(objective)/d(value) into the block gradient through the
/// reparameterization, plus the entropy gradient of variational blocks.
void chain(const GaussianBlock& b, const Draw& dr, const Matrix& gvalue, GaussianBlock& g, double weight) {
  g.loc += weight * gvalue;
  if (b.variational()) {
    g.logstd.array() += weight * (gvalue.array() * b.logstd.array().exp() * dr.eps.array() + 1.0);
  }
}

struct Globals {
  Draw S, W, ell, rho, lam, tau, lam_tau, alpha;
};

struct GlobalGrads {
  Matrix S, W;
  double ell = 0.0;
  Matrix rho, lam, tau, lam_tau, alpha;
};

struct ChunkPartial {
  double likelihood = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  Matrix gS, gW;
  Vector gmu_x, gmu_y;
  double gell = 0.0;
};

struct LikelihoodKernel {
  Likelihood kind;
  double nu = 0.0;
  double constant = 0.0;  // per-cell constant, excluding the scale term

  explicit LikelihoodKernel(const ModelSpec& spec) : kind(spec.likelihood) {
    if (kind == Likelihood::student_t) {
      nu = 2.0 * spec.student_a;
      constant = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(M_PI * nu);
    } else {
      constant = -0.5 * kLog2Pi;
    }
  }

  /// Fills G = d loglik / d mean and returns Σ loglik; `gell` receives
  /// d loglik / d log sigma2.
  double eval(const Matrix& R, double ell, Matrix& G, double& gell) const {
    const double prec = std::exp(-ell);
    const double cells = static_cast<double>(R.size());
    if (kind == Likelihood::gaussian) {
      const double sq = R.squaredNorm();
      G = R * prec;
      gell = -0.5 * cells + 0.5 * sq * prec;
      return cells * (constant - 0.5 * ell) - 0.5 * sq * prec;
    }
    const auto q = (prec * R.array().square()).eval();
    const auto denom = (nu + q).eval();
    G = ((nu + 1.0) * prec * R.array() / denom).matrix();
    gell = -0.5 * cells + 0.5 * (nu + 1.0) * (q / denom).sum();
    return cells * (constant - 0.5 * ell) - 0.5 * (nu + 1.0) * (q / nu).log1p().sum();
  }
};

double global_log_prior(const ModelSpec& spec, const Globals& g, GlobalGrads& gg, bool want_grad) {
  double lp = 0.0;
  const Matrix& W = g.W.value;
  const Matrix& S = g.S.value;

  if (spec.w_prior == WPrior::group) {
    const GroupPartition groups = spec.groups();
    lp -= group_penalty(W, spec.rho, groups);
    if (want_grad) gg.W -= group_penalty_gradient(W, spec.rho, groups);
  } else if (spec.w_prior == WPrior::horseshoe) {
    const Index d = W.rows();
    const double cols = static_cast<double>(W.cols());
    const double lg_half = std::lgamma(0.5);
    const double u_tau = g.tau.value(0, 0);
    const double v_tau = g.lam_tau.value(0, 0);
    const double log_b2 = 2.0 * std::log(spec.horseshoe_b);
    double d_utau = 0.0;
    for (Index r = 0; r < d; ++r) {
      const double u = g.rho.value(r, 0);
      const double v = g.lam.value(r, 0);
      const double inv_var = std::exp(-u - u_tau);
      const double sq = W.row(r).squaredNorm();
      lp += -0.5 * cols * (kLog2Pi + u + u_tau) - 0.5 * sq * inv_var;
      lp += log_inverse_gamma_u(u, 0.5, -v);
      lp += log_inverse_gamma_u(v, 0.5, 0.0);
      if (want_grad) {
        gg.W.row(r) -= W.row(r) * inv_var;
        const double dw = -0.5 * cols + 0.5 * sq * inv_var;
        const double e_uv = std::exp(-u - v);
        gg.rho(r, 0) += dw - 0.5 + e_uv;
        gg.lam(r, 0) += -0.5 + e_uv - 0.5 + std::exp(-v);
        d_utau += dw;
      }
    }
    lp += log_inverse_gamma_u(u_tau, 0.5, -v_tau);
    lp += log_inverse_gamma_u(v_tau, 0.5, -log_b2);
    (void)lg_half;
    if (want_grad) {
      const double e_uv = std::exp(-u_tau - v_tau);
      gg.tau(0, 0) += d_utau - 0.5 + e_uv;
      gg.lam_tau(0, 0) += -0.5 + e_uv - 0.5 + std::exp(-log_b2 - v_tau);
    }
  }

  if (spec.s_prior == SPrior::ard) {
    const double d = static_cast<double>(S.rows());
    for (Index j = 0; j < S.cols(); ++j) {
      const double a = g.alpha.value(j, 0);
      const double inv = std::exp(-a);
      const double sq = S.col(j).squaredNorm();
      lp += -0.5 * d * (kLog2Pi + a) - 0.5 * sq * inv;
      lp += log_inverse_gamma_u(a, spec.ard_a0, std::log(spec.ard_b0));
      if (want_grad) {
        gg.S.col(j) -= S.col(j) * inv;
        gg.alpha(j, 0) += -0.5 * d + 0.5 * sq * inv - spec.ard_a0 + spec.ard_b0 * inv;
      }
    }
  }

  if (spec.noise_prior == NoisePrior::inverse_gamma) {
    const double ell = g.ell.value(0, 0);
    lp += log_inverse_gamma_u(ell, spec.noise_a, std::log(spec.noise_b));
    if (want_grad) gg.ell += -spec.noise_a + spec.noise_b * std::exp(-ell);
  }
  return lp;
}

void check_state(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair) {
  spec.validate();
  if (pair.dim() != spec.d) throw ConfigError("elbo: data width does not match the model");
  if (state.target_z.loc.rows() != pair.n() || state.background_z.loc.rows() != pair.m() ||
      state.target_z.loc.cols() != spec.k || state.target_t.loc.cols() != spec.t ||
      state.S.loc.rows() != spec.d || state.S.loc.cols() != spec.k || state.W.loc.cols() != spec.t) {
    throw ConfigError("elbo: variational state does not match the model and data");
  }
  if (static_cast<Index>(state.target_missing_cells.size()) != pair.target_mask.size() - pair.target_mask.count() ||
      static_cast<Index>(state.background_missing_cells.size()) !=
          pair.background_mask.size() - pair.background_mask.count()) {
    throw ConfigError("elbo: missing-cell factors do not match the data masks");
  }
}

ElboResult evaluate(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair, RngStream& rng,
                    const EvalOptions& opts, bool want_grad) {
  check_state(spec, state, pair);
  if (opts.n_mc < 1) throw ConfigError("elbo: n_mc must be at least 1");
  if (opts.chunk_rows < 1) throw ConfigError("elbo: chunk_rows must be positive");
  const Index d = spec.d, k = spec.k, t = spec.t;
  const Index n = pair.n(), m = pair.m();
  const Index ct = chunk_count(n, opts.chunk_rows);
  const Index cb = chunk_count(m, opts.chunk_rows);
  const double weight = 1.0 / static_cast<double>(opts.n_mc);
  const LikelihoodKernel kernel(spec);
  const std::uint64_t base = rng.next_u64();

  ElboResult result;
  if (want_grad) result.grad = state.zeros_like();
  VariationalState& grad = result.grad;

  // Missing cells sorted by row: offsets per set.
  auto row_offsets = [](const std::vector<Index>& cells, Index rows, Index width) {
    std::vector<Index> off(static_cast<std::size_t>(rows + 1), 0);
    for (Index c : cells) ++off[static_cast<std::size_t>(c / width + 1)];
    std::partial_sum(off.begin(), off.end(), off.begin());
    return off;
  };
  const std::vector<Index> t_off = row_offsets(state.target_missing_cells, n, d);
  const std::vector<Index> b_off = row_offsets(state.background_missing_cells, m, d);

  std::vector<double> sample_elbo;
  sample_elbo.reserve(static_cast<std::size_t>(opts.n_mc));

  for (int s = 0; s < opts.n_mc; ++s) {
    const std::uint64_t sample_seed = mix_seed(base, static_cast<std::uint64_t>(s));
    RngStream grng(mix_seed(sample_seed, 0));

    Globals g;
    g.S = draw(state.S, grng);
    g.W = draw(state.W, grng);
    g.ell = draw(state.log_sigma2, grng);
    g.rho = draw(state.hs_log_rho2, grng);
    g.lam = draw(state.hs_log_lambda, grng);
    g.tau = draw(state.hs_log_tau2, grng);
    g.lam_tau = draw(state.hs_log_lambda_tau, grng);
    g.alpha = draw(state.ard_log_alpha, grng);
    const double ell = g.ell.value(0, 0);

    GlobalGrads gg;
    gg.S = Matrix::Zero(d, k);
    gg.W = Matrix::Zero(d, t);
    gg.rho = Matrix::Zero(state.hs_log_rho2.loc.rows(), state.hs_log_rho2.loc.cols());
    gg.lam = Matrix::Zero(state.hs_log_lambda.loc.rows(), state.hs_log_lambda.loc.cols());
    gg.tau = Matrix::Zero(state.hs_log_tau2.loc.rows(), state.hs_log_tau2.loc.cols());
    gg.lam_tau = Matrix::Zero(state.hs_log_lambda_tau.loc.rows(), state.hs_log_lambda_tau.loc.cols());
    gg.alpha = Matrix::Zero(state.ard_log_alpha.loc.rows(), state.ard_log_alpha.loc.cols());

    ElboTerms terms;
    terms.global_log_prior = global_log_prior(spec, g, gg, want_grad);
    for (const GaussianBlock* b : {&state.S, &state.W, &state.log_sigma2, &state.hs_log_rho2, &state.hs_log_lambda,
                                   &state.hs_log_tau2, &state.hs_log_lambda_tau, &state.ard_log_alpha}) {
      terms.global_entropy += block_entropy(*b);
    }

    std::vector<ChunkPartial> partials(static_cast<std::size_t>(ct + cb));
    const Matrix St = g.S.value.transpose();
    const Matrix Wt = g.W.value.transpose();

    auto run_chunk = [&](Index chunk, Index, Index) {
      RngStream crng(mix_seed(sample_seed, static_cast<std::uint64_t>(chunk) + 1));
      const bool target = chunk < ct;
      const Index local = target ? chunk : chunk - ct;
      const Index rows_total = target ? n : m;
      const Index begin = local * opts.chunk_rows;
      const Index end = std::min(rows_total, begin + opts.chunk_rows);
      const Index nr = end - begin;
      ChunkPartial& part = partials[static_cast<std::size_t>(chunk)];

      const GaussianBlock& qz = target ? state.target_z : state.background_z;
      const Matrix ez = crng.normal_matrix(nr, k);
      const Matrix zstd = qz.logstd.middleRows(begin, nr).array().exp().matrix();
      const Matrix Z = qz.loc.middleRows(begin, nr) + (zstd.array() * ez.array()).matrix();
      Matrix et, tstd, T;
      if (target) {
        et = crng.normal_matrix(nr, t);
        tstd = state.target_t.logstd.middleRows(begin, nr).array().exp().matrix();
        T = state.target_t.loc.middleRows(begin, nr) + (tstd.array() * et.array()).matrix();
      }

      // Observations with missing cells replaced by draws.
      Matrix X = (target ? pair.target : pair.background).middleRows(begin, nr);
      const GaussianBlock& qmiss = target ? state.target_missing : state.background_missing;
      const std::vector<Index>& cells = target ? state.target_missing_cells : state.background_missing_cells;
      const std::vector<Index>& off = target ? t_off : b_off;
      const Index c0 = off[static_cast<std::size_t>(begin)], c1 = off[static_cast<std::size_t>(end)];
      const Vector emiss = crng.normal_vector(c1 - c0);
      for (Index c = c0; c < c1; ++c) {
        const Index cell = cells[static_cast<std::size_t>(c)];
        X(cell / d - begin, cell % d) = qmiss.loc(c, 0) + std::exp(qmiss.logstd(c, 0)) * emiss(c - c0);
        part.entropy += kHalfLog2PiE + qmiss.logstd(c, 0);
      }

      Matrix mean = Z * St;
      if (target) mean.noalias() += T * Wt;
      mean.rowwise() += (target ? state.mu_x.loc : state.mu_y.loc).col(0).transpose();
      const Matrix R = X - mean;
      Matrix G;
      part.likelihood = kernel.eval(R, ell, G, part.gell);

      for (Index r = 0; r < nr; ++r) {
        for (Index j = 0; j < k; ++j) part.kl += gaussian_kl(qz.loc(begin + r, j), qz.logstd(begin + r, j));
        if (target) {
          for (Index j = 0; j < t; ++j) {
            part.kl += gaussian_kl(state.target_t.loc(begin + r, j), state.target_t.logstd(begin + r, j));
          }
        }
      }
      if (!std::isfinite(part.likelihood)) {
        throw NumericalError(std::string("elbo: non-finite likelihood in ") + (target ? "target" : "background") +
                             " rows " + std::to_string(begin) + ".." + std::to_string(end - 1));
      }
      if (!want_grad) return;

      part.gS = G.transpose() * Z;
      if (target) {
        part.gW = G.transpose() * T;
        part.gmu_x = G.colwise().sum().transpose();
      } else {
        part.gmu_y = G.colwise().sum().transpose();
      }

      GaussianBlock& gz = target ? grad.target_z : grad.background_z;
      const Matrix dZ = G * g.S.value;
      gz.loc.middleRows(begin, nr) += weight * (dZ - qz.loc.middleRows(begin, nr));
      gz.logstd.middleRows(begin, nr).array() +=
          weight * (dZ.array() * zstd.array() * ez.array() - zstd.array().square() + 1.0);
      if (target) {
        const Matrix dT = G * g.W.value;
        grad.target_t.loc.middleRows(begin, nr) += weight * (dT - state.target_t.loc.middleRows(begin, nr));
        grad.target_t.logstd.middleRows(begin, nr).array() +=
            weight * (dT.array() * tstd.array() * et.array() - tstd.array().square() + 1.0);
      }
      GaussianBlock& gmiss = target ? grad.target_missing : grad.background_missing;
      for (Index c = c0; c < c1; ++c) {
        const Index cell = cells[static_cast<std::size_t>(c)];
        const double dx = -G(cell / d - begin, cell % d);
        gmiss.loc(c, 0) += weight * dx;
        gmiss.logstd(c, 0) += weight * (dx * std::exp(qmiss.logstd(c, 0)) * emiss(c - c0) + 1.0);
      }
    };
    for_each_chunk(ct + cb, 1, opts.threads, run_chunk);

    // Fixed-order reduction.
    double gell = gg.ell;
    Vector gmx = Vector::Zero(d), gmy = Vector::Zero(d);
    for (Index c = 0; c < ct + cb; ++c) {
      const ChunkPartial& p = partials[static_cast<std::size_t>(c)];
      terms.likelihood += p.likelihood;
      terms.latent_kl += p.kl;
      terms.missing_entropy += p.entropy;
      if (want_grad) {
        gg.S += p.gS;
        if (c < ct) {
          gg.W += p.gW;
          gmx += p.gmu_x;
        } else {
          gmy += p.gmu_y;
        }
        gell += p.gell;
      }
    }

    const double total = terms.total();
    if (!std::isfinite(total)) throw NumericalError("elbo: non-finite estimate");
    sample_elbo.push_back(total);
    result.terms.likelihood += weight * terms.likelihood;
    result.terms.latent_kl += weight * terms.latent_kl;
    result.terms.missing_entropy += weight * terms.missing_entropy;
    result.terms.global_log_prior += weight * terms.global_log_prior;
    result.terms.global_entropy += weight * terms.global_entropy;

    if (want_grad) {
      chain(state.S, g.S, gg.S, grad.S, weight);
      chain(state.W, g.W, gg.W, grad.W, weight);
      grad.mu_x.loc.col(0) += weight * gmx;
      grad.mu_y.loc.col(0) += weight * gmy;
      Matrix gell_m(1, 1);
      gell_m(0, 0) = gell;
      chain(state.log_sigma2, g.ell, gell_m, grad.log_sigma2, weight);
      if (spec.variational_w()) {
        chain(state.hs_log_rho2, g.rho, gg.rho, grad.hs_log_rho2, weight);
        chain(state.hs_log_lambda, g.lam, gg.lam, grad.hs_log_lambda, weight);
        chain(state.hs_log_tau2, g.tau, gg.tau, grad.hs_log_tau2, weight);
        chain(state.hs_log_lambda_tau, g.lam_tau, gg.lam_tau, grad.hs_log_lambda_tau, weight);
      }
      if (spec.variational_s()) chain(state.ard_log_alpha, g.alpha, gg.alpha, grad.ard_log_alpha, weight);
    }
  }

  const double mean = std::accumulate(sample_elbo.begin(), sample_elbo.end(), 0.0) / opts.n_mc;
  result.elbo = mean;
  if (opts.n_mc > 1) {
    double ss = 0.0;
    for (double v : sample_elbo) ss += (v - mean) * (v - mean);
    result.std_error = std::sqrt(ss / (opts.n_mc - 1) / opts.n_mc);
  }
  if (want_grad) {
    grad.for_each_matrix([](const std::string& name, const Matrix& mtx) {
      if (!mtx.allFinite()) throw NumericalError("elbo: non-finite gradient in block " + name);
    });
  }
  return result;
}

}  // namespace

ElboResult elbo_estimate(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair,
                         RngStream& rng, const EvalOptions& opts) {
  return evaluate(spec, state, pair, rng, opts, false);
}

ElboResult elbo_gradient(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair,
                         RngStream& rng, const EvalOptions& opts) {
  return evaluate(spec, state, pair, rng, opts, true);
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(AdamState& adam, const std::vector<Matrix*>& values, const std::vector<const Matrix*>& grads,
               bool maximize) {
  if (values.size() != grads.size()) throw ConfigError("adam: value/gradient count mismatch");
  if (adam.m.empty()) {
    for (const Matrix* v : values) {
      adam.m.push_back(Matrix::Zero(v->rows(), v->cols()));
      adam.v.push_back(Matrix::Zero(v->rows(), v->cols()));
    }
  }
  if (adam.m.size() != values.size()) throw ConfigError("adam: parameter count changed");
  ++adam.step;
  const double c1 = 1.0 - std::pow(adam.beta1, adam.step);
  const double c2 = 1.0 - std::pow(adam.beta2, adam.step);
  const double sign = maximize ? 1.0 : -1.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Matrix& g = *grads[i];
    if (g.rows() != values[i]->rows() || g.cols() != values[i]->cols() || adam.m[i].rows() != g.rows() ||
        adam.m[i].cols() != g.cols()) {
      throw ConfigError("adam: shape mismatch");
    }
    adam.m[i] = adam.beta1 * adam.m[i] + (1.0 - adam.beta1) * g;
    adam.v[i] = adam.beta2 * adam.v[i] + (1.0 - adam.beta2) * g.cwiseAbs2();
    values[i]->array() +=
        sign * adam.lr * (adam.m[i].array() / c1) / ((adam.v[i].array() / c2).sqrt() + adam.eps);
  }
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

void clamp_logstds(VariationalState& state) {
  visit_blocks(state, [](const char*, GaussianBlock& b) {
    if (b.variational()) b.logstd = b.logstd.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  });
}

double sq_norm(const VariationalState& s) {
  double total = 0.0;
  s.for_each_matrix([&](const std::string&, const Matrix& mtx) { total += mtx.squaredNorm(); });
  return total;
}

}  // namespace

ViFit fit_vi(const ModelSpec& spec, const ContrastivePair& pair, const ViOptions& opts) {
  if (opts.max_iter < 0) throw ConfigError("fit_vi: max_iter must be non-negative");
  if (opts.window < 1 || opts.eval_every < 1) throw ConfigError("fit_vi: window and eval_every must be positive");
  ViFit out;
  out.spec = spec;
  out.state = opts.init ? *opts.init : initial_state(spec, pair, opts.seed);
  check_state(spec, out.state, pair);
  VariationalState& state = out.state;

  const RngStream root(opts.seed);
  const RngStream mc = root.substream("mc");
  const RngStream eval = root.substream("eval");
  EvalOptions step_opts;
  step_opts.n_mc = opts.n_mc;
  step_opts.threads = opts.threads;
  EvalOptions eval_opts;
  eval_opts.n_mc = opts.eval_mc;
  eval_opts.threads = opts.threads;

  const auto clock_start = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    if (opts.deterministic) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock_start).count();
  };

  {
    RngStream r = eval.split(0);
    const ElboResult init = elbo_estimate(spec, state, pair, r, eval_opts);
    out.model.trace.push_back({0, init.elbo, 0.0, wall_ms()});
  }

  AdamState adam;
  adam.lr = opts.lr;
  std::vector<Matrix*> values;
  state.for_each_matrix([&](const std::string&, Matrix& mtx) { values.push_back(&mtx); });

  std::deque<double> window;
  double window_sum = 0.0;
  double prev_avg = std::numeric_limits<double>::quiet_NaN();
  double best_avg = -std::numeric_limits<double>::infinity();
  int best_iter = 0;
  int iter = 0;
  bool converged = false;
  for (; iter < opts.max_iter; ++iter) {
    RngStream r = mc.split(static_cast<std::uint64_t>(iter));
    ElboResult res;
    try {
      res = elbo_gradient(spec, state, pair, r, step_opts);
    } catch (const NumericalError& e) {
      throw NumericalError("fit_vi: divergence at iteration " + std::to_string(iter) + ": " + e.what());
    }
    std::vector<const Matrix*> grads;
    res.grad.for_each_matrix([&](const std::string&, const Matrix& mtx) { grads.push_back(&mtx); });
    adam_step(adam, values, grads, true);
    clamp_logstds(state);

    window.push_back(res.elbo);
    window_sum += res.elbo;
    if (static_cast<int>(window.size()) > opts.window) {
      window_sum -= window.front();
      window.pop_front();
    }
    const int done = iter + 1;
    const double avg = window_sum / static_cast<double>(window.size());
    if (done % opts.eval_every == 0) {
      out.model.trace.push_back({done, avg, std::sqrt(sq_norm(res.grad)), wall_ms()});
    }
    if (done % opts.window == 0) {
      if (std::isfinite(prev_avg) && std::abs(avg - prev_avg) < opts.rel_tol * std::abs(avg)) {
        converged = true;
        ++iter;
        break;
      }
      prev_avg = avg;
    }
    if (static_cast<int>(window.size()) == opts.window) {
      if (avg > best_avg) {
        best_avg = avg;
        best_iter = done;
      } else if (done - best_iter >= opts.plateau) {
        adam.lr *= 0.5;
        best_iter = done;
      }
    }
  }

  RngStream r = eval.split(1);
  const ElboResult fin = elbo_estimate(spec, state, pair, r, eval_opts);
  out.final_elbo = fin.elbo;
  out.final_elbo_se = fin.std_error;

  FittedModel& model = out.model;
  model.params = state.point_params();
  model.target_t = state.target_t.loc;
  model.target_z = state.target_z.loc;
  model.background_z = state.background_z.loc;
  model.converged = converged;
  model.iterations = iter;
  return out;
}

Matrix impute_missing(const VariationalState& state, const ContrastivePair& pair) {
  Matrix out = pair.target;
  const Index d = pair.dim();
  if (static_cast<Index>(state.target_missing_cells.size()) != state.target_missing.loc.rows()) {
    throw ConfigError("impute_missing: state is inconsistent");
  }
  for (std::size_t c = 0; c < state.target_missing_cells.size(); ++c) {
    const Index cell = state.target_missing_cells[c];
    if (pair.target_mask(cell / d, cell % d)) throw ConfigError("impute_missing: state does not match the data mask");
    out(cell / d, cell % d) = state.target_missing.loc(static_cast<Index>(c), 0);
  }
  return out;
}

Matrix impute_missing_background(const VariationalState& state, const ContrastivePair& pair) {
  Matrix out = pair.background;
  const Index d = pair.dim();
  for (std::size_t c = 0; c < state.background_missing_cells.size(); ++c) {
    const Index cell = state.background_missing_cells[c];
    out(cell / d, cell % d) = state.background_missing.loc(static_cast<Index>(c), 0);
  }
  return out;
}

std::pair<Vector, Vector> horseshoe_row_scales(const VariationalState& state) {
  if (!state.hs_log_rho2.variational()) throw ConfigError("horseshoe_row_scales: model has no horseshoe prior");
  const Vector mean = (state.hs_log_rho2.loc.col(0).array() + state.hs_log_tau2.loc(0, 0)).matrix();
  const double tau_var = std::exp(2.0 * state.hs_log_tau2.logstd(0, 0));
  const Vector sd = ((2.0 * state.hs_log_rho2.logstd.col(0).array()).exp() + tau_var).sqrt().matrix();
  return {mean, sd};
}

}  // namespace clvm
