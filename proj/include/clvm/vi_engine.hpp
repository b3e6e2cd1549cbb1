#pragma once

// Black-box variational inference for the contrastive model family.
//
// Per-row latents get mean-field Gaussian factors; missing cells get their own
// Gaussian factors and are sampled wherever the likelihood needs them. Global
// parameters are point estimates unless a prior makes them variational: W
// under the horseshoe, S under ARD, log sigma2 under the inverse-gamma noise
// prior. Positive hyperparameters use log-normal factors. The ELBO is a Monte
// Carlo estimate with closed-form Gaussian KL terms; gradients are pathwise.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clvm/data_model.hpp"
#include "clvm/params.hpp"
#include "clvm/variants.hpp"

namespace clvm {

enum class Likelihood { gaussian, student_t };
enum class WPrior { none, group, horseshoe };
enum class SPrior { none, ard };
enum class NoisePrior { none, inverse_gamma };

const char* to_string(Likelihood v);
const char* to_string(WPrior v);
const char* to_string(SPrior v);
const char* to_string(NoisePrior v);
Likelihood parse_likelihood(const std::string& s);
WPrior parse_w_prior(const std::string& s);
SPrior parse_s_prior(const std::string& s);
NoisePrior parse_noise_prior(const std::string& s);

struct ModelSpec {
  Index d = 0;
  Index k = 0;
  Index t = 0;

  Likelihood likelihood = Likelihood::gaussian;
  /// Student-t shape a: ν = 2a degrees of freedom, precision 1/sigma2.
  double student_a = 2.0;

  WPrior w_prior = WPrior::none;
  double rho = 0.0;                  // group penalty strength
  std::vector<int> group_ids;        // per row of W; empty = one group per row
  double horseshoe_b = 1.0;          // global scale τ ~ C⁺(0, b_g)

  SPrior s_prior = SPrior::none;
  double ard_a0 = 1e-3;
  double ard_b0 = 1e-3;

  NoisePrior noise_prior = NoisePrior::none;
  double noise_a = 1.0;
  double noise_b = 1.0;

  void validate() const;
  GroupPartition groups() const;

  bool variational_w() const { return w_prior == WPrior::horseshoe; }
  bool variational_s() const { return s_prior == SPrior::ard; }
  bool variational_noise() const { return noise_prior == NoisePrior::inverse_gamma; }
};

/// A block of independent Gaussian factors. A block with empty `logstd` is a
/// point estimate.
struct GaussianBlock {
  Matrix loc;
  Matrix logstd;

  bool variational() const { return logstd.size() > 0; }
  Matrix std() const { return logstd.array().exp().matrix(); }
};

struct VariationalState {
  GaussianBlock target_z;      // n × k
  GaussianBlock target_t;      // n × t
  GaussianBlock background_z;  // m × k
  GaussianBlock target_missing;      // cells × 1
  GaussianBlock background_missing;  // cells × 1
  std::vector<Index> target_missing_cells;  // row * d + col, ascending
  std::vector<Index> background_missing_cells;

  GaussianBlock S;  // d × k
  GaussianBlock W;  // d × t
  GaussianBlock mu_x;        // d × 1, point
  GaussianBlock mu_y;        // d × 1, point
  GaussianBlock log_sigma2;  // 1 × 1

  GaussianBlock hs_log_rho2;        // d × 1
  GaussianBlock hs_log_lambda;      // d × 1
  GaussianBlock hs_log_tau2;        // 1 × 1
  GaussianBlock hs_log_lambda_tau;  // 1 × 1
  GaussianBlock ard_log_alpha;      // k × 1

  /// Visits every parameter matrix (locs and logstds) in a fixed order.
  void for_each_matrix(const std::function<void(const std::string&, Matrix&)>& f);
  void for_each_matrix(const std::function<void(const std::string&, const Matrix&)>& f) const;

  /// Same shapes, all zeros.
  VariationalState zeros_like() const;

  /// Point summary of the global parameters (variational means; sigma2 from
  /// the log-scale location).
  ClvmParams point_params() const;
};

/// Initial state for a spec: globals from the eigen initialization on the
/// mean-imputed data, latent locations from the exact Gaussian posterior
/// under those parameters.
VariationalState initial_state(const ModelSpec& spec, const ContrastivePair& pair, std::uint64_t seed);

struct ElboTerms {
  double likelihood = 0.0;       // E_q log p(data | latents, globals)
  double latent_kl = 0.0;        // Σ KL(q(row latents) ‖ N(0, I))
  double missing_entropy = 0.0;  // Σ H(q(missing cell))
  double global_log_prior = 0.0; // E_q log p(globals), penalty included
  double global_entropy = 0.0;   // H(q(variational globals))
  double total() const { return likelihood - latent_kl + missing_entropy + global_log_prior + global_entropy; }
};

struct ElboResult {
  double elbo = 0.0;
  double std_error = 0.0;  // across the n_mc samples
  ElboTerms terms;         // averaged over samples
  VariationalState grad;   // filled by elbo_gradient only
};

struct EvalOptions {
  int n_mc = 1;
  int threads = 1;
  Index chunk_rows = 64;
};

/// Monte Carlo ELBO estimate. Draws one 64-bit base seed from `rng`; every
/// sample and row chunk derives its own substream from it, so results do not
/// depend on the thread count.
ElboResult elbo_estimate(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair,
                         RngStream& rng, const EvalOptions& opts = {});

/// As elbo_estimate, plus exact pathwise gradients of the same estimate with
/// respect to every parameter matrix.
ElboResult elbo_gradient(const ModelSpec& spec, const VariationalState& state, const ContrastivePair& pair,
                         RngStream& rng, const EvalOptions& opts = {});

struct AdamState {
  int step = 0;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

/// One ADAM update with bias correction. `maximize` ascends the gradient.
/// Moment buffers are created on the first call.
void adam_step(AdamState& adam, const std::vector<Matrix*>& values, const std::vector<const Matrix*>& grads,
               bool maximize = true);

struct ViOptions {
  int max_iter = 5000;
  int n_mc = 1;
  int eval_mc = 64;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int threads = 1;
  /// Moving-average window for convergence and the plateau rule.
  int window = 100;
  double rel_tol = 1e-5;
  int plateau = 500;
  bool deterministic = false;  // trace wall_ms is written as 0
  std::optional<VariationalState> init;
};

struct ViFit {
  FittedModel model;
  VariationalState state;
  ModelSpec spec;
  double final_elbo = 0.0;  // eval_mc-sample estimate at the end
  double final_elbo_se = 0.0;
};

ViFit fit_vi(const ModelSpec& spec, const ContrastivePair& pair, const ViOptions& opts = {});

/// Target matrix with missing cells replaced by their variational means.
Matrix impute_missing(const VariationalState& state, const ContrastivePair& pair);
Matrix impute_missing_background(const VariationalState& state, const ContrastivePair& pair);

/// Closed-form KL(N(m, s²) ‖ N(0, 1)).
double gaussian_kl(double mean, double logstd);

/// log-scale mean and std of ρ_r² τ² under q, for prune_rows.
std::pair<Vector, Vector> horseshoe_row_scales(const VariationalState& state);

}  // namespace clvm
