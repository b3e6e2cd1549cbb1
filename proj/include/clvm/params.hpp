#pragma once

#include <vector>

#include "clvm/num_core.hpp"

namespace clvm {

inline constexpr double kSigma2Floor = 1e-8;

/// Parameters of the linear contrastive model
///   x = S z + W t + mu_x + e,   y = S z + mu_y + e,   e ~ N(0, sigma2 I).
struct ClvmParams {
  Matrix S;  // d × k shared loading
  Matrix W;  // d × t target loading
  Vector mu_x;
  Vector mu_y;
  double sigma2 = 1.0;

  Index dim() const { return mu_x.size(); }
  Index shared_dim() const { return S.cols(); }
  Index target_dim() const { return W.cols(); }

  /// Throws ConfigError on inconsistent shapes, non-finite entries or
  /// sigma2 below the floor.
  void validate() const;

  static ClvmParams zeros(Index d, Index k, Index t, double sigma2 = 1.0);
};

struct TraceEntry {
  int iter = 0;
  double objective = 0.0;  // log-likelihood (EM) or ELBO (VI)
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

/// Result of fitting a linear contrastive model by EM or VI.
struct FittedModel {
  ClvmParams params;
  std::vector<TraceEntry> trace;
  Matrix target_t;      // n × t latent means
  Matrix target_z;      // n × k
  Matrix background_z;  // m × k
  bool converged = false;
  int iterations = 0;
};

}  // namespace clvm
