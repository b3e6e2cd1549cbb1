#pragma once

// Contrastive variational autoencoder: nonlinear shared and target decoders,
// amortized Gaussian encoders, hand-written reverse-mode gradients.

#include <cstdint>
#include <functional>
#include <vector>

#include "clvm/data_model.hpp"
#include "clvm/params.hpp"

namespace clvm {

/// Fully connected network with ReLU on every hidden layer and a linear
/// output. Inputs are batched row-wise: a B × in matrix maps to B × out.
/// Biases are stored as 1 × width rows so every parameter is a Matrix.
struct MlpParams {
  std::vector<Matrix> weights;  // layer l: out_l × in_l
  std::vector<Matrix> biases;   // layer l: 1 × out_l

  Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
  Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }

  /// Throws ConfigError when consecutive layer shapes do not chain or an
  /// entry is non-finite.
  void validate() const;

  /// Glorot-uniform weights, zero biases. `sizes` lists every layer width,
  /// input first.
  static MlpParams create(const std::vector<Index>& sizes, RngStream& rng);
  static MlpParams zeros_like(const MlpParams& other);

  /// input → 128 → 256 → output.
  static MlpParams decoder(Index input, Index output, RngStream& rng);
  /// input → 256 → 128 → output.
  static MlpParams encoder(Index input, Index output, RngStream& rng);

  void for_each_matrix(const std::function<void(Matrix&)>& f);
  void for_each_matrix(const std::function<void(const Matrix&)>& f) const;
};

/// Activations kept by mlp_forward for mlp_backward.
struct MlpCache {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> pre;          // pre-activation of each layer
  std::uint64_t fingerprint = 0;    // of the parameters used
};

/// Checksum of every parameter bit; used to reject a cache built from
/// different parameters.
std::uint64_t mlp_fingerprint(const MlpParams& params);

Matrix mlp_forward(const MlpParams& params, const Matrix& input, MlpCache* cache = nullptr);
Vector mlp_forward(const MlpParams& params, const Vector& input);

struct MlpGradients {
  MlpParams params;
  Matrix input;  // B × in
};

/// Exact gradients of Σ ⟨output_gradient, output⟩. Throws ConfigError if the
/// cache does not belong to `params` or its batch shape disagrees.
MlpGradients mlp_backward(const MlpParams& params, const MlpCache& cache, const Matrix& output_gradient);

inline constexpr double kEncoderLogstdMin = -6.0;
inline constexpr double kEncoderLogstdMax = 3.0;

struct CvaeModel {
  Index d = 0;
  Index k = 8;
  Index t = 2;
  MlpParams shared_decoder;      // k → d
  MlpParams target_decoder;      // t → d
  MlpParams target_encoder;      // d → 2(k + t): means then log-stds, z block first
  MlpParams background_encoder;  // d → 2k
  Matrix mu_x;        // 1 × d
  Matrix mu_y;        // 1 × d
  Matrix log_sigma2;  // 1 × 1

  double sigma2() const { return std::exp(log_sigma2(0, 0)); }
  void validate() const;

  static CvaeModel create(Index d, Index k, Index t, RngStream& rng);
  static CvaeModel zeros_like(const CvaeModel& other);

  void for_each_matrix(const std::function<void(Matrix&)>& f);
  void for_each_matrix(const std::function<void(const Matrix&)>& f) const;
};

/// Reconstruction means. Target: f_s(z) + f_t(t) + mu_x. Background:
/// f_s(z) + mu_y, and `t` must be empty.
Matrix decode(const CvaeModel& model, const Matrix& z, const Matrix& t, bool is_target);

/// Encoder Gaussian for a batch: means and clamped log-stds.
struct Encoding {
  Matrix mean;
  Matrix logstd;
};
Encoding encode_target(const CvaeModel& model, const Matrix& x);      // columns: z (k) then t (t)
Encoding encode_background(const CvaeModel& model, const Matrix& y);  // columns: z (k)

struct CvaeElbo {
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  CvaeModel grad;
};

/// One-sample ELBO estimate for the given rows with exact gradients for
/// every parameter. Target and background terms are scaled by their weights,
/// so passing n/B and m/B gives an unbiased full-data estimate from a
/// minibatch. Either batch may have zero rows.
CvaeElbo cvae_elbo_and_gradients(const CvaeModel& model, const Matrix& target_batch,
                                 const Matrix& background_batch, RngStream& rng, double target_weight = 1.0,
                                 double background_weight = 1.0);

struct CvaeOptions {
  Index k = 8;
  Index t = 2;
  int epochs = 30;
  Index batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

struct CvaeFit {
  CvaeModel model;
  std::vector<TraceEntry> trace;  // one entry per epoch
  Matrix target_t;      // encoder means
  Matrix target_z;
  Matrix background_z;
};

/// ADAM ascent over shuffled minibatches. Requires complete data. Throws
/// NumericalError naming the epoch if the objective becomes non-finite.
CvaeFit fit_cvae(const ContrastivePair& pair, const CvaeOptions& opts = {});

/// Draws latents from N(0, I) and decodes through the target or background
/// path.
Matrix sample_generative(const CvaeModel& model, bool target, Index count, RngStream& rng);

// ---------------------------------------------------------------------------
// Plain VAE baseline on the target set alone.

struct VaeModel {
  Index d = 0;
  Index latent = 10;
  MlpParams decoder;  // latent → d
  MlpParams encoder;  // d → 2·latent
  Matrix mu;          // 1 × d
  Matrix log_sigma2;  // 1 × 1

  static VaeModel create(Index d, Index latent, RngStream& rng);
  static VaeModel zeros_like(const VaeModel& other);
  void for_each_matrix(const std::function<void(Matrix&)>& f);
  void for_each_matrix(const std::function<void(const Matrix&)>& f) const;
};

struct VaeElbo {
  double elbo = 0.0;
  VaeModel grad;
};

VaeElbo vae_elbo_and_gradients(const VaeModel& model, const Matrix& batch, RngStream& rng, double weight = 1.0);

struct VaeFit {
  VaeModel model;
  std::vector<TraceEntry> trace;
  Matrix latents;  // encoder means, n × latent
};

/// Same optimizer and schedule as fit_cvae; `latent` dimensions in total.
VaeFit fit_vae(const Matrix& data, Index latent, const CvaeOptions& opts = {});

}  // namespace clvm
