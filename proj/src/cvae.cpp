#include "clvm/cvae.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "clvm/errors.hpp"
#include "clvm/vi_engine.hpp"

namespace clvm {

// ---------------------------------------------------------------------------
// MLP

void MlpParams::validate() const {
  if (weights.empty()) throw ConfigError("mlp: no layers");
  if (weights.size() != biases.size()) throw ConfigError("mlp: one bias per layer required");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (biases[l].rows() != 1 || biases[l].cols() != weights[l].rows()) {
      throw ConfigError("mlp: bias " + std::to_string(l) + " does not match its layer width");
    }
    if (l > 0 && weights[l].cols() != weights[l - 1].rows()) {
      throw ConfigError("mlp: layer " + std::to_string(l) + " input does not match the previous output");
    }
    if (!weights[l].allFinite() || !biases[l].allFinite()) {
      throw ConfigError("mlp: non-finite entry in layer " + std::to_string(l));
    }
  }
}

MlpParams MlpParams::create(const std::vector<Index>& sizes, RngStream& rng) {
  if (sizes.size() < 2) throw ConfigError("mlp: need at least an input and an output width");
  MlpParams p;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const Index in = sizes[l];
    const Index out = sizes[l + 1];
    if (in < 0 || out < 1) throw ConfigError("mlp: layer widths must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(out, in);
    for (Index j = 0; j < in; ++j) {
      for (Index i = 0; i < out; ++i) w(i, j) = rng.uniform(-limit, limit);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Matrix::Zero(1, out));
  }
  return p;
}

MlpParams MlpParams::zeros_like(const MlpParams& other) {
  MlpParams p;
  for (const Matrix& w : other.weights) p.weights.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const Matrix& b : other.biases) p.biases.push_back(Matrix::Zero(b.rows(), b.cols()));
  return p;
}

MlpParams MlpParams::decoder(Index input, Index output, RngStream& rng) {
  return create({input, 128, 256, output}, rng);
}

MlpParams MlpParams::encoder(Index input, Index output, RngStream& rng) {
  return create({input, 256, 128, output}, rng);
}

void MlpParams::for_each_matrix(const std::function<void(Matrix&)>& f) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    f(weights[l]);
    f(biases[l]);
  }
}

void MlpParams::for_each_matrix(const std::function<void(const Matrix&)>& f) const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    f(weights[l]);
    f(biases[l]);
  }
}

std::uint64_t mlp_fingerprint(const MlpParams& params) {
  // FNV-1a over shapes and raw bits.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  params.for_each_matrix([&](const Matrix& m) {
    mix(static_cast<std::uint64_t>(m.rows()));
    mix(static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, m.data() + i, sizeof bits);
      mix(bits);
    }
  });
  return h;
}

Matrix mlp_forward(const MlpParams& params, const Matrix& input, MlpCache* cache) {
  if (params.weights.empty()) throw ConfigError("mlp_forward: no layers");
  if (input.cols() != params.input_dim()) {
    throw ConfigError("mlp_forward: input has " + std::to_string(input.cols()) + " columns, network expects " +
                      std::to_string(params.input_dim()));
  }
  const std::size_t layers = params.weights.size();
  if (cache) {
    cache->inputs.assign(layers, Matrix());
    cache->pre.assign(layers, Matrix());
    cache->fingerprint = mlp_fingerprint(params);
  }
  Matrix h = input;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix pre = h * params.weights[l].transpose();
    pre.rowwise() += params.biases[l].row(0);
    if (cache) cache->inputs[l] = std::move(h);
    h = (l + 1 == layers) ? pre : Matrix(pre.cwiseMax(0.0));
    if (cache) cache->pre[l] = std::move(pre);
  }
  return h;
}

Vector mlp_forward(const MlpParams& params, const Vector& input) {
  return mlp_forward(params, Matrix(input.transpose()), nullptr).row(0).transpose();
}

MlpGradients mlp_backward(const MlpParams& params, const MlpCache& cache, const Matrix& output_gradient) {
  const std::size_t layers = params.weights.size();
  if (cache.inputs.size() != layers || cache.pre.size() != layers) {
    throw ConfigError("mlp_backward: cache does not match the network depth");
  }
  if (cache.fingerprint != mlp_fingerprint(params)) {
    throw ConfigError("mlp_backward: stale cache (parameters changed since the forward pass)");
  }
  if (output_gradient.rows() != cache.pre.back().rows() || output_gradient.cols() != params.output_dim()) {
    throw ConfigError("mlp_backward: output gradient shape does not match the forward pass");
  }
  MlpGradients g;
  g.params = MlpParams::zeros_like(params);
  Matrix delta = output_gradient;
  for (std::size_t l = layers; l-- > 0;) {
    g.params.weights[l] = delta.transpose() * cache.inputs[l];
    g.params.biases[l] = delta.colwise().sum();
    Matrix back = delta * params.weights[l];
    if (l > 0) {
      back.array() *= (cache.pre[l - 1].array() > 0.0).cast<double>();
      delta = std::move(back);
    } else {
      g.input = std::move(back);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Shared pieces of the two autoencoders

namespace {

// Reparameterized sample from an encoder head whose output is [means, raw
// log-stds].
struct GaussHead {
  Index dim = 0;
  Matrix mean;
  Matrix raw_logstd;
  Matrix logstd;
  Matrix eps;
  Matrix sample;
};

GaussHead head_sample(const Matrix& raw, Index dim, RngStream* rng) {
  GaussHead h;
  h.dim = dim;
  h.mean = raw.leftCols(dim);
  h.raw_logstd = raw.rightCols(dim);
  h.logstd = h.raw_logstd.cwiseMax(kEncoderLogstdMin).cwiseMin(kEncoderLogstdMax);
  if (rng) {
    h.eps = rng->normal_matrix(raw.rows(), dim);
    h.sample = h.mean.array() + h.logstd.array().exp() * h.eps.array();
  } else {
    h.sample = h.mean;
  }
  return h;
}

double head_kl(const GaussHead& h) {
  return 0.5 * (h.mean.array().square() + (2.0 * h.logstd.array()).exp() - 1.0 - 2.0 * h.logstd.array()).sum();
}

// Gradient with respect to the raw encoder output, given the gradient of the
// objective with respect to the sample; the KL term enters with `-weight`.
Matrix head_backward(const GaussHead& h, const Matrix& d_sample, double weight) {
  Matrix g(h.mean.rows(), 2 * h.dim);
  g.leftCols(h.dim) = d_sample - weight * h.mean;
  Matrix d_logstd = (d_sample.array() * h.eps.array() * h.logstd.array().exp() -
                     weight * ((2.0 * h.logstd.array()).exp() - 1.0))
                        .matrix();
  const auto inside = (h.raw_logstd.array() >= kEncoderLogstdMin && h.raw_logstd.array() <= kEncoderLogstdMax);
  g.rightCols(h.dim) = (d_logstd.array() * inside.cast<double>()).matrix();
  return g;
}

// Σ log N(data | mean, e^ell) over cells. Writes d/dmean (scaled by weight)
// and accumulates d/dell.
double gaussian_loglik(const Matrix& data, const Matrix& mean, double ell, double weight, Matrix& d_mean,
                       double& d_ell, const char* what) {
  const Matrix r = data - mean;
  const double prec = std::exp(-ell);
  const Vector row_sq = r.rowwise().squaredNorm();
  for (Index i = 0; i < row_sq.size(); ++i) {
    if (!std::isfinite(row_sq(i))) {
      throw NumericalError(std::string(what) + ": non-finite reconstruction at row " + std::to_string(i));
    }
  }
  const double cells = static_cast<double>(r.size());
  const double sq = row_sq.sum();
  d_mean = weight * prec * r;
  d_ell += weight * (-0.5 * cells + 0.5 * prec * sq);
  return -0.5 * (cells * (kLog2Pi + ell) + prec * sq);
}

Matrix broadcast_rows(const Matrix& row, Index rows) { return row.replicate(rows, 1); }

template <typename Model>
double grad_sq_norm(const Model& g) {
  double s = 0.0;
  g.for_each_matrix([&](const Matrix& m) { s += m.squaredNorm(); });
  return s;
}

Matrix gather_rows(const Matrix& data, const std::vector<Index>& order, std::size_t begin, std::size_t count) {
  Matrix out(static_cast<Index>(count), data.cols());
  for (std::size_t i = 0; i < count; ++i) out.row(static_cast<Index>(i)) = data.row(order[(begin + i) % order.size()]);
  return out;
}

std::vector<Index> iota_indices(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

double initial_log_sigma2(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  Index count = 0;
  for (const Matrix* m : {&a, &b}) {
    if (m->rows() < 2) continue;
    const Matrix c = m->rowwise() - m->colwise().mean();
    total += c.squaredNorm();
    count += c.size();
  }
  const double var = count > 0 ? total / static_cast<double>(count) : 1.0;
  return std::log(std::max(var, 1e-6));
}

void check_options(const CvaeOptions& opts) {
  if (opts.epochs < 0) throw ConfigError("cvae: epochs must be non-negative");
  if (opts.batch < 1) throw ConfigError("cvae: batch must be positive");
  if (!(opts.lr > 0.0)) throw ConfigError("cvae: lr must be positive");
}

// Shared ADAM loop. `step(rng, begin)` returns (elbo, gradient) for the
// minibatch starting at `begin` of the epoch's permutation.
template <typename Model, typename Step>
std::vector<TraceEntry> train(Model& model, const CvaeOptions& opts, Index rows, RngStream& rng, Step&& step) {
  std::vector<TraceEntry> trace;
  AdamState adam;
  adam.lr = opts.lr;
  const auto start = std::chrono::steady_clock::now();
  const Index steps = (rows + opts.batch - 1) / opts.batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    RngStream epoch_rng = rng.split(static_cast<std::uint64_t>(epoch));
    double elbo_sum = 0.0;
    double grad_sum = 0.0;
    step.begin_epoch(epoch_rng);
    for (Index s = 0; s < steps; ++s) {
      auto [elbo, grad] = step(epoch_rng, s);
      if (!std::isfinite(elbo)) {
        throw NumericalError("cvae: non-finite objective in epoch " + std::to_string(epoch));
      }
      std::vector<Matrix*> values;
      std::vector<const Matrix*> grads;
      model.for_each_matrix([&](Matrix& m) { values.push_back(&m); });
      grad.for_each_matrix([&](const Matrix& m) { grads.push_back(&m); });
      adam_step(adam, values, grads, true);
      elbo_sum += elbo;
      grad_sum += std::sqrt(grad_sq_norm(grad));
    }
    bool finite = true;
    model.for_each_matrix([&](const Matrix& m) { finite = finite && m.allFinite(); });
    if (!finite) throw NumericalError("cvae: parameters diverged in epoch " + std::to_string(epoch));
    TraceEntry e;
    e.iter = epoch + 1;
    e.objective = steps > 0 ? elbo_sum / static_cast<double>(steps) : 0.0;
    e.grad_norm = steps > 0 ? grad_sum / static_cast<double>(steps) : 0.0;
    e.wall_ms = opts.deterministic
                    ? 0.0
                    : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    trace.push_back(e);
  }
  return trace;
}

}  // namespace

// ---------------------------------------------------------------------------
// cVAE

void CvaeModel::validate() const {
  if (d < 1 || k < 1 || t < 1) throw ConfigError("cvae: d, k and t must be positive");
  shared_decoder.validate();
  target_decoder.validate();
  target_encoder.validate();
  background_encoder.validate();
  if (shared_decoder.input_dim() != k || shared_decoder.output_dim() != d) {
    throw ConfigError("cvae: shared decoder must map k to d");
  }
  if (target_decoder.input_dim() != t || target_decoder.output_dim() != d) {
    throw ConfigError("cvae: target decoder must map t to d");
  }
  if (target_encoder.input_dim() != d || target_encoder.output_dim() != 2 * (k + t)) {
    throw ConfigError("cvae: target encoder must map d to 2(k + t)");
  }
  if (background_encoder.input_dim() != d || background_encoder.output_dim() != 2 * k) {
    throw ConfigError("cvae: background encoder must map d to 2k");
  }
  if (mu_x.rows() != 1 || mu_x.cols() != d || mu_y.rows() != 1 || mu_y.cols() != d) {
    throw ConfigError("cvae: means must be 1 x d");
  }
  if (log_sigma2.size() != 1 || !std::isfinite(log_sigma2(0, 0))) throw ConfigError("cvae: bad log sigma2");
}

CvaeModel CvaeModel::create(Index d, Index k, Index t, RngStream& rng) {
  if (d < 1 || k < 1 || t < 1) throw ConfigError("cvae: d, k and t must be positive");
  CvaeModel m;
  m.d = d;
  m.k = k;
  m.t = t;
  RngStream r = rng.substream("cvae-init");
  m.shared_decoder = MlpParams::decoder(k, d, r);
  m.target_decoder = MlpParams::decoder(t, d, r);
  m.target_encoder = MlpParams::encoder(d, 2 * (k + t), r);
  m.background_encoder = MlpParams::encoder(d, 2 * k, r);
  m.mu_x = Matrix::Zero(1, d);
  m.mu_y = Matrix::Zero(1, d);
  m.log_sigma2 = Matrix::Zero(1, 1);
  return m;
}

CvaeModel CvaeModel::zeros_like(const CvaeModel& other) {
  CvaeModel m;
  m.d = other.d;
  m.k = other.k;
  m.t = other.t;
  m.shared_decoder = MlpParams::zeros_like(other.shared_decoder);
  m.target_decoder = MlpParams::zeros_like(other.target_decoder);
  m.target_encoder = MlpParams::zeros_like(other.target_encoder);
  m.background_encoder = MlpParams::zeros_like(other.background_encoder);
  m.mu_x = Matrix::Zero(1, other.d);
  m.mu_y = Matrix::Zero(1, other.d);
  m.log_sigma2 = Matrix::Zero(1, 1);
  return m;
}

void CvaeModel::for_each_matrix(const std::function<void(Matrix&)>& f) {
  shared_decoder.for_each_matrix(f);
  target_decoder.for_each_matrix(f);
  target_encoder.for_each_matrix(f);
  background_encoder.for_each_matrix(f);
  f(mu_x);
  f(mu_y);
  f(log_sigma2);
}

void CvaeModel::for_each_matrix(const std::function<void(const Matrix&)>& f) const {
  shared_decoder.for_each_matrix(f);
  target_decoder.for_each_matrix(f);
  target_encoder.for_each_matrix(f);
  background_encoder.for_each_matrix(f);
  f(mu_x);
  f(mu_y);
  f(log_sigma2);
}

Matrix decode(const CvaeModel& model, const Matrix& z, const Matrix& t, bool is_target) {
  if (z.cols() != model.k) throw ConfigError("decode: z must have k columns");
  if (!is_target) {
    if (t.size() != 0) throw ConfigError("decode: the background path takes no target latent");
    return mlp_forward(model.shared_decoder, z) + broadcast_rows(model.mu_y, z.rows());
  }
  if (t.cols() != model.t || t.rows() != z.rows()) throw ConfigError("decode: t must be rows(z) x t");
  return mlp_forward(model.shared_decoder, z) + mlp_forward(model.target_decoder, t) +
         broadcast_rows(model.mu_x, z.rows());
}

Encoding encode_target(const CvaeModel& model, const Matrix& x) {
  const GaussHead h = head_sample(mlp_forward(model.target_encoder, x), model.k + model.t, nullptr);
  return {h.mean, h.logstd};
}

Encoding encode_background(const CvaeModel& model, const Matrix& y) {
  const GaussHead h = head_sample(mlp_forward(model.background_encoder, y), model.k, nullptr);
  return {h.mean, h.logstd};
}

CvaeElbo cvae_elbo_and_gradients(const CvaeModel& model, const Matrix& target_batch,
                                 const Matrix& background_batch, RngStream& rng, double target_weight,
                                 double background_weight) {
  const Index k = model.k;
  const Index t = model.t;
  if ((target_batch.rows() > 0 && target_batch.cols() != model.d) ||
      (background_batch.rows() > 0 && background_batch.cols() != model.d)) {
    throw ConfigError("cvae: batch width does not match the model");
  }
  if (!target_batch.allFinite() || !background_batch.allFinite()) {
    throw DataError("cvae: batches must be complete");
  }
  CvaeElbo out;
  out.grad = CvaeModel::zeros_like(model);
  const double ell = model.log_sigma2(0, 0);
  double d_ell = 0.0;

  auto add_into = [](MlpParams& acc, const MlpParams& g) {
    for (std::size_t l = 0; l < acc.weights.size(); ++l) {
      acc.weights[l] += g.weights[l];
      acc.biases[l] += g.biases[l];
    }
  };

  if (target_batch.rows() > 0) {
    const Index b = target_batch.rows();
    MlpCache enc_cache, s_cache, t_cache;
    const GaussHead h = head_sample(mlp_forward(model.target_encoder, target_batch, &enc_cache), k + t, &rng);
    const Matrix z = h.sample.leftCols(k);
    const Matrix tt = h.sample.rightCols(t);
    const Matrix mean = mlp_forward(model.shared_decoder, z, &s_cache) +
                        mlp_forward(model.target_decoder, tt, &t_cache) + broadcast_rows(model.mu_x, b);
    Matrix d_mean;
    const double ll = gaussian_loglik(target_batch, mean, ell, target_weight, d_mean, d_ell, "cvae target");
    const double kl = head_kl(h);
    out.reconstruction += target_weight * ll;
    out.kl += target_weight * kl;

    out.grad.mu_x += d_mean.colwise().sum();
    const MlpGradients gs = mlp_backward(model.shared_decoder, s_cache, d_mean);
    const MlpGradients gt = mlp_backward(model.target_decoder, t_cache, d_mean);
    add_into(out.grad.shared_decoder, gs.params);
    add_into(out.grad.target_decoder, gt.params);
    Matrix d_sample(b, k + t);
    d_sample.leftCols(k) = gs.input;
    d_sample.rightCols(t) = gt.input;
    const MlpGradients ge = mlp_backward(model.target_encoder, enc_cache, head_backward(h, d_sample, target_weight));
    add_into(out.grad.target_encoder, ge.params);
  }

  if (background_batch.rows() > 0) {
    const Index b = background_batch.rows();
    MlpCache enc_cache, s_cache;
    const GaussHead h = head_sample(mlp_forward(model.background_encoder, background_batch, &enc_cache), k, &rng);
    const Matrix mean = mlp_forward(model.shared_decoder, h.sample, &s_cache) + broadcast_rows(model.mu_y, b);
    Matrix d_mean;
    const double ll =
        gaussian_loglik(background_batch, mean, ell, background_weight, d_mean, d_ell, "cvae background");
    const double kl = head_kl(h);
    out.reconstruction += background_weight * ll;
    out.kl += background_weight * kl;

    out.grad.mu_y += d_mean.colwise().sum();
    const MlpGradients gs = mlp_backward(model.shared_decoder, s_cache, d_mean);
    add_into(out.grad.shared_decoder, gs.params);
    const MlpGradients ge =
        mlp_backward(model.background_encoder, enc_cache, head_backward(h, gs.input, background_weight));
    add_into(out.grad.background_encoder, ge.params);
  }

  out.grad.log_sigma2(0, 0) = d_ell;
  out.elbo = out.reconstruction - out.kl;
  return out;
}

namespace {

struct CvaeStep {
  const CvaeModel& model;
  const ContrastivePair& pair;
  Index batch;
  std::vector<Index> target_order;
  std::vector<Index> background_order;

  void begin_epoch(RngStream& rng) {
    rng.shuffle(target_order);
    rng.shuffle(background_order);
  }

  std::pair<double, CvaeModel> operator()(RngStream& rng, Index step) {
    const std::size_t begin = static_cast<std::size_t>(step * batch);
    const std::size_t tb = std::min(static_cast<std::size_t>(batch), target_order.size() - begin);
    const std::size_t bb = std::min(static_cast<std::size_t>(batch), background_order.size());
    const Matrix x = gather_rows(pair.target, target_order, begin, tb);
    const Matrix y = gather_rows(pair.background, background_order, begin, bb);
    const double wt = static_cast<double>(pair.n()) / static_cast<double>(tb);
    const double wb = static_cast<double>(pair.m()) / static_cast<double>(bb);
    CvaeElbo e = cvae_elbo_and_gradients(model, x, y, rng, wt, wb);
    return {e.elbo, std::move(e.grad)};
  }
};

}  // namespace

CvaeFit fit_cvae(const ContrastivePair& pair, const CvaeOptions& opts) {
  pair.validate();
  check_options(opts);
  if (!pair.complete()) throw DataError("fit_cvae: data must be complete");
  if (pair.n() < 1 || pair.m() < 1) throw DataError("fit_cvae: both sets need rows");
  RngStream rng(opts.seed);
  CvaeFit fit;
  fit.model = CvaeModel::create(pair.dim(), opts.k, opts.t, rng);
  fit.model.mu_x = pair.target.colwise().mean();
  fit.model.mu_y = pair.background.colwise().mean();
  fit.model.log_sigma2(0, 0) = initial_log_sigma2(pair.target, pair.background);

  CvaeStep step{fit.model, pair, opts.batch, iota_indices(pair.n()), iota_indices(pair.m())};
  RngStream train_rng = rng.substream("cvae-train");
  fit.trace = train(fit.model, opts, pair.n(), train_rng, step);

  const Encoding te = encode_target(fit.model, pair.target);
  const Encoding be = encode_background(fit.model, pair.background);
  fit.target_z = te.mean.leftCols(opts.k);
  fit.target_t = te.mean.rightCols(opts.t);
  fit.background_z = be.mean;
  return fit;
}

Matrix sample_generative(const CvaeModel& model, bool target, Index count, RngStream& rng) {
  if (count < 0) throw ConfigError("sample_generative: count must be non-negative");
  const Matrix z = rng.normal_matrix(count, model.k);
  if (!target) return decode(model, z, Matrix(), false);
  const Matrix t = rng.normal_matrix(count, model.t);
  return decode(model, z, t, true);
}

// ---------------------------------------------------------------------------
// Plain VAE

VaeModel VaeModel::create(Index d, Index latent, RngStream& rng) {
  if (d < 1 || latent < 1) throw ConfigError("vae: d and latent must be positive");
  VaeModel m;
  m.d = d;
  m.latent = latent;
  RngStream r = rng.substream("vae-init");
  m.decoder = MlpParams::decoder(latent, d, r);
  m.encoder = MlpParams::encoder(d, 2 * latent, r);
  m.mu = Matrix::Zero(1, d);
  m.log_sigma2 = Matrix::Zero(1, 1);
  return m;
}

VaeModel VaeModel::zeros_like(const VaeModel& other) {
  VaeModel m;
  m.d = other.d;
  m.latent = other.latent;
  m.decoder = MlpParams::zeros_like(other.decoder);
  m.encoder = MlpParams::zeros_like(other.encoder);
  m.mu = Matrix::Zero(1, other.d);
  m.log_sigma2 = Matrix::Zero(1, 1);
  return m;
}

void VaeModel::for_each_matrix(const std::function<void(Matrix&)>& f) {
  decoder.for_each_matrix(f);
  encoder.for_each_matrix(f);
  f(mu);
  f(log_sigma2);
}

void VaeModel::for_each_matrix(const std::function<void(const Matrix&)>& f) const {
  decoder.for_each_matrix(f);
  encoder.for_each_matrix(f);
  f(mu);
  f(log_sigma2);
}

VaeElbo vae_elbo_and_gradients(const VaeModel& model, const Matrix& batch, RngStream& rng, double weight) {
  if (batch.rows() > 0 && batch.cols() != model.d) throw ConfigError("vae: batch width does not match the model");
  VaeElbo out;
  out.grad = VaeModel::zeros_like(model);
  if (batch.rows() == 0) return out;
  MlpCache enc_cache, dec_cache;
  const GaussHead h = head_sample(mlp_forward(model.encoder, batch, &enc_cache), model.latent, &rng);
  const Matrix mean = mlp_forward(model.decoder, h.sample, &dec_cache) + broadcast_rows(model.mu, batch.rows());
  Matrix d_mean;
  double d_ell = 0.0;
  const double ll = gaussian_loglik(batch, mean, model.log_sigma2(0, 0), weight, d_mean, d_ell, "vae");
  out.elbo = weight * (ll - head_kl(h));
  out.grad.mu = d_mean.colwise().sum();
  out.grad.log_sigma2(0, 0) = d_ell;
  const MlpGradients gd = mlp_backward(model.decoder, dec_cache, d_mean);
  out.grad.decoder = gd.params;
  out.grad.encoder = mlp_backward(model.encoder, enc_cache, head_backward(h, gd.input, weight)).params;
  return out;
}

namespace {

struct VaeStep {
  const VaeModel& model;
  const Matrix& data;
  Index batch;
  std::vector<Index> order;

  void begin_epoch(RngStream& rng) { rng.shuffle(order); }

  std::pair<double, VaeModel> operator()(RngStream& rng, Index step) {
    const std::size_t begin = static_cast<std::size_t>(step * batch);
    const std::size_t count = std::min(static_cast<std::size_t>(batch), order.size() - begin);
    const Matrix x = gather_rows(data, order, begin, count);
    VaeElbo e = vae_elbo_and_gradients(model, x, rng, static_cast<double>(data.rows()) / static_cast<double>(count));
    return {e.elbo, std::move(e.grad)};
  }
};

}  // namespace

VaeFit fit_vae(const Matrix& data, Index latent, const CvaeOptions& opts) {
  check_options(opts);
  if (data.rows() < 1) throw DataError("fit_vae: no rows");
  if (!data.allFinite()) throw DataError("fit_vae: data must be complete");
  RngStream rng(opts.seed);
  VaeFit fit;
  fit.model = VaeModel::create(data.cols(), latent, rng);
  fit.model.mu = data.colwise().mean();
  fit.model.log_sigma2(0, 0) = initial_log_sigma2(data, Matrix());
  VaeStep step{fit.model, data, opts.batch, iota_indices(data.rows())};
  RngStream train_rng = rng.substream("vae-train");
  fit.trace = train(fit.model, opts, data.rows(), train_rng, step);
  fit.latents = head_sample(mlp_forward(fit.model.encoder, data), latent, nullptr).mean;
  return fit;
}

}  // namespace clvm
