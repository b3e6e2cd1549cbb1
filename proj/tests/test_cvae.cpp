#include <doctest.h>

#include <cmath>
#include <vector>

#include "clvm/cvae.hpp"
#include "clvm/errors.hpp"

using namespace clvm;

namespace {

// Worst relative central-difference error over up to `per_block` evenly
// spaced entries of each block (0 = every entry).
template <typename F>
double worst_fd_error(const std::vector<Matrix*>& values, const std::vector<const Matrix*>& grads, F objective,
                      Index per_block = 0) {
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t b = 0; b < values.size(); ++b) {
    const Index size = values[b]->size();
    const Index stride = per_block > 0 ? std::max<Index>(1, size / per_block) : 1;
    for (Index i = 0; i < size; i += stride) {
      double& x = values[b]->data()[i];
      const double old = x;
      x = old + h;
      const double up = objective();
      x = old - h;
      const double dn = objective();
      x = old;
      const double fd = (up - dn) / (2 * h);
      const double an = grads[b]->data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("MLP backward pass matches finite differences") {
  RngStream rng(1);
  MlpParams mlp = MlpParams::create({4, 6, 3}, rng);
  const Matrix input = rng.normal_matrix(5, 4);
  const Matrix out_weights = rng.normal_matrix(5, 3);
  MlpCache cache;
  mlp_forward(mlp, input, &cache);
  const MlpGradients g = mlp_backward(mlp, cache, out_weights);
  std::vector<Matrix*> values;
  std::vector<const Matrix*> grads;
  mlp.for_each_matrix([&](Matrix& m) { values.push_back(&m); });
  g.params.for_each_matrix([&](const Matrix& m) { grads.push_back(&m); });
  const double worst =
      worst_fd_error(values, grads, [&] { return (mlp_forward(mlp, input).array() * out_weights.array()).sum(); });
  CHECK(worst < 1e-6);
}

TEST_CASE("backward on a stale cache throws") {
  RngStream rng(2);
  MlpParams mlp = MlpParams::create({3, 4, 2}, rng);
  MlpCache cache;
  const Matrix out = mlp_forward(mlp, rng.normal_matrix(2, 3), &cache);
  mlp.weights[0](0, 0) += 1.0;
  CHECK_THROWS_AS(mlp_backward(mlp, cache, Matrix::Ones(out.rows(), out.cols())), ConfigError);
}

TEST_CASE("MLP input width is checked") {
  RngStream rng(3);
  const MlpParams mlp = MlpParams::create({3, 2}, rng);
  CHECK_THROWS_AS(mlp_forward(mlp, Matrix(Matrix::Zero(1, 4))), ConfigError);
  CHECK_THROWS_AS(MlpParams::create({3}, rng), ConfigError);
}

TEST_CASE("encoder log-std is clamped to its bounds") {
  RngStream rng(4);
  CvaeModel m = CvaeModel::create(5, 2, 1, rng);
  Matrix& bias = m.target_encoder.biases.back();
  bias.rightCols(3).setConstant(100.0);
  CHECK(encode_target(m, rng.normal_matrix(4, 5)).logstd.maxCoeff() == kEncoderLogstdMax);
  bias.rightCols(3).setConstant(-100.0);
  CHECK(encode_target(m, rng.normal_matrix(4, 5)).logstd.minCoeff() == kEncoderLogstdMin);
}

TEST_CASE("decoding a background row with a target latent throws") {
  RngStream rng(5);
  const CvaeModel m = CvaeModel::create(4, 2, 1, rng);
  CHECK_THROWS_AS(decode(m, Matrix::Zero(3, 2), Matrix::Zero(3, 1), false), ConfigError);
  CHECK(decode(m, Matrix::Zero(3, 2), Matrix(), false).rows() == 3);
  CHECK_THROWS_AS(decode(m, Matrix::Zero(3, 2), Matrix::Zero(2, 1), true), ConfigError);
}

TEST_CASE("background reconstruction ignores the target decoder") {
  RngStream rng(6);
  CvaeModel m = CvaeModel::create(4, 2, 1, rng);
  const Matrix z = rng.normal_matrix(3, 2);
  const Matrix before = decode(m, z, Matrix(), false);
  m.target_decoder.for_each_matrix([](Matrix& w) { w.setConstant(3.0); });
  CHECK((decode(m, z, Matrix(), false) - before).norm() == 0.0);
}

TEST_CASE("cVAE ELBO gradient matches finite differences on a slice of coordinates") {
  RngStream rng(7);
  CvaeModel m = CvaeModel::create(4, 2, 1, rng);
  const Matrix x = rng.normal_matrix(6, 4), y = rng.normal_matrix(5, 4);
  RngStream g_rng(11);
  const CvaeElbo e = cvae_elbo_and_gradients(m, x, y, g_rng);
  std::vector<Matrix*> values;
  std::vector<const Matrix*> grads;
  m.for_each_matrix([&](Matrix& v) { values.push_back(&v); });
  e.grad.for_each_matrix([&](const Matrix& v) { grads.push_back(&v); });
  const double worst = worst_fd_error(values, grads, [&] {
    RngStream r(11);
    return cvae_elbo_and_gradients(m, x, y, r).elbo;
  }, 8);
  CHECK(worst < 1e-6);
}

TEST_CASE("fit_cvae is reproducible and refuses incomplete data") {
  ContrastivePair pair = standardize(generate_synthetic_subgroups(10, 40, 1), ScalingMode::zscore).first;
  CvaeOptions opts;
  opts.k = 3;
  opts.t = 2;
  opts.epochs = 2;
  opts.batch = 16;
  opts.seed = 5;
  opts.deterministic = true;
  const CvaeFit a = fit_cvae(pair, opts);
  const CvaeFit b = fit_cvae(pair, opts);
  CHECK((a.target_t - b.target_t).norm() == 0.0);
  CHECK(a.target_t.rows() == pair.n());
  CHECK(a.target_z.cols() == 3);
  CHECK(a.trace.size() == 2u);
  pair.target_mask(0, 0) = false;
  CHECK_THROWS_AS(fit_cvae(pair, opts), DataError);
}

TEST_CASE("VAE baseline produces latents of the requested width") {
  RngStream rng(8);
  CvaeOptions opts;
  opts.epochs = 2;
  opts.batch = 8;
  const VaeFit f = fit_vae(rng.normal_matrix(20, 5), 3, opts);
  CHECK(f.latents.rows() == 20);
  CHECK(f.latents.cols() == 3);
  CHECK(f.latents.allFinite());
}
