#include "clvm/num_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "clvm/errors.hpp"

namespace clvm {

namespace {

double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

}  // namespace

bool is_symmetric(const Matrix& a, double tol) {
  if (a.rows() != a.cols()) return false;
  return max_abs(a - a.transpose()) <= tol * (1.0 + max_abs(a));
}

Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

SymEig sym_eig(const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw ConfigError("sym_eig: expected a nonempty square matrix");
  }
  if (!is_symmetric(a)) throw ConfigError("sym_eig: matrix is not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(a));
  if (solver.info() != Eigen::Success) throw NumericalError("sym_eig: QL iteration failed");

  const Index n = a.rows();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Vector& values = solver.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return values(i) > values(j); });

  SymEig out{Vector(n), Matrix(n, n)};
  for (Index c = 0; c < n; ++c) {
    out.values(c) = values(order[c]);
    Vector v = solver.eigenvectors().col(order[c]);
    for (Index r = 0; r < n; ++r) {
      if (std::abs(v(r)) > 1e-12) {
        if (v(r) < 0) v = -v;
        break;
      }
    }
    out.vectors.col(c) = v;
  }
  return out;
}

Eigen::LLT<Matrix> cholesky_jittered(const Matrix& a, double* jitter_used) {
  if (a.rows() != a.cols()) throw ConfigError("cholesky: matrix is not square");
  Matrix sym = symmetrize(a);
  if (!sym.allFinite()) throw NumericalError("cholesky: non-finite entries");
  Eigen::LLT<Matrix> llt(sym);
  double jitter = 0.0;
  if (llt.info() != Eigen::Success) {
    for (jitter = 1e-10; jitter <= 1e-4 * (1 + 1e-9); jitter *= 10) {
      llt.compute(sym + jitter * Matrix::Identity(a.rows(), a.cols()));
      if (llt.info() == Eigen::Success) break;
    }
    if (llt.info() != Eigen::Success) {
      throw NumericalError("cholesky: matrix is not positive definite (jitter up to 1e-4 failed)");
    }
  }
  if (jitter_used) *jitter_used = jitter;
  return llt;
}

Matrix spd_inverse(const Matrix& a) {
  auto llt = cholesky_jittered(a);
  return llt.solve(Matrix::Identity(a.rows(), a.cols()));
}

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

GaussianSpec gaussian_condition(const GaussianSpec& joint, std::span<const Index> observed,
                                const Vector& observed_values) {
  const Index dim = joint.mean.size();
  if (joint.cov.rows() != dim || joint.cov.cols() != dim) {
    throw ConfigError("gaussian_condition: covariance shape does not match mean");
  }
  if (static_cast<Index>(observed.size()) != observed_values.size()) {
    throw ConfigError("gaussian_condition: observed index/value count mismatch");
  }
  std::vector<bool> is_observed(static_cast<std::size_t>(dim), false);
  for (Index i : observed) {
    if (i < 0 || i >= dim) throw ConfigError("gaussian_condition: index out of range");
    if (is_observed[i]) throw ConfigError("gaussian_condition: duplicate observed index");
    is_observed[i] = true;
  }
  std::vector<Index> hidden;
  for (Index i = 0; i < dim; ++i) {
    if (!is_observed[i]) hidden.push_back(i);
  }
  const Index no = static_cast<Index>(observed.size());
  const Index nh = static_cast<Index>(hidden.size());

  Matrix soo(no, no), sho(nh, no), shh(nh, nh);
  Vector mo(no), mh(nh);
  for (Index a = 0; a < no; ++a) {
    mo(a) = joint.mean(observed[a]);
    for (Index b = 0; b < no; ++b) soo(a, b) = joint.cov(observed[a], observed[b]);
  }
  for (Index a = 0; a < nh; ++a) {
    mh(a) = joint.mean(hidden[a]);
    for (Index b = 0; b < no; ++b) sho(a, b) = joint.cov(hidden[a], observed[b]);
    for (Index b = 0; b < nh; ++b) shh(a, b) = joint.cov(hidden[a], hidden[b]);
  }
  if (no == 0) return {mh, shh};

  Eigen::LLT<Matrix> llt(symmetrize(soo));
  if (llt.info() != Eigen::Success) {
    throw NumericalError("gaussian_condition: observed-block covariance is singular");
  }
  GaussianSpec out;
  out.mean = mh + sho * llt.solve(observed_values - mo);
  out.cov = symmetrize(shh - sho * llt.solve(sho.transpose()));
  return out;
}

double gauss_logpdf(const Vector& x, const GaussianSpec& spec) {
  const Index d = spec.mean.size();
  if (x.size() != d || spec.cov.rows() != d || spec.cov.cols() != d) {
    throw ConfigError("gauss_logpdf: dimension mismatch");
  }
  Eigen::LLT<Matrix> llt(symmetrize(spec.cov));
  if (llt.info() != Eigen::Success) throw NumericalError("gauss_logpdf: covariance is not positive definite");
  Vector white = llt.matrixL().solve(x - spec.mean);
  return -0.5 * (static_cast<double>(d) * kLog2Pi + log_det(llt) + white.squaredNorm());
}

double quadrature_1d(const std::function<double(double)>& f, double lower, double upper,
                     double tolerance) {
  if (!(upper > lower)) {
    if (upper == lower) return 0.0;
    throw ConfigError("quadrature_1d: upper limit below lower limit");
  }
  double error = 0.0;
  double l1 = 0.0;
  const double value = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      f, lower, upper, 20, tolerance, &error, &l1);
  if (!std::isfinite(value) || error > tolerance * std::max(1.0, std::abs(value))) {
    std::ostringstream msg;
    msg << "quadrature_1d: did not converge (estimate " << value << ", error " << error << ")";
    throw NumericalError(msg.str());
  }
  return value;
}

double log_normal_pdf(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

double log_inverse_gamma_pdf(double x, double shape, double scale) {
  if (!(x > 0)) return -std::numeric_limits<double>::infinity();
  return shape * std::log(scale) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
}

double log_half_cauchy_pdf(double x, double scale) {
  if (x < 0) return -std::numeric_limits<double>::infinity();
  const double u = x / scale;
  return std::log(2.0 / (M_PI * scale)) - std::log1p(u * u);
}

double log_student_t_pdf(double x, double mean, double nu, double precision) {
  const double r = x - mean;
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) +
         0.5 * std::log(precision / (M_PI * nu)) -
         0.5 * (nu + 1.0) * std::log1p(precision * r * r / nu);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// splitmix64 finalizer
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed), engine_(mix_seed(seed, 0)) {}

double RngStream::normal() {
  ++counter_;
  return normal_(engine_);
}

double RngStream::uniform() {
  ++counter_;
  // 53 random bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lower, double upper) { return lower + (upper - lower) * uniform(); }

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return engine_();
}

std::size_t RngStream::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  ++counter_;
  return dist(engine_);
}

Matrix RngStream::normal_matrix(Index rows, Index cols) {
  Matrix out(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) out(r, c) = normal();
  }
  return out;
}

Vector RngStream::normal_vector(Index size) {
  Vector out(size);
  for (Index i = 0; i < size; ++i) out(i) = normal();
  return out;
}

RngStream RngStream::split(std::uint64_t task_index) const {
  return RngStream(mix_seed(seed_, task_index + 0x5851F42D4C957F2DULL));
}

RngStream RngStream::substream(std::string_view name) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return split(h);
}

void for_each_chunk(Index count, Index chunk_size, int threads,
                    const std::function<void(Index, Index, Index)>& body) {
  const Index chunks = chunk_count(count, chunk_size);
  auto run = [&](Index chunk) {
    const Index begin = chunk * chunk_size;
    body(chunk, begin, std::min(count, begin + chunk_size));
  };
  if (threads <= 1 || chunks <= 1) {
    for (Index c = 0; c < chunks; ++c) run(c);
    return;
  }
  const int workers = static_cast<int>(std::min<Index>(threads, chunks));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (Index c = w; c < chunks; c += workers) run(c);
      } catch (...) {
        failures[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
}

}  // namespace clvm
