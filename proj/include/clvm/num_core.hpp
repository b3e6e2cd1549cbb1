#pragma once

// Dense linear algebra, distributions and seeded sampling shared by every
// model in the library, plus the generic Gaussian-conditioning and
// quadrature routines used as independent checks of the model-specific code.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string_view>

#include <Eigen/Dense>

namespace clvm {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Eigendecomposition of a symmetric matrix. Values are sorted descending and
/// every eigenvector is sign-normalized so its first nonzero component is
/// positive.
struct SymEig {
  Vector values;
  Matrix vectors;  // columns are eigenvectors
};

SymEig sym_eig(const Matrix& a);

bool is_symmetric(const Matrix& a, double tol = 1e-10);
Matrix symmetrize(const Matrix& a);

/// Cholesky factorization of (A+Aᵀ)/2. On failure a diagonal jitter of 1e-10
/// is added and escalated ×10 up to 1e-4; beyond that a NumericalError is
/// thrown. `jitter_used` receives the jitter that succeeded (0 if none).
Eigen::LLT<Matrix> cholesky_jittered(const Matrix& a, double* jitter_used = nullptr);

/// Inverse of an SPD matrix via the jittered Cholesky factor.
Matrix spd_inverse(const Matrix& a);

/// Log-determinant from a Cholesky factor.
double log_det(const Eigen::LLT<Matrix>& llt);

struct GaussianSpec {
  Vector mean;
  Matrix cov;
};

/// Exact conditional of the unobserved coordinates given the observed ones
/// (Schur complement). The returned spec is ordered like the unobserved
/// coordinates in ascending index order.
GaussianSpec gaussian_condition(const GaussianSpec& joint, std::span<const Index> observed,
                                const Vector& observed_values);

double gauss_logpdf(const Vector& x, const GaussianSpec& spec);

/// Adaptive Gauss–Kronrod integration. Infinite limits are allowed. Throws
/// NumericalError if the error estimate stays above
/// `tolerance * max(1, |result|)`.
double quadrature_1d(const std::function<double(double)>& f, double lower, double upper,
                     double tolerance = 1e-10);

// Scalar densities, all on the log scale.
double log_normal_pdf(double x, double mean, double var);
double log_inverse_gamma_pdf(double x, double shape, double scale);
double log_half_cauchy_pdf(double x, double scale);
/// Student's t with ν degrees of freedom and precision λ.
double log_student_t_pdf(double x, double mean, double nu, double precision);
double normal_cdf(double x);

/// Seeded stream of random draws. Equal seeds give bit-identical sequences.
/// A stream is owned by one task; concurrent tasks derive their own streams
/// with split() or substream().
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  double normal();
  double uniform();
  double uniform(double lower, double upper);
  std::uint64_t next_u64();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  Matrix normal_matrix(Index rows, Index cols);
  Vector normal_vector(Index size);

  RngStream split(std::uint64_t task_index) const;
  RngStream substream(std::string_view name) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

/// Runs `body(chunk, begin, end)` over fixed-size chunks of [0, count). Chunk
/// boundaries depend only on `chunk_size`, so per-chunk partial results
/// reduced in chunk order are identical for any thread count.
void for_each_chunk(Index count, Index chunk_size, int threads,
                    const std::function<void(Index, Index, Index)>& body);

inline Index chunk_count(Index count, Index chunk_size) {
  return count == 0 ? 0 : (count + chunk_size - 1) / chunk_size;
}

}  // namespace clvm
