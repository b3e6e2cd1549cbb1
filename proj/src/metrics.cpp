#include "clvm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "clvm/errors.hpp"

namespace clvm {

namespace {

KMeansResult lloyd(const Matrix& x, int clusters, RngStream& rng, int max_iter) {
  const Index n = x.rows();
  Matrix centers(clusters, x.cols());
  Vector dist2 = Vector::Constant(n, std::numeric_limits<double>::infinity());

  centers.row(0) = x.row(static_cast<Index>(rng.index(static_cast<std::size_t>(n))));
  for (int c = 1; c < clusters; ++c) {
    for (Index i = 0; i < n; ++i) dist2(i) = std::min(dist2(i), (x.row(i) - centers.row(c - 1)).squaredNorm());
    const double total = dist2.sum();
    Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= dist2(pick);
        if (u < 0.0) break;
      }
    } else {
      pick = static_cast<Index>(rng.index(static_cast<std::size_t>(n)));
    }
    centers.row(c) = x.row(pick);
  }

  KMeansResult out;
  out.labels.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (out.labels[i] != static_cast<int>(best)) {
        out.labels[i] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed && iter > 0) break;
    Matrix sums = Matrix::Zero(clusters, x.cols());
    std::vector<Index> counts(clusters, 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(out.labels[i]) += x.row(i);
      ++counts[out.labels[i]];
    }
    for (int c = 0; c < clusters; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
      } else {
        // Re-seed an empty cluster at the point farthest from its center.
        Index far = 0;
        double worst = -1.0;
        for (Index i = 0; i < n; ++i) {
          const double d2 = (x.row(i) - centers.row(out.labels[i])).squaredNorm();
          if (d2 > worst) {
            worst = d2;
            far = i;
          }
        }
        centers.row(c) = x.row(far);
      }
    }
  }
  out.inertia = 0.0;
  for (Index i = 0; i < n; ++i) out.inertia += (x.row(i) - centers.row(out.labels[i])).squaredNorm();
  out.centers = std::move(centers);
  return out;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int clusters, std::uint64_t seed, int restarts, int max_iter) {
  if (clusters < 1) throw ConfigError("kmeans: clusters must be positive");
  if (points.rows() < clusters) throw DataError("kmeans: fewer points than clusters");
  RngStream rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    RngStream sub = rng.split(static_cast<std::uint64_t>(r));
    KMeansResult run = lloyd(points, clusters, sub, max_iter);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw DataError("adjusted_rand_index: label vectors differ in length");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  auto c2 = [](double v) { return v * (v - 1.0) / 2.0; };
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, v] : table) index += c2(v);
  for (const auto& [key, v] : rows) sum_a += c2(v);
  for (const auto& [key, v] : cols) sum_b += c2(v);
  const double expected = sum_a * sum_b / c2(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double silhouette_score(const Matrix& points, const std::vector<int>& labels) {
  const Index n = points.rows();
  if (static_cast<Index>(labels.size()) != n) throw DataError("silhouette_score: label count mismatch");
  std::map<int, Index> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw DataError("silhouette_score: need at least two clusters");
  std::vector<int> ids;
  for (const auto& [l, c] : sizes) ids.push_back(l);
  std::map<int, std::size_t> slot;
  for (std::size_t c = 0; c < ids.size(); ++c) slot[ids[c]] = c;

  double total = 0.0;
  std::vector<double> sums(ids.size());
  for (Index i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[slot[labels[j]]] += (points.row(i) - points.row(j)).norm();
    }
    const std::size_t own = slot[labels[i]];
    const Index own_size = sizes[labels[i]];
    if (own_size < 2) continue;
    const double a = sums[own] / static_cast<double>(own_size - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(sizes[ids[c]]));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

double procrustes_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DataError("procrustes_distance: row counts differ");
  const Index cols = std::max(a.cols(), b.cols());
  Matrix pa = Matrix::Zero(a.rows(), cols);
  Matrix pb = Matrix::Zero(b.rows(), cols);
  pa.leftCols(a.cols()) = a;
  pb.leftCols(b.cols()) = b;
  pa = pa.rowwise() - pa.colwise().mean();
  pb = pb.rowwise() - pb.colwise().mean();
  const double na = pa.norm();
  const double nb = pb.norm();
  if (na == 0.0 || nb == 0.0) throw DataError("procrustes_distance: configuration has zero spread");
  pa /= na;
  pb /= nb;
  Eigen::JacobiSVD<Matrix> svd(pa.transpose() * pb);
  const double trace = svd.singularValues().sum();
  return std::max(0.0, 1.0 - trace * trace);
}

double kmeans_ari(const Matrix& points, const std::vector<int>& labels, std::uint64_t seed) {
  const std::set<int> distinct(labels.begin(), labels.end());
  const KMeansResult km = kmeans(points, static_cast<int>(distinct.size()), seed);
  return adjusted_rand_index(km.labels, labels);
}

}  // namespace clvm
