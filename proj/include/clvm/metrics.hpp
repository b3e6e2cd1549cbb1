#pragma once

// Evaluation metrics for latent embeddings.

#include <cstdint>
#include <vector>

#include "clvm/num_core.hpp"

namespace clvm {

struct KMeansResult {
  std::vector<int> labels;
  Matrix centers;  // clusters × dims
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia is returned.
KMeansResult kmeans(const Matrix& points, int clusters, std::uint64_t seed, int restarts = 10,
                    int max_iter = 300);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Mean silhouette coefficient over all points (Euclidean distance). Points in
/// singleton clusters contribute 0.
double silhouette_score(const Matrix& points, const std::vector<int>& labels);

/// Procrustes disparity in [0, 1]: both configurations are centered and scaled
/// to unit Frobenius norm, then b is optimally rotated (reflections allowed)
/// onto a. Column counts may differ; the narrower one is zero-padded.
double procrustes_distance(const Matrix& a, const Matrix& b);

/// Convenience: ARI of k-means(points, number of distinct labels) vs labels.
double kmeans_ari(const Matrix& points, const std::vector<int>& labels, std::uint64_t seed);

}  // namespace clvm
