#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clvm/num_core.hpp"
#include "clvm/params.hpp"

namespace clvm {

/// Target and background observations over the same d features. Missing cells
/// carry a NaN sentinel in the value matrix and `false` in the mask; consumers
/// must branch on the mask.
struct ContrastivePair {
  Matrix target;      // n × d
  Matrix background;  // m × d
  Mask target_mask;   // true = observed
  Mask background_mask;
  std::vector<int> target_labels;  // optional, evaluation only
  std::vector<int> background_labels;

  Index n() const { return target.rows(); }
  Index m() const { return background.rows(); }
  Index dim() const { return target.cols(); }
  bool complete() const { return target_mask.all() && background_mask.all(); }
  Index missing_count() const;

  void validate() const;

  /// Builds a pair with all-true masks.
  static ContrastivePair from_complete(Matrix target, Matrix background);
};

inline constexpr int kOutlierLabel = -1;

// ---------------------------------------------------------------------------
// CSV

struct MissingPolicy {
  std::vector<std::string> tokens{"", "NA", "NaN", "nan"};
};

struct CsvTable {
  std::vector<std::string> header;
  Matrix values;
  Mask mask;
};

CsvTable load_csv(const std::filesystem::path& path, const MissingPolicy& policy = {});
/// Values are written in shortest round-trip form; masked cells are empty.
void write_csv(const std::filesystem::path& path, const CsvTable& table);

/// Reads an integer labels file. Accepts either a single `label` column or the
/// `id,set,label` layout written by write_labels_csv.
struct LabelsTable {
  std::vector<int> target;
  std::vector<int> background;
};
LabelsTable load_labels_csv(const std::filesystem::path& path);
void write_labels_csv(const std::filesystem::path& path, const ContrastivePair& pair);

std::vector<std::string> default_header(Index d);

/// Splits one CSV line on commas; fields are trimmed and unquoted.
std::vector<std::string> split_csv_line(const std::string& line);
/// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Standardization

enum class ScalingMode { none, center, zscore };

struct ScalingParams {
  ScalingMode mode = ScalingMode::none;
  Vector center;
  Vector scale;  // > 0
  std::vector<Index> flagged_columns;  // zero variance under zscore
  std::vector<std::string> warnings;
};

/// Statistics are pooled over observed entries of both sets. Missing entries
/// are left untouched.
std::pair<ContrastivePair, ScalingParams> standardize(const ContrastivePair& pair, ScalingMode mode);
ContrastivePair apply_scaling(const ContrastivePair& pair, const ScalingParams& params);
ContrastivePair invert_scaling(const ContrastivePair& pair, const ScalingParams& params);

const char* to_string(ScalingMode mode);
ScalingMode parse_scaling_mode(const std::string& name);

// ---------------------------------------------------------------------------
// Synthetic generators

struct FeatureBlock {
  Index width;
  double mean;
  double stddev;
};

/// Per-group feature-block distributions. Every group uses the same block
/// widths. Target groups receive labels 0..G-1; background rows get label 0.
struct SyntheticSpec {
  std::vector<Index> target_group_sizes;
  std::vector<std::vector<FeatureBlock>> target_groups;
  Index background_size = 0;
  std::vector<FeatureBlock> background;
  std::uint64_t seed = 0;

  void validate() const;

  /// Four target subgroups A–D and a background, 30 features in three blocks
  /// of ten.
  static SyntheticSpec subgroups(Index n_per_subgroup, Index m_background, std::uint64_t seed);
};

ContrastivePair generate_synthetic(const SyntheticSpec& spec);
ContrastivePair generate_synthetic_subgroups(Index n_per_subgroup = 100, Index m_background = 400,
                                             std::uint64_t seed = 0);

/// Samples from the linear contrastive model with t_i drawn from
/// N(cluster_mean, I), clusters assigned round-robin over target rows.
ContrastivePair generate_from_model(const ClvmParams& params, const std::vector<Vector>& cluster_means,
                                    Index n, Index m, std::uint64_t seed);

/// Random planted model: S and W with iid N(0, loading_scale²) entries, zero
/// means, and four target clusters at (±separation, ±separation) in the first
/// two target coordinates (two clusters at ±separation when t = 1).
struct PlantedSpec {
  Index d = 10;
  Index k = 3;
  Index t = 2;
  Index n = 400;
  Index m = 400;
  double loading_scale = 1.0;
  double separation = 3.0;
  double sigma2 = 1.0;
  std::uint64_t seed = 0;
};

struct PlantedData {
  ContrastivePair pair;
  ClvmParams truth;
  std::vector<Vector> cluster_means;
};

PlantedData generate_planted(const PlantedSpec& spec);

/// Appends `count` rows of iid U[lower, upper] entries to each set; the new
/// rows are labeled kOutlierLabel.
ContrastivePair inject_outliers(const ContrastivePair& pair, Index count, double lower, double upper,
                                std::uint64_t seed);

/// Replaces missing cells by their column mean over observed entries.
Matrix mean_impute(const Matrix& values, const Mask& mask);

/// Deletes round(fraction·n·d) target cells chosen uniformly at random.
ContrastivePair delete_target_cells(const ContrastivePair& pair, double fraction, std::uint64_t seed);

/// Desk-scale stand-in for images of digits on a textured background:
/// target rows carry one of `classes` fixed signal patterns (supported on a
/// low-dimensional subspace) on top of correlated noise shared with the
/// background.
struct SignalNoiseSpec {
  Index n = 1000;
  Index m = 1000;
  Index dim = 16;
  Index classes = 4;
  Index signal_rank = 4;
  double signal_amplitude = 3.0;
  double signal_jitter = 0.3;
  Index noise_rank = 8;
  double noise_scale = 1.0;
  double isotropic_std = 0.3;
  std::uint64_t seed = 0;
};

ContrastivePair generate_signal_on_noise(const SignalNoiseSpec& spec);

}  // namespace clvm
