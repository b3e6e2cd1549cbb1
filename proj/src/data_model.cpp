#include "clvm/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "clvm/errors.hpp"

namespace clvm {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

bool is_missing_token(const std::string& s, const MissingPolicy& policy) {
  return std::find(policy.tokens.begin(), policy.tokens.end(), s) != policy.tokens.end();
}

void column_stats(const ContrastivePair& pair, Index col, double& mean, double& var, Index& count) {
  double sum = 0.0;
  count = 0;
  auto accumulate = [&](const Matrix& x, const Mask& mask) {
    for (Index r = 0; r < x.rows(); ++r) {
      if (mask(r, col)) {
        sum += x(r, col);
        ++count;
      }
    }
  };
  accumulate(pair.target, pair.target_mask);
  accumulate(pair.background, pair.background_mask);
  mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
  double ss = 0.0;
  auto accumulate_sq = [&](const Matrix& x, const Mask& mask) {
    for (Index r = 0; r < x.rows(); ++r) {
      if (mask(r, col)) ss += (x(r, col) - mean) * (x(r, col) - mean);
    }
  };
  accumulate_sq(pair.target, pair.target_mask);
  accumulate_sq(pair.background, pair.background_mask);
  var = count > 1 ? ss / static_cast<double>(count - 1) : 0.0;
}

Matrix sample_blocks(const std::vector<FeatureBlock>& blocks, Index rows, RngStream& rng) {
  Index d = 0;
  for (const auto& b : blocks) d += b.width;
  Matrix out(rows, d);
  for (Index r = 0; r < rows; ++r) {
    Index c = 0;
    for (const auto& b : blocks) {
      for (Index j = 0; j < b.width; ++j, ++c) out(r, c) = b.mean + b.stddev * rng.normal();
    }
  }
  return out;
}

// Orthonormal d × r basis from a Gaussian draw.
Matrix random_orthonormal(Index d, Index r, RngStream& rng) {
  Matrix g = rng.normal_matrix(d, r);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(d, r);
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}


// ---------------------------------------------------------------------------

Index ContrastivePair::missing_count() const {
  return static_cast<Index>((!target_mask).count() + (!background_mask).count());
}

void ContrastivePair::validate() const {
  if (target.rows() < 1 || background.rows() < 1) throw DataError("both sets need at least one row");
  if (target.cols() != background.cols()) {
    std::ostringstream msg;
    msg << "feature count mismatch: target has " << target.cols() << ", background has "
        << background.cols();
    throw DataError(msg.str());
  }
  if (target.cols() < 1) throw DataError("data has no columns");
  if (target_mask.rows() != target.rows() || target_mask.cols() != target.cols() ||
      background_mask.rows() != background.rows() || background_mask.cols() != background.cols()) {
    throw DataError("mask shape does not match values");
  }
  auto check_finite = [](const Matrix& x, const Mask& mask, const char* which) {
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        if (mask(r, c) && !std::isfinite(x(r, c))) {
          std::ostringstream msg;
          msg << which << " row " << r << ", column " << c << ": non-finite observed value";
          throw DataError(msg.str());
        }
      }
    }
  };
  check_finite(target, target_mask, "target");
  check_finite(background, background_mask, "background");
  if (!target_labels.empty() && static_cast<Index>(target_labels.size()) != target.rows()) {
    throw DataError("target label count does not match row count");
  }
  if (!background_labels.empty() && static_cast<Index>(background_labels.size()) != background.rows()) {
    throw DataError("background label count does not match row count");
  }
}

ContrastivePair ContrastivePair::from_complete(Matrix target, Matrix background) {
  ContrastivePair p;
  p.target_mask = Mask::Constant(target.rows(), target.cols(), true);
  p.background_mask = Mask::Constant(background.rows(), background.cols(), true);
  p.target = std::move(target);
  p.background = std::move(background);
  return p;
}

// ---------------------------------------------------------------------------
// CSV

CsvTable load_csv(const std::filesystem::path& path, const MissingPolicy& policy) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file (header row required)");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  table.header = split_csv_line(line);
  const std::size_t width = table.header.size();

  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> observed;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() && width > 1) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != width) {
      std::ostringstream msg;
      msg << path.string() << ": row " << line_no << " has " << fields.size() << " fields, expected "
          << width;
      throw DataError(msg.str());
    }
    std::vector<double> values(width);
    std::vector<bool> ok(width);
    for (std::size_t c = 0; c < width; ++c) {
      if (is_missing_token(fields[c], policy)) {
        values[c] = kMissing;
        ok[c] = false;
      } else if (parse_double(fields[c], values[c]) && std::isfinite(values[c])) {
        ok[c] = true;
      } else {
        std::ostringstream msg;
        msg << path.string() << ": row " << line_no << ", column " << (c + 1)
            << ": cannot parse '" << fields[c] << "' as a number";
        throw DataError(msg.str());
      }
    }
    rows.push_back(std::move(values));
    observed.push_back(std::move(ok));
  }
  const Index n = static_cast<Index>(rows.size());
  table.values.resize(n, static_cast<Index>(width));
  table.mask.resize(n, static_cast<Index>(width));
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < static_cast<Index>(width); ++c) {
      table.values(r, c) = rows[r][c];
      table.mask(r, c) = observed[r][c];
    }
  }
  return table;
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const Index d = table.values.cols();
  std::vector<std::string> header = table.header.empty() ? default_header(d) : table.header;
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  const bool has_mask = table.mask.size() == table.values.size();
  for (Index r = 0; r < table.values.rows(); ++r) {
    for (Index c = 0; c < d; ++c) {
      if (c) out << ',';
      if (!has_mask || table.mask(r, c)) out << format_double(table.values(r, c));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> default_header(Index d) {
  std::vector<std::string> h;
  for (Index c = 0; c < d; ++c) h.push_back("f" + std::to_string(c + 1));
  return h;
}

LabelsTable load_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty labels file");
  auto header = split_csv_line(line);
  auto find = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int label_col = find("label");
  const int set_col = find("set");
  if (label_col < 0) throw DataError(path.string() + ": no 'label' column");
  LabelsTable out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      std::ostringstream msg;
      msg << path.string() << ": row " << line_no << " has " << fields.size() << " fields, expected "
          << header.size();
      throw DataError(msg.str());
    }
    double v = 0;
    if (!parse_double(fields[label_col], v) || v != std::floor(v)) {
      std::ostringstream msg;
      msg << path.string() << ": row " << line_no << ": label '" << fields[label_col]
          << "' is not an integer";
      throw DataError(msg.str());
    }
    if (set_col >= 0 && fields[set_col] == "background") {
      out.background.push_back(static_cast<int>(v));
    } else {
      out.target.push_back(static_cast<int>(v));
    }
  }
  return out;
}

void write_labels_csv(const std::filesystem::path& path, const ContrastivePair& pair) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,set,label\n";
  for (Index i = 0; i < pair.n(); ++i) {
    out << i << ",target," << (pair.target_labels.empty() ? 0 : pair.target_labels[i]) << '\n';
  }
  for (Index j = 0; j < pair.m(); ++j) {
    out << j << ",background," << (pair.background_labels.empty() ? 0 : pair.background_labels[j])
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Standardization

const char* to_string(ScalingMode mode) {
  switch (mode) {
    case ScalingMode::none: return "none";
    case ScalingMode::center: return "center";
    case ScalingMode::zscore: return "zscore";
  }
  return "none";
}

ScalingMode parse_scaling_mode(const std::string& name) {
  if (name == "none") return ScalingMode::none;
  if (name == "center") return ScalingMode::center;
  if (name == "zscore") return ScalingMode::zscore;
  throw ConfigError("unknown standardization mode '" + name + "' (expected none|center|zscore)");
}

std::pair<ContrastivePair, ScalingParams> standardize(const ContrastivePair& pair, ScalingMode mode) {
  pair.validate();
  const Index d = pair.dim();
  ScalingParams params;
  params.mode = mode;
  params.center = Vector::Zero(d);
  params.scale = Vector::Ones(d);
  if (mode == ScalingMode::none) return {pair, params};

  for (Index c = 0; c < d; ++c) {
    double mean = 0, var = 0;
    Index count = 0;
    column_stats(pair, c, mean, var, count);
    if (count == 0) throw DataError("column " + std::to_string(c) + " has no observed entries");
    params.center(c) = mean;
    if (mode == ScalingMode::zscore) {
      if (count < 2) {
        throw DataError("column " + std::to_string(c) + " needs at least 2 observed entries for zscore");
      }
      if (var <= 0.0) {
        params.flagged_columns.push_back(c);
        params.warnings.push_back("column " + std::to_string(c) + " has zero variance; scale set to 1");
      } else {
        params.scale(c) = std::sqrt(var);
      }
    }
  }
  return {apply_scaling(pair, params), params};
}

ContrastivePair apply_scaling(const ContrastivePair& pair, const ScalingParams& params) {
  if (params.center.size() != pair.dim()) throw DataError("scaling parameters do not match data width");
  ContrastivePair out = pair;
  auto apply = [&](Matrix& x, const Mask& mask) {
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        if (mask(r, c)) x(r, c) = (x(r, c) - params.center(c)) / params.scale(c);
      }
    }
  };
  apply(out.target, out.target_mask);
  apply(out.background, out.background_mask);
  return out;
}

ContrastivePair invert_scaling(const ContrastivePair& pair, const ScalingParams& params) {
  if (params.center.size() != pair.dim()) throw DataError("scaling parameters do not match data width");
  ContrastivePair out = pair;
  auto apply = [&](Matrix& x, const Mask& mask) {
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        if (mask(r, c)) x(r, c) = x(r, c) * params.scale(c) + params.center(c);
      }
    }
  };
  apply(out.target, out.target_mask);
  apply(out.background, out.background_mask);
  return out;
}

// ---------------------------------------------------------------------------
// Generators

void SyntheticSpec::validate() const {
  if (target_group_sizes.empty() || target_group_sizes.size() != target_groups.size()) {
    throw ConfigError("synthetic spec: one size per target group required");
  }
  if (background_size < 1) throw ConfigError("synthetic spec: background count must be positive");
  auto width = [](const std::vector<FeatureBlock>& blocks) {
    Index w = 0;
    for (const auto& b : blocks) {
      if (b.width < 1) throw ConfigError("synthetic spec: block width must be positive");
      if (!(b.stddev > 0)) throw ConfigError("synthetic spec: block stddev must be positive");
      w += b.width;
    }
    return w;
  };
  const Index d = width(background);
  for (std::size_t g = 0; g < target_groups.size(); ++g) {
    if (target_group_sizes[g] < 1) throw ConfigError("synthetic spec: group counts must be positive");
    if (width(target_groups[g]) != d) throw ConfigError("synthetic spec: block widths differ between groups");
  }
}

SyntheticSpec SyntheticSpec::subgroups(Index n_per_subgroup, Index m_background, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.background_size = m_background;
  spec.target_group_sizes.assign(4, n_per_subgroup);
  const double block1[4] = {0, 0, 6, 6};
  const double block2[4] = {0, 3, 0, 3};
  for (int g = 0; g < 4; ++g) {
    spec.target_groups.push_back({{10, block1[g], 1.0}, {10, block2[g], 1.0}, {10, 0.0, 10.0}});
  }
  spec.background = {{10, 0.0, 3.0}, {10, 0.0, 1.0}, {10, 0.0, 10.0}};
  return spec;
}

ContrastivePair generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  RngStream rng(spec.seed);
  Index n = 0;
  for (Index s : spec.target_group_sizes) n += s;
  Index d = 0;
  for (const auto& b : spec.background) d += b.width;

  Matrix target(n, d);
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  Index row = 0;
  for (std::size_t g = 0; g < spec.target_groups.size(); ++g) {
    Matrix block = sample_blocks(spec.target_groups[g], spec.target_group_sizes[g], rng);
    target.middleRows(row, block.rows()) = block;
    row += block.rows();
    labels.insert(labels.end(), static_cast<std::size_t>(block.rows()), static_cast<int>(g));
  }
  Matrix background = sample_blocks(spec.background, spec.background_size, rng);
  auto pair = ContrastivePair::from_complete(std::move(target), std::move(background));
  pair.target_labels = std::move(labels);
  pair.background_labels.assign(static_cast<std::size_t>(spec.background_size), 0);
  return pair;
}

ContrastivePair generate_synthetic_subgroups(Index n_per_subgroup, Index m_background,
                                             std::uint64_t seed) {
  if (n_per_subgroup < 1 || m_background < 1) throw ConfigError("subgroup counts must be positive");
  return generate_synthetic(SyntheticSpec::subgroups(n_per_subgroup, m_background, seed));
}

ContrastivePair generate_from_model(const ClvmParams& params, const std::vector<Vector>& cluster_means,
                                    Index n, Index m, std::uint64_t seed) {
  params.validate();
  if (n < 1 || m < 1) throw ConfigError("generate_from_model: counts must be positive");
  const Index d = params.dim(), k = params.shared_dim(), t = params.target_dim();
  for (const auto& c : cluster_means) {
    if (c.size() != t) throw ConfigError("generate_from_model: cluster mean has wrong dimension");
  }
  RngStream rng(seed);
  const double noise = std::sqrt(params.sigma2);
  Matrix target(n, d), background(m, d);
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    const int cluster = cluster_means.empty() ? 0 : static_cast<int>(i % cluster_means.size());
    labels[i] = cluster;
    Vector z = rng.normal_vector(k);
    Vector tl = rng.normal_vector(t);
    if (!cluster_means.empty()) tl += cluster_means[cluster];
    Vector e = rng.normal_vector(d);
    target.row(i) = (params.S * z + params.W * tl + params.mu_x + noise * e).transpose();
  }
  for (Index j = 0; j < m; ++j) {
    Vector z = rng.normal_vector(k);
    Vector e = rng.normal_vector(d);
    background.row(j) = (params.S * z + params.mu_y + noise * e).transpose();
  }
  auto pair = ContrastivePair::from_complete(std::move(target), std::move(background));
  pair.target_labels = std::move(labels);
  pair.background_labels.assign(static_cast<std::size_t>(m), 0);
  return pair;
}

PlantedData generate_planted(const PlantedSpec& spec) {
  if (spec.d < 1 || spec.k < 0 || spec.t < 1 || spec.k + spec.t > spec.d) {
    throw ConfigError("generate_planted: need d >= 1, k >= 0, t >= 1, k + t <= d");
  }
  if (!(spec.loading_scale > 0.0) || !(spec.sigma2 >= 0.0)) {
    throw ConfigError("generate_planted: loading_scale must be positive and sigma2 non-negative");
  }
  RngStream rng = RngStream(spec.seed).substream("planted");
  PlantedData out;
  out.truth = ClvmParams::zeros(spec.d, spec.k, spec.t, std::max(spec.sigma2, kSigma2Floor));
  out.truth.S = spec.loading_scale * rng.normal_matrix(spec.d, spec.k);
  out.truth.W = spec.loading_scale * rng.normal_matrix(spec.d, spec.t);
  const double s = spec.separation;
  if (spec.t == 1) {
    for (double a : {-s, s}) out.cluster_means.push_back(Vector::Constant(1, a));
  } else {
    for (double a : {-s, s}) {
      for (double b : {-s, s}) {
        Vector c = Vector::Zero(spec.t);
        c(0) = a;
        c(1) = b;
        out.cluster_means.push_back(c);
      }
    }
  }
  ClvmParams gen = out.truth;
  gen.sigma2 = std::max(spec.sigma2, kSigma2Floor);
  out.pair = generate_from_model(gen, out.cluster_means, spec.n, spec.m, mix_seed(spec.seed, 1));
  return out;
}

ContrastivePair inject_outliers(const ContrastivePair& pair, Index count, double lower, double upper,
                                std::uint64_t seed) {
  if (!(upper >= lower)) throw ConfigError("inject_outliers: bounds out of order");
  if (count < 0) throw ConfigError("inject_outliers: count must be non-negative");
  if (count == 0) return pair;
  RngStream rng(seed);
  ContrastivePair out = pair;
  const Index d = pair.dim();
  auto append = [&](Matrix& x, Mask& mask, std::vector<int>& labels, Index original_rows) {
    Matrix grown(original_rows + count, d);
    grown.topRows(original_rows) = x;
    for (Index r = 0; r < count; ++r) {
      for (Index c = 0; c < d; ++c) grown(original_rows + r, c) = rng.uniform(lower, upper);
    }
    Mask gm(original_rows + count, d);
    gm.topRows(original_rows) = mask;
    gm.bottomRows(count).setConstant(true);
    x = std::move(grown);
    mask = std::move(gm);
    if (labels.empty()) labels.assign(static_cast<std::size_t>(original_rows), 0);
    labels.insert(labels.end(), static_cast<std::size_t>(count), kOutlierLabel);
  };
  append(out.target, out.target_mask, out.target_labels, pair.n());
  append(out.background, out.background_mask, out.background_labels, pair.m());
  return out;
}

Matrix mean_impute(const Matrix& values, const Mask& mask) {
  Matrix out = values;
  for (Index c = 0; c < values.cols(); ++c) {
    double sum = 0.0;
    Index count = 0;
    for (Index r = 0; r < values.rows(); ++r) {
      if (mask(r, c)) {
        sum += values(r, c);
        ++count;
      }
    }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    for (Index r = 0; r < values.rows(); ++r) {
      if (!mask(r, c)) out(r, c) = mean;
    }
  }
  return out;
}

ContrastivePair delete_target_cells(const ContrastivePair& pair, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("delete_target_cells: fraction must be in [0,1)");
  ContrastivePair out = pair;
  const Index n = pair.n(), d = pair.dim();
  std::vector<Index> cells(static_cast<std::size_t>(n * d));
  std::iota(cells.begin(), cells.end(), Index{0});
  RngStream rng(seed);
  rng.shuffle(cells);
  const auto remove = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n * d)));
  for (std::size_t i = 0; i < remove; ++i) {
    const Index r = cells[i] / d, c = cells[i] % d;
    out.target_mask(r, c) = false;
    out.target(r, c) = kMissing;
  }
  return out;
}

ContrastivePair generate_signal_on_noise(const SignalNoiseSpec& spec) {
  if (spec.n < 1 || spec.m < 1 || spec.dim < 1 || spec.classes < 1) {
    throw ConfigError("signal-on-noise: counts must be positive");
  }
  if (spec.signal_rank < 1 || spec.signal_rank > spec.dim || spec.noise_rank < 0 ||
      spec.noise_rank > spec.dim) {
    throw ConfigError("signal-on-noise: ranks must fit in the data dimension");
  }
  RngStream rng(spec.seed);
  const Index d = spec.dim;
  Matrix signal_basis = random_orthonormal(d, spec.signal_rank, rng);
  Matrix noise_basis = random_orthonormal(d, spec.noise_rank, rng);
  // Class codes: corners of a scaled simplex in the signal subspace.
  Matrix codes = Matrix::Zero(spec.signal_rank, spec.classes);
  for (Index c = 0; c < spec.classes; ++c) codes(c % spec.signal_rank, c) = spec.signal_amplitude;
  if (spec.classes > spec.signal_rank) {
    Matrix extra = rng.normal_matrix(spec.signal_rank, spec.classes - spec.signal_rank);
    codes.rightCols(spec.classes - spec.signal_rank) = spec.signal_amplitude * extra;
  }

  auto noise_row = [&]() -> Vector {
    Vector u = rng.normal_vector(spec.noise_rank);
    // Mildly nonlinear shared texture.
    Vector v = u.array() + 0.5 * (u.array().square() - 1.0);
    return spec.noise_scale * noise_basis * v + spec.isotropic_std * rng.normal_vector(d);
  };

  Matrix target(spec.n, d), background(spec.m, d);
  std::vector<int> labels(static_cast<std::size_t>(spec.n));
  for (Index i = 0; i < spec.n; ++i) {
    const Index c = i % spec.classes;
    labels[i] = static_cast<int>(c);
    Vector code = codes.col(c) + spec.signal_jitter * rng.normal_vector(spec.signal_rank);
    target.row(i) = (signal_basis * code + noise_row()).transpose();
  }
  for (Index j = 0; j < spec.m; ++j) background.row(j) = noise_row().transpose();
  auto pair = ContrastivePair::from_complete(std::move(target), std::move(background));
  pair.target_labels = std::move(labels);
  pair.background_labels.assign(static_cast<std::size_t>(spec.m), 0);
  return pair;
}

}  // namespace clvm
