#pragma once

// Run configuration, model artifacts and their JSON / CSV forms. This is the
// layer the C API wraps: every command of the command-line tool is a call
// into here.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clvm/baselines.hpp"
#include "clvm/cvae.hpp"
#include "clvm/data_model.hpp"
#include "clvm/params.hpp"
#include "clvm/vi_engine.hpp"

namespace clvm {

using Json = nlohmann::ordered_json;

inline constexpr int kModelFormatVersion = 1;

enum class Method { em, vi, cvae, cpca };
const char* to_string(Method m);
Method parse_method(const std::string& s);

/// Options for one fit. Keys absent from the JSON keep their defaults;
/// unknown keys are rejected. `max_iter`, `rel_tol` and `lr` default per
/// method and are written out resolved.
struct RunConfig {
  Method method = Method::em;
  Index k = 2;
  Index t = 2;
  ScalingMode scaling = ScalingMode::zscore;
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = false;
  bool timing = false;  // record wall-clock time in traces

  std::optional<int> max_iter;
  std::optional<double> rel_tol;
  std::optional<double> lr;

  Likelihood likelihood = Likelihood::gaussian;
  double student_a = 2.0;
  WPrior w_prior = WPrior::none;
  double rho = 0.0;
  std::vector<int> group_ids;
  double horseshoe_b = 1.0;
  SPrior s_prior = SPrior::none;
  double ard_a0 = 1e-3;
  double ard_b0 = 1e-3;
  NoisePrior noise_prior = NoisePrior::none;
  double noise_a = 1.0;
  double noise_b = 1.0;
  int n_mc = 1;
  int eval_mc = 64;
  double prune_delta = 1e-3;
  double prune_p0 = 0.9;

  int epochs = 30;
  Index batch = 64;

  double alpha = 1.0;

  // Input and output locations; used by the command-line tool only.
  std::string target;
  std::string background;
  std::string labels;
  std::string out_dir;

  static RunConfig from_json(const Json& j);
  Json to_json() const;
  void validate() const;

  int resolved_max_iter() const;
  double resolved_rel_tol() const;
  double resolved_lr() const;
  ModelSpec model_spec(Index d) const;
};

/// `base` with every key of `overrides` replacing its counterpart, parsed.
RunConfig resolve_config(const Json& base, const Json& overrides);

struct ModelArtifact {
  Method method = Method::em;
  RunConfig config;
  ScalingParams scaling;
  Index d = 0;
  Index k = 0;
  Index t = 0;

  ClvmParams params;               // em, vi
  std::optional<CvaeModel> cvae;   // cvae
  Matrix projection;               // cpca, d × t
  Vector eigenvalues;              // cpca

  std::vector<TraceEntry> trace;
  double final_objective = 0.0;
  Json extras = Json::object();    // variant posteriors (horseshoe, ard, pruning)

  // Latent means of the fitted rows.
  Matrix target_t;
  Matrix target_z;
  Matrix background_t;  // cpca only
  Matrix background_z;
};

/// Scales the raw pair as configured, fits, and (horseshoe) zeroes pruned
/// rows of W.
ModelArtifact fit_model(const ContrastivePair& raw, const RunConfig& cfg);

Json model_to_json(const ModelArtifact& model);
ModelArtifact model_from_json(const Json& j);

/// One JSON object per trace entry, newline-terminated. EM entries carry
/// `loglik`, the others `elbo`.
std::string trace_jsonl(const ModelArtifact& model);

struct LatentTable {
  Matrix target_t;
  Matrix target_z;
  Matrix background_t;  // cpca only
  Matrix background_z;
};

/// Latents of new rows under a fitted model; the model's scaling is applied
/// first. Linear models marginalize missing cells; cvae and cpca require
/// complete rows (cpca mean-imputes).
LatentTable transform_data(const ModelArtifact& model, const ContrastivePair& raw);

LatentTable fitted_latents(const ModelArtifact& model);

/// Header `id,set,label,t1..tT,z1..zK`. Background rows leave the t columns
/// empty unless `background_t` is filled. Labels come from the pair when
/// present, otherwise the cell is empty.
void write_latent_csv(const std::filesystem::path& path, const LatentTable& latents, const ContrastivePair& pair);
std::string latent_csv(const LatentTable& latents, const ContrastivePair& pair);

/// Objective, effective shared rank, W row norms and the count of rows whose
/// norm is below 1e-3 of the largest.
Json model_summary(const ModelArtifact& model);

// ---------------------------------------------------------------------------
// Synthetic datasets

/// Generators: "subgroups", "planted", "signal". Options per generator; an
/// unknown key is a ConfigError. Common keys: seed, with_outliers (rows added
/// per set, U[-20, 20]), missing_fraction (target cells deleted).
ContrastivePair generate_dataset(const std::string& generator, const Json& options);

// ---------------------------------------------------------------------------
// Evaluation of latent CSVs

struct LatentFile {
  std::vector<std::string> set;  // per row
  std::vector<std::string> label;
  Matrix t;
  Matrix z;
};

LatentFile load_latent_csv(const std::filesystem::path& path);

/// Options: rows ("target" | "background" | "all", default target), coords
/// ("t" | "z" | "tz", default t), clusters (default: distinct labels), seed.
/// Labels come from `labels_path` if given, otherwise from the latent file.
/// With a reference file the report adds the Procrustes distance between the
/// selected coordinates.
Json evaluate_latents(const std::filesystem::path& latent_path, const std::filesystem::path& labels_path,
                      const std::filesystem::path& reference_path, const Json& options);

}  // namespace clvm
