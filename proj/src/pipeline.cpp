#include "clvm/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "clvm/baselines.hpp"
#include "clvm/clvm_em.hpp"
#include "clvm/errors.hpp"
#include "clvm/metrics.hpp"
#include "clvm/variants.hpp"

namespace clvm {

const char* to_string(Method m) {
  switch (m) {
    case Method::em: return "em";
    case Method::vi: return "vi";
    case Method::cvae: return "cvae";
    case Method::cpca: return "cpca";
  }
  return "em";
}

Method parse_method(const std::string& s) {
  if (s == "em") return Method::em;
  if (s == "vi") return Method::vi;
  if (s == "cvae") return Method::cvae;
  if (s == "cpca") return Method::cpca;
  throw ConfigError("unknown method '" + s + "' (expected em, vi, cvae or cpca)");
}

// ---------------------------------------------------------------------------
// RunConfig

namespace {

template <typename T>
T get_as(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    } else {
      if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  using Setter = std::function<void(const Json&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"method", [&](const Json& v, const std::string& k) { c.method = parse_method(get_as<std::string>(v, k)); }},
      {"k", [&](const Json& v, const std::string& k) { c.k = get_as<std::int64_t>(v, k); }},
      {"t", [&](const Json& v, const std::string& k) { c.t = get_as<std::int64_t>(v, k); }},
      {"scaling",
       [&](const Json& v, const std::string& k) { c.scaling = parse_scaling_mode(get_as<std::string>(v, k)); }},
      {"seed",
       [&](const Json& v, const std::string& k) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
           throw ConfigError("config key '" + k + "' must be a non-negative integer");
         }
         c.seed = v.get<std::uint64_t>();
       }},
      {"threads", [&](const Json& v, const std::string& k) { c.threads = get_as<int>(v, k); }},
      {"deterministic", [&](const Json& v, const std::string& k) { c.deterministic = get_as<bool>(v, k); }},
      {"timing", [&](const Json& v, const std::string& k) { c.timing = get_as<bool>(v, k); }},
      {"max_iter",
       [&](const Json& v, const std::string& k) {
         c.max_iter = v.is_null() ? std::nullopt : std::optional<int>(get_as<int>(v, k));
       }},
      {"rel_tol",
       [&](const Json& v, const std::string& k) {
         c.rel_tol = v.is_null() ? std::nullopt : std::optional<double>(get_as<double>(v, k));
       }},
      {"lr",
       [&](const Json& v, const std::string& k) {
         c.lr = v.is_null() ? std::nullopt : std::optional<double>(get_as<double>(v, k));
       }},
      {"likelihood",
       [&](const Json& v, const std::string& k) { c.likelihood = parse_likelihood(get_as<std::string>(v, k)); }},
      {"student_a", [&](const Json& v, const std::string& k) { c.student_a = get_as<double>(v, k); }},
      {"w_prior", [&](const Json& v, const std::string& k) { c.w_prior = parse_w_prior(get_as<std::string>(v, k)); }},
      {"rho", [&](const Json& v, const std::string& k) { c.rho = get_as<double>(v, k); }},
      {"group_ids",
       [&](const Json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("config key '" + k + "' must be an array of integers");
         c.group_ids.clear();
         for (const auto& e : v) c.group_ids.push_back(get_as<int>(e, k));
       }},
      {"horseshoe_b", [&](const Json& v, const std::string& k) { c.horseshoe_b = get_as<double>(v, k); }},
      {"s_prior", [&](const Json& v, const std::string& k) { c.s_prior = parse_s_prior(get_as<std::string>(v, k)); }},
      {"ard_a0", [&](const Json& v, const std::string& k) { c.ard_a0 = get_as<double>(v, k); }},
      {"ard_b0", [&](const Json& v, const std::string& k) { c.ard_b0 = get_as<double>(v, k); }},
      {"noise_prior",
       [&](const Json& v, const std::string& k) { c.noise_prior = parse_noise_prior(get_as<std::string>(v, k)); }},
      {"noise_a", [&](const Json& v, const std::string& k) { c.noise_a = get_as<double>(v, k); }},
      {"noise_b", [&](const Json& v, const std::string& k) { c.noise_b = get_as<double>(v, k); }},
      {"n_mc", [&](const Json& v, const std::string& k) { c.n_mc = get_as<int>(v, k); }},
      {"eval_mc", [&](const Json& v, const std::string& k) { c.eval_mc = get_as<int>(v, k); }},
      {"prune_delta", [&](const Json& v, const std::string& k) { c.prune_delta = get_as<double>(v, k); }},
      {"prune_p0", [&](const Json& v, const std::string& k) { c.prune_p0 = get_as<double>(v, k); }},
      {"epochs", [&](const Json& v, const std::string& k) { c.epochs = get_as<int>(v, k); }},
      {"batch", [&](const Json& v, const std::string& k) { c.batch = get_as<std::int64_t>(v, k); }},
      {"alpha", [&](const Json& v, const std::string& k) { c.alpha = get_as<double>(v, k); }},
      {"target", [&](const Json& v, const std::string& k) { c.target = get_as<std::string>(v, k); }},
      {"background", [&](const Json& v, const std::string& k) { c.background = get_as<std::string>(v, k); }},
      {"labels", [&](const Json& v, const std::string& k) { c.labels = get_as<std::string>(v, k); }},
      {"out_dir", [&](const Json& v, const std::string& k) { c.out_dir = get_as<std::string>(v, k); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value, key);
  }
  c.validate();
  return c;
}

int RunConfig::resolved_max_iter() const {
  if (max_iter) return *max_iter;
  return method == Method::vi ? 5000 : 500;
}

double RunConfig::resolved_rel_tol() const {
  if (rel_tol) return *rel_tol;
  return method == Method::vi ? 1e-5 : 1e-7;
}

double RunConfig::resolved_lr() const {
  if (lr) return *lr;
  return method == Method::cvae ? 1e-3 : 1e-2;
}

Json RunConfig::to_json() const {
  Json j;
  j["method"] = to_string(method);
  j["k"] = k;
  j["t"] = t;
  j["scaling"] = clvm::to_string(scaling);
  j["seed"] = seed;
  j["threads"] = threads;
  j["deterministic"] = deterministic;
  j["timing"] = timing;
  j["max_iter"] = resolved_max_iter();
  j["rel_tol"] = resolved_rel_tol();
  j["lr"] = resolved_lr();
  j["likelihood"] = clvm::to_string(likelihood);
  j["student_a"] = student_a;
  j["w_prior"] = clvm::to_string(w_prior);
  j["rho"] = rho;
  j["group_ids"] = group_ids;
  j["horseshoe_b"] = horseshoe_b;
  j["s_prior"] = clvm::to_string(s_prior);
  j["ard_a0"] = ard_a0;
  j["ard_b0"] = ard_b0;
  j["noise_prior"] = clvm::to_string(noise_prior);
  j["noise_a"] = noise_a;
  j["noise_b"] = noise_b;
  j["n_mc"] = n_mc;
  j["eval_mc"] = eval_mc;
  j["prune_delta"] = prune_delta;
  j["prune_p0"] = prune_p0;
  j["epochs"] = epochs;
  j["batch"] = batch;
  j["alpha"] = alpha;
  j["target"] = target;
  j["background"] = background;
  j["labels"] = labels;
  j["out_dir"] = out_dir;
  return j;
}

void RunConfig::validate() const {
  if (k < 0 || t < 0) throw ConfigError("k and t must be non-negative");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (resolved_max_iter() < 0) throw ConfigError("max_iter must be non-negative");
  if (!(resolved_rel_tol() >= 0.0)) throw ConfigError("rel_tol must be non-negative");
  if (!(resolved_lr() > 0.0)) throw ConfigError("lr must be positive");
  if (n_mc < 1 || eval_mc < 1) throw ConfigError("n_mc and eval_mc must be positive");
  if (!(prune_delta > 0.0)) throw ConfigError("prune_delta must be positive");
  if (!(prune_p0 > 0.0 && prune_p0 < 1.0)) throw ConfigError("prune_p0 must lie in (0, 1)");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  switch (method) {
    case Method::em:
      if (k + t < 1) throw ConfigError("em needs k + t >= 1");
      break;
    case Method::vi:
      if (k + t < 1) throw ConfigError("vi needs k + t >= 1");
      break;
    case Method::cvae:
      if (k < 1 || t < 1) throw ConfigError("cvae needs k >= 1 and t >= 1");
      break;
    case Method::cpca:
      if (t < 1) throw ConfigError("cpca needs t >= 1 (projection dimension)");
      break;
  }
}

ModelSpec RunConfig::model_spec(Index d) const {
  ModelSpec s;
  s.d = d;
  s.k = k;
  s.t = t;
  s.likelihood = likelihood;
  s.student_a = student_a;
  s.w_prior = w_prior;
  s.rho = rho;
  s.group_ids = group_ids;
  s.horseshoe_b = horseshoe_b;
  s.s_prior = s_prior;
  s.ard_a0 = ard_a0;
  s.ard_b0 = ard_b0;
  s.noise_prior = noise_prior;
  s.noise_a = noise_a;
  s.noise_b = noise_b;
  return s;
}

RunConfig resolve_config(const Json& base, const Json& overrides) {
  if (!base.is_null() && !base.is_object()) throw ConfigError("config file must hold a JSON object");
  if (!overrides.is_null() && !overrides.is_object()) throw ConfigError("overrides must be a JSON object");
  Json merged = base.is_null() ? Json::object() : base;
  if (overrides.is_object()) {
    for (const auto& [key, value] : overrides.items()) merged[key] = value;
  }
  return RunConfig::from_json(merged);
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace {

Json matrix_json(const Matrix& m) {
  Json data = Json::array();
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) data.push_back(m(r, c));
  }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

const Json& field(const Json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key)) throw DataError("model file: missing field '" + key + "'");
  return j.at(key);
}

double number_of(const Json& v, const std::string& what) {
  if (!v.is_number()) throw DataError("model file: '" + what + "' must be a number");
  return v.get<double>();
}

Matrix matrix_from(const Json& j, const std::string& what) {
  const Index rows = static_cast<Index>(number_of(field(j, "rows"), what + ".rows"));
  const Index cols = static_cast<Index>(number_of(field(j, "cols"), what + ".cols"));
  const Json& data = field(j, "data");
  if (rows < 0 || cols < 0 || !data.is_array() || static_cast<Index>(data.size()) != rows * cols) {
    throw DataError("model file: '" + what + "' has inconsistent shape");
  }
  Matrix m(rows, cols);
  Index i = 0;
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) m(r, c) = number_of(data[static_cast<std::size_t>(i++)], what);
  }
  return m;
}

Vector vector_from(const Json& j, const std::string& what) {
  if (!j.is_array()) throw DataError("model file: '" + what + "' must be an array");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = number_of(j[i], what);
  return v;
}

Json scaling_json(const ScalingParams& s) {
  Json j;
  j["mode"] = to_string(s.mode);
  j["center"] = vector_json(s.center);
  j["scale"] = vector_json(s.scale);
  j["flagged_columns"] = s.flagged_columns;
  j["warnings"] = s.warnings;
  return j;
}

ScalingParams scaling_from(const Json& j) {
  ScalingParams s;
  s.mode = parse_scaling_mode(field(j, "mode").get<std::string>());
  s.center = vector_from(field(j, "center"), "scaling.center");
  s.scale = vector_from(field(j, "scale"), "scaling.scale");
  if (j.contains("flagged_columns")) s.flagged_columns = j.at("flagged_columns").get<std::vector<Index>>();
  if (j.contains("warnings")) s.warnings = j.at("warnings").get<std::vector<std::string>>();
  if (s.center.size() != s.scale.size()) throw DataError("model file: scaling center/scale length mismatch");
  return s;
}

Json mlp_json(const MlpParams& p) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    layers.push_back(Json{{"weight", matrix_json(p.weights[l])}, {"bias", matrix_json(p.biases[l])}});
  }
  return layers;
}

MlpParams mlp_from(const Json& j, const std::string& what) {
  if (!j.is_array()) throw DataError("model file: '" + what + "' must be a layer array");
  MlpParams p;
  for (std::size_t l = 0; l < j.size(); ++l) {
    const std::string name = what + "[" + std::to_string(l) + "]";
    p.weights.push_back(matrix_from(field(j[l], "weight"), name + ".weight"));
    p.biases.push_back(matrix_from(field(j[l], "bias"), name + ".bias"));
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  return p;
}

Json trace_entry_json(const TraceEntry& e, const char* objective_key) {
  Json j;
  j["iter"] = e.iter;
  j[objective_key] = e.objective;
  j["grad_norm"] = e.grad_norm;
  j["wall_ms"] = e.wall_ms;
  return j;
}

const char* objective_key(Method m) { return m == Method::em ? "loglik" : "elbo"; }

}  // namespace

// ---------------------------------------------------------------------------
// Fitting

ModelArtifact fit_model(const ContrastivePair& raw, const RunConfig& cfg) {
  cfg.validate();
  raw.validate();
  auto [pair, scaling] = standardize(raw, cfg.scaling);
  ModelArtifact a;
  a.method = cfg.method;
  a.config = cfg;
  a.scaling = scaling;
  a.d = pair.dim();
  a.k = cfg.k;
  a.t = cfg.t;
  const bool zero_time = cfg.deterministic || !cfg.timing;

  switch (cfg.method) {
    case Method::em: {
      EmOptions o;
      o.max_iter = cfg.resolved_max_iter();
      o.rel_tol = cfg.resolved_rel_tol();
      o.seed = cfg.seed;
      FittedModel f = fit_em(pair, cfg.k, cfg.t, o);
      if (zero_time) {
        for (auto& e : f.trace) e.wall_ms = 0.0;
      }
      a.params = f.params;
      a.trace = f.trace;
      a.final_objective = f.trace.empty() ? log_likelihood(f.params, pair) : f.trace.back().objective;
      a.target_t = f.target_t;
      a.target_z = f.target_z;
      a.background_z = f.background_z;
      a.extras["converged"] = f.converged;
      a.extras["iterations"] = f.iterations;
      break;
    }
    case Method::vi: {
      const ModelSpec spec = cfg.model_spec(pair.dim());
      spec.validate();
      ViOptions o;
      o.max_iter = cfg.resolved_max_iter();
      o.rel_tol = cfg.resolved_rel_tol();
      o.lr = cfg.resolved_lr();
      o.n_mc = cfg.n_mc;
      o.eval_mc = cfg.eval_mc;
      o.seed = cfg.seed;
      o.threads = cfg.threads;
      o.deterministic = zero_time;
      ViFit f = fit_vi(spec, pair, o);
      a.params = f.model.params;
      a.trace = f.model.trace;
      a.final_objective = f.final_elbo;
      a.target_t = f.model.target_t;
      a.target_z = f.model.target_z;
      a.background_z = f.model.background_z;
      a.extras["converged"] = f.model.converged;
      a.extras["iterations"] = f.model.iterations;
      a.extras["final_elbo_std_error"] = f.final_elbo_se;
      if (spec.variational_w()) {
        auto [mean, sd] = horseshoe_row_scales(f.state);
        const auto pruned = prune_rows(mean, sd, cfg.prune_delta, cfg.prune_p0);
        Json hs;
        hs["log_scale_mean"] = vector_json(mean);
        hs["log_scale_std"] = vector_json(sd);
        hs["log_tau2_mean"] = f.state.hs_log_tau2.loc(0, 0);
        hs["log_tau2_std"] = std::exp(f.state.hs_log_tau2.logstd(0, 0));
        hs["log_rho2_mean"] = vector_json(f.state.hs_log_rho2.loc.col(0));
        hs["log_rho2_std"] = vector_json(f.state.hs_log_rho2.std().col(0));
        Json flags = Json::array();
        for (std::size_t r = 0; r < pruned.size(); ++r) {
          flags.push_back(static_cast<bool>(pruned[r]));
          if (pruned[r]) a.params.W.row(static_cast<Index>(r)).setZero();
        }
        hs["pruned"] = flags;
        hs["delta"] = cfg.prune_delta;
        hs["p0"] = cfg.prune_p0;
        a.extras["horseshoe"] = hs;
        a.extras["W_std"] = matrix_json(f.state.W.std());
      }
      if (spec.variational_s()) {
        Json ard;
        ard["log_alpha_mean"] = vector_json(f.state.ard_log_alpha.loc.col(0));
        ard["log_alpha_std"] = vector_json(f.state.ard_log_alpha.std().col(0));
        ard["explained_shares"] = vector_json(explained_shares(a.params.S));
        ard["effective_rank"] = effective_shared_rank(a.params.S);
        a.extras["ard"] = ard;
        a.extras["S_std"] = matrix_json(f.state.S.std());
      }
      if (spec.variational_noise()) {
        a.extras["noise"] = Json{{"log_sigma2_mean", f.state.log_sigma2.loc(0, 0)},
                                 {"log_sigma2_std", std::exp(f.state.log_sigma2.logstd(0, 0))}};
      }
      break;
    }
    case Method::cvae: {
      if (!pair.complete()) throw DataError("cvae needs complete data (" + std::to_string(pair.missing_count()) +
                                            " missing cells)");
      CvaeOptions o;
      o.k = cfg.k;
      o.t = cfg.t;
      o.epochs = cfg.epochs;
      o.batch = cfg.batch;
      o.lr = cfg.resolved_lr();
      o.seed = cfg.seed;
      o.deterministic = zero_time;
      CvaeFit f = fit_cvae(pair, o);
      a.cvae = std::move(f.model);
      a.trace = f.trace;
      a.final_objective = f.trace.empty() ? 0.0 : f.trace.back().objective;
      a.target_t = f.target_t;
      a.target_z = f.target_z;
      a.background_z = f.background_z;
      break;
    }
    case Method::cpca: {
      CpcaResult r = fit_cpca(pair, cfg.alpha, cfg.t);
      a.k = 0;
      a.projection = r.projection;
      a.eigenvalues = r.eigenvalues;
      a.final_objective = r.eigenvalues.sum();
      a.target_t = r.target_latents;
      a.background_t = r.background_latents;
      a.target_z = Matrix(pair.n(), 0);
      a.background_z = Matrix(pair.m(), 0);
      break;
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Model JSON

Json model_to_json(const ModelArtifact& m) {
  Json j;
  j["format_version"] = kModelFormatVersion;
  j["method"] = to_string(m.method);
  j["dims"] = Json{{"d", m.d}, {"k", m.k}, {"t", m.t}};
  j["seed"] = m.config.seed;
  Json cfg = m.config.to_json();
  // Paths are run plumbing; keeping them out lets a relocated re-run give an
  // identical model file.
  for (const char* key : {"target", "background", "labels", "out_dir"}) cfg.erase(key);
  j["config"] = std::move(cfg);
  j["scaling"] = scaling_json(m.scaling);
  switch (m.method) {
    case Method::em:
    case Method::vi:
      j["S"] = matrix_json(m.params.S);
      j["W"] = matrix_json(m.params.W);
      j["mu_x"] = vector_json(m.params.mu_x);
      j["mu_y"] = vector_json(m.params.mu_y);
      j["sigma2"] = m.params.sigma2;
      break;
    case Method::cvae: {
      const CvaeModel& c = *m.cvae;
      j["architecture"] = Json{{"d", c.d},
                               {"k", c.k},
                               {"t", c.t},
                               {"decoder_hidden", {128, 256}},
                               {"encoder_hidden", {256, 128}},
                               {"activation", "relu"},
                               {"encoder_logstd_range", {kEncoderLogstdMin, kEncoderLogstdMax}}};
      j["networks"] = Json{{"shared_decoder", mlp_json(c.shared_decoder)},
                           {"target_decoder", mlp_json(c.target_decoder)},
                           {"target_encoder", mlp_json(c.target_encoder)},
                           {"background_encoder", mlp_json(c.background_encoder)}};
      j["mu_x"] = vector_json(c.mu_x.row(0).transpose());
      j["mu_y"] = vector_json(c.mu_y.row(0).transpose());
      j["sigma2"] = c.sigma2();
      j["log_sigma2"] = c.log_sigma2(0, 0);
      break;
    }
    case Method::cpca:
      j["alpha"] = m.config.alpha;
      j["projection"] = matrix_json(m.projection);
      j["eigenvalues"] = vector_json(m.eigenvalues);
      break;
  }
  j["final_objective"] = m.final_objective;
  for (const auto& [key, value] : m.extras.items()) j[key] = value;
  Json trace = Json::array();
  for (const auto& e : m.trace) trace.push_back(trace_entry_json(e, objective_key(m.method)));
  j["trace"] = std::move(trace);
  return j;
}

ModelArtifact model_from_json(const Json& j) {
  if (!j.is_object()) throw DataError("model file: not a JSON object");
  const Json& version = field(j, "format_version");
  if (!version.is_number_integer() || version.get<int>() != kModelFormatVersion) {
    throw DataError("model file: unsupported format_version (expected " + std::to_string(kModelFormatVersion) + ")");
  }
  ModelArtifact m;
  try {
    m.method = parse_method(field(j, "method").get<std::string>());
    m.config = RunConfig::from_json(field(j, "config"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  const Json& dims = field(j, "dims");
  m.d = static_cast<Index>(number_of(field(dims, "d"), "dims.d"));
  m.k = static_cast<Index>(number_of(field(dims, "k"), "dims.k"));
  m.t = static_cast<Index>(number_of(field(dims, "t"), "dims.t"));
  m.scaling = scaling_from(field(j, "scaling"));
  if (m.scaling.center.size() != m.d) throw DataError("model file: scaling width does not match dims.d");
  m.final_objective = number_of(field(j, "final_objective"), "final_objective");

  switch (m.method) {
    case Method::em:
    case Method::vi:
      m.params.S = matrix_from(field(j, "S"), "S");
      m.params.W = matrix_from(field(j, "W"), "W");
      m.params.mu_x = vector_from(field(j, "mu_x"), "mu_x");
      m.params.mu_y = vector_from(field(j, "mu_y"), "mu_y");
      m.params.sigma2 = number_of(field(j, "sigma2"), "sigma2");
      try {
        m.params.validate();
      } catch (const ConfigError& e) {
        throw DataError(std::string("model file: ") + e.what());
      }
      if (m.params.dim() != m.d || m.params.shared_dim() != m.k || m.params.target_dim() != m.t) {
        throw DataError("model file: parameter shapes do not match dims");
      }
      break;
    case Method::cvae: {
      CvaeModel c;
      c.d = m.d;
      c.k = m.k;
      c.t = m.t;
      const Json& nets = field(j, "networks");
      c.shared_decoder = mlp_from(field(nets, "shared_decoder"), "shared_decoder");
      c.target_decoder = mlp_from(field(nets, "target_decoder"), "target_decoder");
      c.target_encoder = mlp_from(field(nets, "target_encoder"), "target_encoder");
      c.background_encoder = mlp_from(field(nets, "background_encoder"), "background_encoder");
      c.mu_x = vector_from(field(j, "mu_x"), "mu_x").transpose();
      c.mu_y = vector_from(field(j, "mu_y"), "mu_y").transpose();
      c.log_sigma2 = Matrix::Constant(1, 1, number_of(field(j, "log_sigma2"), "log_sigma2"));
      try {
        c.validate();
      } catch (const ConfigError& e) {
        throw DataError(std::string("model file: ") + e.what());
      }
      m.cvae = std::move(c);
      break;
    }
    case Method::cpca:
      m.projection = matrix_from(field(j, "projection"), "projection");
      m.eigenvalues = vector_from(field(j, "eigenvalues"), "eigenvalues");
      if (m.projection.rows() != m.d || m.projection.cols() != m.t) {
        throw DataError("model file: projection shape does not match dims");
      }
      break;
  }

  const char* key = objective_key(m.method);
  for (const auto& e : field(j, "trace")) {
    TraceEntry t;
    t.iter = static_cast<int>(number_of(field(e, "iter"), "trace.iter"));
    t.objective = number_of(field(e, key), std::string("trace.") + key);
    t.grad_norm = number_of(field(e, "grad_norm"), "trace.grad_norm");
    t.wall_ms = number_of(field(e, "wall_ms"), "trace.wall_ms");
    m.trace.push_back(t);
  }
  static const std::set<std::string> known = {"format_version", "method", "dims", "seed", "config", "scaling",
                                              "S", "W", "mu_x", "mu_y", "sigma2", "architecture", "networks",
                                              "log_sigma2", "alpha", "projection", "eigenvalues",
                                              "final_objective", "trace"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) m.extras[k] = v;
  }
  return m;
}

std::string trace_jsonl(const ModelArtifact& m) {
  std::string out;
  for (const auto& e : m.trace) {
    out += trace_entry_json(e, objective_key(m.method)).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latents

LatentTable fitted_latents(const ModelArtifact& m) {
  return {m.target_t, m.target_z, m.background_t, m.background_z};
}

LatentTable transform_data(const ModelArtifact& m, const ContrastivePair& raw) {
  raw.validate();
  if (raw.dim() != m.d) {
    throw DataError("data has " + std::to_string(raw.dim()) + " columns, model expects " + std::to_string(m.d));
  }
  const ContrastivePair pair = apply_scaling(raw, m.scaling);
  LatentTable out;
  switch (m.method) {
    case Method::em:
    case Method::vi: {
      Latents lt = transform(m.params, pair.target, pair.target_mask, true);
      Latents lb = transform(m.params, pair.background, pair.background_mask, false);
      out.target_t = lt.t;
      out.target_z = lt.z;
      out.background_z = lb.z;
      break;
    }
    case Method::cvae: {
      if (!pair.complete()) throw DataError("cvae transform needs complete rows");
      const Encoding te = encode_target(*m.cvae, pair.target);
      const Encoding be = encode_background(*m.cvae, pair.background);
      out.target_z = te.mean.leftCols(m.k);
      out.target_t = te.mean.rightCols(m.t);
      out.background_z = be.mean;
      break;
    }
    case Method::cpca: {
      const Matrix x = pair.target_mask.all() ? pair.target : mean_impute(pair.target, pair.target_mask);
      const Matrix y =
          pair.background_mask.all() ? pair.background : mean_impute(pair.background, pair.background_mask);
      out.target_t = (x.rowwise() - x.colwise().mean()) * m.projection;
      out.background_t = (y.rowwise() - y.colwise().mean()) * m.projection;
      out.target_z = Matrix(x.rows(), 0);
      out.background_z = Matrix(y.rows(), 0);
      break;
    }
  }
  return out;
}

std::string latent_csv(const LatentTable& l, const ContrastivePair& pair) {
  const Index t = std::max(l.target_t.cols(), l.background_t.cols());
  const Index k = std::max(l.target_z.cols(), l.background_z.cols());
  if (l.target_t.rows() != pair.n() || l.background_z.rows() != pair.m()) {
    throw DataError("latent rows do not match the data rows");
  }
  std::ostringstream out;
  out << "id,set,label";
  for (Index j = 0; j < t; ++j) out << ",t" << (j + 1);
  for (Index j = 0; j < k; ++j) out << ",z" << (j + 1);
  out << '\n';
  auto emit = [&](const char* set, Index rows, const std::vector<int>& labels, const Matrix& tm, const Matrix& zm) {
    for (Index i = 0; i < rows; ++i) {
      out << i << ',' << set << ',';
      if (!labels.empty()) out << labels[static_cast<std::size_t>(i)];
      for (Index j = 0; j < t; ++j) {
        out << ',';
        if (tm.cols() == t && tm.rows() == rows) out << format_double(tm(i, j));
      }
      for (Index j = 0; j < k; ++j) {
        out << ',';
        if (zm.cols() == k && zm.rows() == rows) out << format_double(zm(i, j));
      }
      out << '\n';
    }
  };
  emit("target", pair.n(), pair.target_labels, l.target_t, l.target_z);
  emit("background", pair.m(), pair.background_labels, l.background_t, l.background_z);
  return out.str();
}

void write_latent_csv(const std::filesystem::path& path, const LatentTable& latents, const ContrastivePair& pair) {
  const std::string text = latent_csv(latents, pair);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

Json model_summary(const ModelArtifact& m) {
  Json j;
  j["method"] = to_string(m.method);
  j["objective"] = m.final_objective;
  if (m.method == Method::em || m.method == Method::vi) {
    j["effective_rank"] = m.params.shared_dim() > 0 ? effective_shared_rank(m.params.S) : Index{0};
    const Vector norms = m.params.W.rowwise().norm();
    j["w_row_norms"] = vector_json(norms);
    const double top = norms.size() > 0 ? norms.maxCoeff() : 0.0;
    Index zero = 0;
    for (Index r = 0; r < norms.size(); ++r) {
      if (norms(r) <= 1e-3 * top || top == 0.0) ++zero;
    }
    j["zero_norm_rows"] = zero;
    j["sigma2"] = m.params.sigma2;
  }
  if (m.extras.contains("horseshoe")) {
    Index pruned = 0;
    for (const auto& p : m.extras["horseshoe"]["pruned"]) pruned += p.get<bool>() ? 1 : 0;
    j["pruned_rows"] = pruned;
  }
  if (m.method == Method::cpca) j["eigenvalues"] = vector_json(m.eigenvalues);
  return j;
}

// ---------------------------------------------------------------------------
// Generators

namespace {

class OptionReader {
 public:
  OptionReader(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_null() && !j_.is_object()) throw ConfigError(context_ + ": options must be a JSON object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (j_.is_null() || !j_.contains(key)) return fallback;
    return get_as<T>(j_.at(key), key);
  }

  void finish() const {
    if (j_.is_null()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(context_ + ": unknown option '" + key + "'");
    }
  }

 private:
  const Json& j_;
  std::string context_;
  std::set<std::string> used_;
};

}  // namespace

ContrastivePair generate_dataset(const std::string& generator, const Json& options) {
  OptionReader opt(options, "generate " + generator);
  const std::uint64_t seed = static_cast<std::uint64_t>(opt.get<std::int64_t>("seed", 0));
  const std::int64_t outliers = opt.get<std::int64_t>("with_outliers", 0);
  const double missing = opt.get<double>("missing_fraction", 0.0);
  if (outliers < 0) throw ConfigError("with_outliers must be non-negative");
  if (!(missing >= 0.0 && missing < 1.0)) throw ConfigError("missing_fraction must lie in [0, 1)");

  ContrastivePair pair;
  if (generator == "subgroups") {
    const std::int64_t per = opt.get<std::int64_t>("n_per_subgroup", 100);
    const std::int64_t m = opt.get<std::int64_t>("m", 400);
    opt.finish();
    if (per < 1 || m < 1) throw ConfigError("subgroups: counts must be positive");
    pair = generate_synthetic_subgroups(per, m, mix_seed(seed, 0));
  } else if (generator == "planted") {
    PlantedSpec s;
    s.d = opt.get<std::int64_t>("d", s.d);
    s.k = opt.get<std::int64_t>("k", s.k);
    s.t = opt.get<std::int64_t>("t", s.t);
    s.n = opt.get<std::int64_t>("n", s.n);
    s.m = opt.get<std::int64_t>("m", s.m);
    s.loading_scale = opt.get<double>("loading_scale", s.loading_scale);
    s.separation = opt.get<double>("separation", s.separation);
    s.sigma2 = opt.get<double>("sigma2", s.sigma2);
    opt.finish();
    s.seed = mix_seed(seed, 0);
    pair = generate_planted(s).pair;
  } else if (generator == "signal") {
    SignalNoiseSpec s;
    s.n = opt.get<std::int64_t>("n", s.n);
    s.m = opt.get<std::int64_t>("m", s.m);
    s.dim = opt.get<std::int64_t>("dim", s.dim);
    s.classes = opt.get<std::int64_t>("classes", s.classes);
    s.signal_rank = opt.get<std::int64_t>("signal_rank", s.signal_rank);
    s.signal_amplitude = opt.get<double>("signal_amplitude", s.signal_amplitude);
    s.signal_jitter = opt.get<double>("signal_jitter", s.signal_jitter);
    s.noise_rank = opt.get<std::int64_t>("noise_rank", s.noise_rank);
    s.noise_scale = opt.get<double>("noise_scale", s.noise_scale);
    s.isotropic_std = opt.get<double>("isotropic_std", s.isotropic_std);
    opt.finish();
    s.seed = mix_seed(seed, 0);
    pair = generate_signal_on_noise(s);
  } else {
    throw ConfigError("unknown generator '" + generator + "' (expected subgroups, planted or signal)");
  }
  if (outliers > 0) pair = inject_outliers(pair, outliers, -20.0, 20.0, mix_seed(seed, 1));
  if (missing > 0.0) pair = delete_target_cells(pair, missing, mix_seed(seed, 2));
  return pair;
}

// ---------------------------------------------------------------------------
// Evaluation

LatentFile load_latent_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty latent file");
  const auto header = split_csv_line(line);
  int set_col = -1, label_col = -1;
  std::vector<int> t_cols, z_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string& h = header[i];
    if (h == "set") set_col = static_cast<int>(i);
    else if (h == "label") label_col = static_cast<int>(i);
    else if (h.size() > 1 && h[0] == 't' && std::isdigit(static_cast<unsigned char>(h[1]))) t_cols.push_back(static_cast<int>(i));
    else if (h.size() > 1 && h[0] == 'z' && std::isdigit(static_cast<unsigned char>(h[1]))) z_cols.push_back(static_cast<int>(i));
  }
  if (set_col < 0) throw DataError(path.string() + ": no 'set' column");
  LatentFile f;
  std::vector<std::vector<double>> t_rows, z_rows;
  std::size_t line_no = 1;
  auto parse = [&](const std::string& s, std::size_t col) {
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw DataError(path.string() + ": non-numeric value at row " + std::to_string(line_no) + ", column " +
                      std::to_string(col + 1));
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError(path.string() + ": row " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(header.size()));
    }
    f.set.push_back(fields[static_cast<std::size_t>(set_col)]);
    f.label.push_back(label_col >= 0 ? fields[static_cast<std::size_t>(label_col)] : std::string());
    std::vector<double> tr, zr;
    for (int c : t_cols) tr.push_back(parse(fields[static_cast<std::size_t>(c)], static_cast<std::size_t>(c)));
    for (int c : z_cols) zr.push_back(parse(fields[static_cast<std::size_t>(c)], static_cast<std::size_t>(c)));
    t_rows.push_back(std::move(tr));
    z_rows.push_back(std::move(zr));
  }
  const Index rows = static_cast<Index>(f.set.size());
  f.t.resize(rows, static_cast<Index>(t_cols.size()));
  f.z.resize(rows, static_cast<Index>(z_cols.size()));
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < f.t.cols(); ++j) f.t(i, j) = t_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (Index j = 0; j < f.z.cols(); ++j) f.z(i, j) = z_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return f;
}

namespace {

Matrix select_points(const LatentFile& f, const std::vector<Index>& rows, const std::string& coords,
                     const std::string& what) {
  Index cols = 0;
  if (coords.find('t') != std::string::npos) cols += f.t.cols();
  if (coords.find('z') != std::string::npos) cols += f.z.cols();
  Matrix out(static_cast<Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Index c = 0;
    if (coords.find('t') != std::string::npos) {
      out.row(static_cast<Index>(i)).segment(c, f.t.cols()) = f.t.row(rows[i]);
      c += f.t.cols();
    }
    if (coords.find('z') != std::string::npos) out.row(static_cast<Index>(i)).segment(c, f.z.cols()) = f.z.row(rows[i]);
  }
  if (cols == 0) throw DataError(what + ": no latent columns selected");
  if (!out.allFinite()) throw DataError(what + ": selected latent coordinates contain empty cells");
  return out;
}

std::vector<Index> select_rows(const std::vector<std::string>& sets, const std::string& which) {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (which == "all" || sets[i] == which) rows.push_back(static_cast<Index>(i));
  }
  return rows;
}

}  // namespace

Json evaluate_latents(const std::filesystem::path& latent_path, const std::filesystem::path& labels_path,
                      const std::filesystem::path& reference_path, const Json& options) {
  OptionReader opt(options, "eval");
  const std::string which = opt.get<std::string>("rows", "target");
  const std::string coords = opt.get<std::string>("coords", "t");
  const std::int64_t clusters_opt = opt.get<std::int64_t>("clusters", 0);
  const std::uint64_t seed = static_cast<std::uint64_t>(opt.get<std::int64_t>("seed", 0));
  opt.finish();
  if (which != "target" && which != "background" && which != "all") {
    throw ConfigError("eval: rows must be target, background or all");
  }
  if (coords != "t" && coords != "z" && coords != "tz") throw ConfigError("eval: coords must be t, z or tz");

  const LatentFile f = load_latent_csv(latent_path);
  const std::vector<Index> rows = select_rows(f.set, which);
  if (rows.empty()) throw DataError("eval: no rows in set '" + which + "'");
  const Matrix points = select_points(f, rows, coords, latent_path.string());

  Json report;
  report["rows"] = which;
  report["coords"] = coords;
  report["points"] = static_cast<Index>(rows.size());

  std::vector<int> labels;
  if (!labels_path.empty()) {
    const LabelsTable lt = load_labels_csv(labels_path);
    const bool per_set = !lt.background.empty();
    if (per_set) {
      std::vector<int> all;
      std::size_t ti = 0, bi = 0;
      for (std::size_t i = 0; i < f.set.size(); ++i) {
        if (f.set[i] == "target") {
          if (ti >= lt.target.size()) throw DataError("eval: latent file has more target rows than the labels file");
          all.push_back(lt.target[ti++]);
        } else {
          if (bi >= lt.background.size()) {
            throw DataError("eval: latent file has more background rows than the labels file");
          }
          all.push_back(lt.background[bi++]);
        }
      }
      if (ti != lt.target.size() || bi != lt.background.size()) {
        throw DataError("eval: row counts of the latent and labels files differ");
      }
      for (Index r : rows) labels.push_back(all[static_cast<std::size_t>(r)]);
    } else {
      if (lt.target.size() != rows.size()) {
        throw DataError("eval: labels file has " + std::to_string(lt.target.size()) + " rows, selection has " +
                        std::to_string(rows.size()));
      }
      labels = lt.target;
    }
  } else {
    for (Index r : rows) {
      const std::string& s = f.label[static_cast<std::size_t>(r)];
      if (s.empty()) {
        labels.clear();
        break;
      }
      try {
        labels.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw DataError("eval: non-integer label '" + s + "'");
      }
    }
  }

  if (!labels.empty()) {
    // Outlier rows carry no class and are excluded from clustering scores.
    std::vector<Index> keep;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != kOutlierLabel) keep.push_back(static_cast<Index>(i));
    }
    Matrix kept(static_cast<Index>(keep.size()), points.cols());
    std::vector<int> kept_labels;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      kept.row(static_cast<Index>(i)) = points.row(keep[i]);
      kept_labels.push_back(labels[static_cast<std::size_t>(keep[i])]);
    }
    const std::set<int> distinct(kept_labels.begin(), kept_labels.end());
    const int clusters = clusters_opt > 0 ? static_cast<int>(clusters_opt) : static_cast<int>(distinct.size());
    report["labelled_points"] = static_cast<Index>(keep.size());
    report["clusters"] = clusters;
    if (clusters >= 2 && static_cast<Index>(keep.size()) > clusters) {
      const KMeansResult km = kmeans(kept, clusters, seed);
      report["ari"] = adjusted_rand_index(km.labels, kept_labels);
    }
    if (distinct.size() >= 2) report["silhouette"] = silhouette_score(kept, kept_labels);
  }

  if (!reference_path.empty()) {
    const LatentFile ref = load_latent_csv(reference_path);
    const std::vector<Index> ref_rows = select_rows(ref.set, which);
    if (ref_rows.size() != rows.size()) {
      throw DataError("eval: reference has " + std::to_string(ref_rows.size()) + " rows, latent file has " +
                      std::to_string(rows.size()));
    }
    report["procrustes"] = procrustes_distance(select_points(ref, ref_rows, coords, reference_path.string()), points);
  }
  return report;
}

}  // namespace clvm
