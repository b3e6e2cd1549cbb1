// Command-line front end. Talks to the toolkit through the C API only.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clvm/clvm.h"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Carries an exit status and a one-line reason up to main.
struct Failure {
  int code;
  std::string kind;
  std::string message;
};

const char* kind_name(clvm_status s) {
  switch (s) {
    case CLVM_ERR_CONFIG: return "config";
    case CLVM_ERR_DATA: return "data";
    case CLVM_ERR_NUMERIC: return "numerical";
    case CLVM_ERR_IO: return "io";
    default: return "internal";
  }
}

void check(clvm_status s) {
  if (s != CLVM_OK) throw Failure{static_cast<int>(s), kind_name(s), clvm_last_error()};
}

[[noreturn]] void config_failure(const std::string& message) { throw Failure{CLVM_ERR_CONFIG, "config", message}; }

struct DatasetDeleter {
  void operator()(clvm_dataset* d) const { clvm_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(clvm_model* m) const { clvm_model_free(m); }
};
struct StringDeleter {
  void operator()(char* s) const { clvm_string_free(s); }
};
using DatasetPtr = std::unique_ptr<clvm_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<clvm_model, ModelDeleter>;
using StringPtr = std::unique_ptr<char, StringDeleter>;

std::string take(char* s) { return std::string(StringPtr(s).get()); }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Failure{CLVM_ERR_IO, "io", "cannot write " + path.string()};
  out << text;
  if (!out) throw Failure{CLVM_ERR_IO, "io", "write failed: " + path.string()};
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{CLVM_ERR_IO, "io", "cannot open " + path.string()};
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{CLVM_ERR_IO, "io", "cannot create " + dir.string() + ": " + ec.message()};
}

// Reads a scalar flag value: JSON numbers and literals as such, anything
// else as a string.
Json scalar_value(const std::string& text) {
  Json v = Json::parse(text, nullptr, false);
  if (v.is_discarded() || v.is_object() || v.is_array()) return Json(text);
  return v;
}

// `key=value` pairs from repeated --set flags.
void apply_sets(const std::vector<std::string>& sets, Json& target) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) config_failure("--set expects key=value, got '" + s + "'");
    target[s.substr(0, eq)] = scalar_value(s.substr(eq + 1));
  }
}

enum class FlagKind { integer, number, text, int_list };

// Kebab-case flags mapped onto config keys.
struct ConfigFlag {
  const char* flag;
  const char* key;
  FlagKind kind;
  const char* help;
};

const std::vector<ConfigFlag>& config_flags() {
  static const std::vector<ConfigFlag> flags = {
      {"--method", "method", FlagKind::text, "em | vi | cvae | cpca"},
      {"--k", "k", FlagKind::integer, "shared latent dimension"},
      {"--t", "t", FlagKind::integer, "target latent dimension"},
      {"--scaling", "scaling", FlagKind::text, "none | center | zscore"},
      {"--seed", "seed", FlagKind::integer, "random seed"},
      {"--max-iter", "max_iter", FlagKind::integer, "iteration cap"},
      {"--rel-tol", "rel_tol", FlagKind::number, "relative convergence tolerance"},
      {"--lr", "lr", FlagKind::number, "ADAM step size"},
      {"--likelihood", "likelihood", FlagKind::text, "gaussian | student_t"},
      {"--student-a", "student_a", FlagKind::number, "Student-t shape a (nu = 2a)"},
      {"--w-prior", "w_prior", FlagKind::text, "none | group | horseshoe"},
      {"--rho", "rho", FlagKind::number, "group penalty strength"},
      {"--group-ids", "group_ids", FlagKind::int_list, "group of each feature, comma separated"},
      {"--horseshoe-b", "horseshoe_b", FlagKind::number, "horseshoe global scale"},
      {"--s-prior", "s_prior", FlagKind::text, "none | ard"},
      {"--ard-a0", "ard_a0", FlagKind::number, "ARD inverse-gamma shape"},
      {"--ard-b0", "ard_b0", FlagKind::number, "ARD inverse-gamma scale"},
      {"--noise-prior", "noise_prior", FlagKind::text, "none | inverse_gamma"},
      {"--noise-a", "noise_a", FlagKind::number, "noise inverse-gamma shape"},
      {"--noise-b", "noise_b", FlagKind::number, "noise inverse-gamma scale"},
      {"--n-mc", "n_mc", FlagKind::integer, "Monte Carlo samples per step"},
      {"--eval-mc", "eval_mc", FlagKind::integer, "Monte Carlo samples for the final ELBO"},
      {"--prune-delta", "prune_delta", FlagKind::number, "horseshoe pruning threshold"},
      {"--prune-p0", "prune_p0", FlagKind::number, "horseshoe pruning probability"},
      {"--epochs", "epochs", FlagKind::integer, "cvae epochs"},
      {"--batch", "batch", FlagKind::integer, "cvae minibatch size"},
      {"--alpha", "alpha", FlagKind::number, "cpca contrast strength"},
      {"--target", "target", FlagKind::text, "target CSV"},
      {"--background", "background", FlagKind::text, "background CSV"},
      {"--labels", "labels", FlagKind::text, "labels CSV"},
  };
  return flags;
}

Json typed_value(const ConfigFlag& f, const std::string& text) {
  const std::string flag = f.flag;
  switch (f.kind) {
    case FlagKind::text: return Json(text);
    case FlagKind::integer: {
      const Json v = Json::parse(text, nullptr, false);
      if (v.is_discarded() || !v.is_number_integer()) config_failure(flag + " expects an integer, got '" + text + "'");
      return v;
    }
    case FlagKind::number: {
      const Json v = Json::parse(text, nullptr, false);
      if (v.is_discarded() || !v.is_number()) config_failure(flag + " expects a number, got '" + text + "'");
      return v;
    }
    case FlagKind::int_list: {
      Json list = Json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const Json v = Json::parse(item, nullptr, false);
        if (v.is_discarded() || !v.is_number_integer()) {
          config_failure(flag + " expects comma-separated integers, got '" + text + "'");
        }
        list.push_back(v);
      }
      return list;
    }
  }
  return Json(text);
}

// Options shared by fit and sweep.
struct FitArgs {
  std::string config_path;
  std::vector<std::string> values;  // one per config_flags() entry
  std::vector<std::string> sets;
  int threads = 0;
  bool deterministic = false;
  bool timing = false;
  std::string out_dir;
  CLI::App* app = nullptr;
};

void add_fit_options(CLI::App* app, FitArgs& a) {
  a.app = app;
  a.values.resize(config_flags().size());
  app->add_option("--config", a.config_path, "JSON config; explicit flags override its keys");
  for (std::size_t i = 0; i < config_flags().size(); ++i) {
    const ConfigFlag& f = config_flags()[i];
    app->add_option(f.flag, a.values[i], f.help);
  }
  app->add_option("--set", a.sets, "extra config key=value (repeatable)");
  app->add_option("--threads", a.threads, "worker threads (default: CLVM_THREADS, else 1)")->check(CLI::PositiveNumber);
  app->add_flag("--deterministic", a.deterministic, "reproducible at any thread count");
  app->add_flag("--timing", a.timing, "record wall-clock time in the trace");
  app->add_option("--out-dir", a.out_dir, "output directory (default: current directory)");
}

// Config file, then environment fallbacks, then explicit flags.
Json merged_config(const FitArgs& a) {
  Json base = Json::object();
  if (!a.config_path.empty()) {
    base = Json::parse(read_file(a.config_path), nullptr, false);
    if (base.is_discarded() || !base.is_object()) config_failure(a.config_path + ": not a JSON object");
  }
  if (!base.contains("threads")) {
    if (const char* env = std::getenv("CLVM_THREADS"); env != nullptr && *env != '\0') {
      const Json v = Json::parse(env, nullptr, false);
      if (v.is_discarded() || !v.is_number_integer()) config_failure(std::string("CLVM_THREADS must be an integer"));
      base["threads"] = v;
    }
  }
  Json overrides = Json::object();
  for (std::size_t i = 0; i < config_flags().size(); ++i) {
    const ConfigFlag& f = config_flags()[i];
    if (a.app->count(f.flag) > 0) overrides[f.key] = typed_value(f, a.values[i]);
  }
  apply_sets(a.sets, overrides);
  if (a.app->count("--threads") > 0) overrides["threads"] = a.threads;
  if (a.deterministic) overrides["deterministic"] = true;
  if (a.timing) overrides["timing"] = true;
  if (a.app->count("--out-dir") > 0) overrides["out_dir"] = a.out_dir;

  char* resolved = nullptr;
  check(clvm_config_resolve(base.dump().c_str(), overrides.dump().c_str(), &resolved));
  return Json::parse(take(resolved));
}

fs::path out_dir_of(const Json& cfg) {
  const std::string dir = cfg.value("out_dir", std::string());
  return dir.empty() ? fs::path(".") : fs::path(dir);
}

DatasetPtr load_inputs(const Json& cfg) {
  const std::string target = cfg.value("target", std::string());
  const std::string background = cfg.value("background", std::string());
  if (target.empty() || background.empty()) config_failure("--target and --background are required");
  const std::string labels = cfg.value("labels", std::string());
  clvm_dataset* d = nullptr;
  check(clvm_dataset_load(target.c_str(), background.c_str(), labels.empty() ? nullptr : labels.c_str(), &d));
  return DatasetPtr(d);
}

// Fits and writes model.json, latents.csv, trace.jsonl, resolved_config.json.
ModelPtr fit_into(const clvm_dataset* data, const Json& cfg, const fs::path& dir) {
  make_dir(dir);
  clvm_model* m = nullptr;
  check(clvm_fit(data, cfg.dump().c_str(), &m));
  ModelPtr model(m);
  check(clvm_model_save(model.get(), (dir / "model.json").c_str()));
  check(clvm_model_write_latents(model.get(), nullptr, data, (dir / "latents.csv").c_str()));
  check(clvm_model_write_trace(model.get(), (dir / "trace.jsonl").c_str()));
  write_file(dir / "resolved_config.json", cfg.dump(2) + "\n");
  return model;
}

Json summary_of(const clvm_model* model) {
  char* s = nullptr;
  check(clvm_model_summary(model, &s));
  return Json::parse(take(s));
}

int cmd_fit(const FitArgs& a) {
  const Json cfg = merged_config(a);
  DatasetPtr data = load_inputs(cfg);
  const fs::path dir = out_dir_of(cfg);
  ModelPtr model = fit_into(data.get(), cfg, dir);
  std::cout << summary_of(model.get()).dump() << "\n";
  return 0;
}

std::string csv_number(const Json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

int cmd_sweep(const FitArgs& a, const std::string& param, const std::string& values) {
  std::vector<std::string> grid;
  {
    std::stringstream ss(values);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) grid.push_back(item);
    }
  }
  if (grid.empty()) config_failure("sweep grid is empty");
  if (param.empty()) config_failure("--param is required");

  const Json base = merged_config(a);
  DatasetPtr data = load_inputs(base);
  const fs::path dir = out_dir_of(base);
  make_dir(dir);

  std::ostringstream summary;
  summary << "param,value,dir,objective,effective_rank,zero_norm_rows,pruned_rows,w_row_norms\n";
  for (const auto& text : grid) {
    Json over = Json::object();
    over[param] = scalar_value(text);
    char* resolved = nullptr;
    check(clvm_config_resolve(base.dump().c_str(), over.dump().c_str(), &resolved));
    Json cfg = Json::parse(take(resolved));
    const std::string sub = param + "_" + text;
    cfg["out_dir"] = (dir / sub).string();
    ModelPtr model = fit_into(data.get(), cfg, dir / sub);
    const Json s = summary_of(model.get());
    std::string norms;
    if (s.contains("w_row_norms")) {
      for (const auto& v : s["w_row_norms"]) norms += (norms.empty() ? "" : ";") + v.dump();
    }
    summary << param << ',' << text << ',' << sub << ',' << csv_number(s.value("objective", Json())) << ','
            << csv_number(s.value("effective_rank", Json())) << ',' << csv_number(s.value("zero_norm_rows", Json()))
            << ',' << csv_number(s.value("pruned_rows", Json())) << ',' << norms << '\n';
    if (cfg.value("method", std::string()) == "cpca") {
      char* j = nullptr;
      check(clvm_model_to_json(model.get(), &j));
      const Json mj = Json::parse(take(j));
      const Json& p = mj["projection"];
      const std::size_t rows = p["rows"].get<std::size_t>();
      const std::size_t cols = p["cols"].get<std::size_t>();
      std::ostringstream csv;
      for (std::size_t c = 0; c < cols; ++c) csv << (c ? "," : "") << "t" << (c + 1);
      csv << '\n';
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) csv << (c ? "," : "") << p["data"][c * rows + r].dump();
        csv << '\n';
      }
      write_file(dir / sub / "projection.csv", csv.str());
    }
  }
  write_file(dir / "summary.csv", summary.str());
  std::cout << summary.str();
  return 0;
}

struct TransformArgs {
  std::string model;
  std::string target;
  std::string background;
  std::string labels;
  std::string out_dir;
};

int cmd_transform(const TransformArgs& a) {
  clvm_model* m = nullptr;
  check(clvm_model_load(a.model.c_str(), &m));
  ModelPtr model(m);
  clvm_dataset* d = nullptr;
  check(clvm_dataset_load(a.target.c_str(), a.background.c_str(), a.labels.empty() ? nullptr : a.labels.c_str(), &d));
  DatasetPtr data(d);
  const fs::path dir = a.out_dir.empty() ? fs::path(".") : fs::path(a.out_dir);
  make_dir(dir);
  check(clvm_model_write_latents(model.get(), data.get(), nullptr, (dir / "latents.csv").c_str()));
  return 0;
}

struct GenerateArgs {
  std::string generator;
  std::int64_t seed = 0;
  std::int64_t outliers = 0;
  double missing = 0.0;
  std::vector<std::string> sets;
  std::string out_dir;
  CLI::App* app = nullptr;
};

int cmd_generate(const GenerateArgs& a) {
  Json opts = Json::object();
  apply_sets(a.sets, opts);
  opts["seed"] = a.seed;
  if (a.app->count("--with-outliers") > 0) opts["with_outliers"] = a.outliers;
  if (a.app->count("--missing-fraction") > 0) opts["missing_fraction"] = a.missing;
  clvm_dataset* d = nullptr;
  check(clvm_dataset_generate(a.generator.c_str(), opts.dump().c_str(), &d));
  DatasetPtr data(d);
  const std::string dir = a.out_dir.empty() ? std::string(".") : a.out_dir;
  check(clvm_dataset_save(data.get(), dir.c_str()));
  std::size_t n = 0, m = 0, dim = 0, missing = 0;
  check(clvm_dataset_shape(data.get(), &n, &m, &dim, &missing));
  std::cout << Json{{"n", n}, {"m", m}, {"d", dim}, {"missing", missing}}.dump() << "\n";
  return 0;
}

struct EvalArgs {
  std::string latents;
  std::string labels;
  std::string reference;
  std::string rows = "target";
  std::string coords = "t";
  int clusters = 0;
  std::int64_t seed = 0;
  std::string out_dir;
  CLI::App* app = nullptr;
};

int cmd_eval(const EvalArgs& a) {
  Json opts{{"rows", a.rows}, {"coords", a.coords}, {"seed", a.seed}};
  if (a.clusters > 0) opts["clusters"] = a.clusters;
  char* report = nullptr;
  check(clvm_evaluate(a.latents.c_str(), a.labels.empty() ? nullptr : a.labels.c_str(),
                      a.reference.empty() ? nullptr : a.reference.c_str(), opts.dump().c_str(), &report));
  const Json r = Json::parse(take(report));
  if (!a.out_dir.empty()) {
    make_dir(a.out_dir);
    write_file(fs::path(a.out_dir) / "eval.json", r.dump(2) + "\n");
  }
  std::cout << r.dump() << "\n";
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive latent variable models: fit, transform, generate, sweep, eval."};
  app.require_subcommand(1);
  app.set_version_flag("--version", clvm_version());

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "Fit a model and write model.json, latents.csv, trace.jsonl");
  add_fit_options(fit, fit_args);

  FitArgs sweep_args;
  std::string sweep_param;
  std::string sweep_values;
  CLI::App* sweep = app.add_subcommand("sweep", "Fit once per grid value of one config key");
  add_fit_options(sweep, sweep_args);
  sweep->add_option("--param", sweep_param, "config key to vary (e.g. rho, alpha)")->required();
  sweep->add_option("--values", sweep_values, "comma-separated grid")->required();

  TransformArgs tr;
  CLI::App* transform = app.add_subcommand("transform", "Latents of new data under a saved model");
  transform->add_option("--model", tr.model, "model.json")->required();
  transform->add_option("--target", tr.target, "target CSV")->required();
  transform->add_option("--background", tr.background, "background CSV")->required();
  transform->add_option("--labels", tr.labels, "labels CSV");
  transform->add_option("--out-dir", tr.out_dir, "output directory");

  GenerateArgs gen;
  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic dataset");
  gen.app = generate;
  generate->add_option("generator", gen.generator, "subgroups | planted | signal")->required();
  generate->add_option("--seed", gen.seed, "random seed");
  generate->add_option("--with-outliers", gen.outliers, "uniform [-20, 20] rows added to each set");
  generate->add_option("--missing-fraction", gen.missing, "fraction of target cells deleted");
  generate->add_option("--set", gen.sets, "generator option key=value (repeatable)");
  generate->add_option("--out-dir", gen.out_dir, "output directory");

  EvalArgs ev;
  CLI::App* eval = app.add_subcommand("eval", "Score a latent CSV against labels or a reference");
  ev.app = eval;
  eval->add_option("--latents", ev.latents, "latent CSV")->required();
  eval->add_option("--labels", ev.labels, "labels CSV (default: label column of the latent file)");
  eval->add_option("--reference", ev.reference, "latent CSV to compare by Procrustes distance");
  eval->add_option("--rows", ev.rows, "target | background | all");
  eval->add_option("--coords", ev.coords, "t | z | tz");
  eval->add_option("--clusters", ev.clusters, "k-means clusters (default: distinct labels)");
  eval->add_option("--seed", ev.seed, "k-means seed");
  eval->add_option("--out-dir", ev.out_dir, "write eval.json here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[config]: " << one_line(e.what()) << "\n";
    return CLVM_ERR_CONFIG;
  }

  try {
    if (*fit) return cmd_fit(fit_args);
    if (*sweep) return cmd_sweep(sweep_args, sweep_param, sweep_values);
    if (*transform) return cmd_transform(tr);
    if (*generate) return cmd_generate(gen);
    if (*eval) return cmd_eval(ev);
  } catch (const Failure& f) {
    std::cerr << "error[" << f.kind << "]: " << one_line(f.message) << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << one_line(e.what()) << "\n";
    return CLVM_ERR_INTERNAL;
  }
  return 0;
}
