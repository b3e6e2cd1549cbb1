#include "clvm/clvm.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>

#include "clvm/errors.hpp"
#include "clvm/pipeline.hpp"

struct clvm_dataset {
  clvm::ContrastivePair pair;
  std::vector<std::string> header;
};

struct clvm_model {
  clvm::ModelArtifact artifact;
  bool has_fitted_latents = false;
};

namespace {

thread_local std::string g_last_error;

clvm_status status_of(clvm::ErrorKind kind) {
  switch (kind) {
    case clvm::ErrorKind::config: return CLVM_ERR_CONFIG;
    case clvm::ErrorKind::data: return CLVM_ERR_DATA;
    case clvm::ErrorKind::numerical: return CLVM_ERR_NUMERIC;
    case clvm::ErrorKind::io: return CLVM_ERR_IO;
  }
  return CLVM_ERR_INTERNAL;
}

template <typename F>
clvm_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return CLVM_OK;
  } catch (const clvm::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const nlohmann::json::parse_error& e) {
    g_last_error = std::string("invalid JSON: ") + e.what();
    return CLVM_ERR_CONFIG;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("malformed JSON value: ") + e.what();
    return CLVM_ERR_DATA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CLVM_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CLVM_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return CLVM_ERR_INTERNAL;
  }
}

void require(const void* p, const char* name) {
  if (p == nullptr) throw clvm::ConfigError(std::string(name) + " must not be NULL");
}

clvm::Json parse_json(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return clvm::Json::object();
  try {
    return clvm::Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw clvm::ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw clvm::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw clvm::IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw clvm::IoError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

extern "C" {

const char* clvm_version(void) { return "1.0.0"; }

const char* clvm_last_error(void) { return g_last_error.c_str(); }

void clvm_string_free(char* s) { std::free(s); }

clvm_status clvm_dataset_load(const char* target_path, const char* background_path, const char* labels_path,
                              clvm_dataset** out) {
  return guarded([&] {
    require(target_path, "target_path");
    require(background_path, "background_path");
    require(out, "out");
    *out = nullptr;
    auto ds = std::make_unique<clvm_dataset>();
    clvm::CsvTable t = clvm::load_csv(target_path);
    clvm::CsvTable b = clvm::load_csv(background_path);
    if (t.values.cols() != b.values.cols()) {
      throw clvm::DataError("target has " + std::to_string(t.values.cols()) + " columns, background has " +
                            std::to_string(b.values.cols()));
    }
    ds->header = t.header;
    ds->pair.target = std::move(t.values);
    ds->pair.target_mask = std::move(t.mask);
    ds->pair.background = std::move(b.values);
    ds->pair.background_mask = std::move(b.mask);
    if (labels_path != nullptr && *labels_path != '\0') {
      clvm::LabelsTable l = clvm::load_labels_csv(labels_path);
      if (static_cast<clvm::Index>(l.target.size()) != ds->pair.n()) {
        throw clvm::DataError(std::string(labels_path) + ": " + std::to_string(l.target.size()) +
                              " target labels for " + std::to_string(ds->pair.n()) + " target rows");
      }
      if (!l.background.empty() && static_cast<clvm::Index>(l.background.size()) != ds->pair.m()) {
        throw clvm::DataError(std::string(labels_path) + ": " + std::to_string(l.background.size()) +
                              " background labels for " + std::to_string(ds->pair.m()) + " background rows");
      }
      ds->pair.target_labels = std::move(l.target);
      ds->pair.background_labels = std::move(l.background);
    }
    ds->pair.validate();
    *out = ds.release();
  });
}

clvm_status clvm_dataset_generate(const char* generator, const char* options_json, clvm_dataset** out) {
  return guarded([&] {
    require(generator, "generator");
    require(out, "out");
    *out = nullptr;
    auto ds = std::make_unique<clvm_dataset>();
    ds->pair = clvm::generate_dataset(generator, parse_json(options_json, "options"));
    ds->header = clvm::default_header(ds->pair.dim());
    *out = ds.release();
  });
}

clvm_status clvm_dataset_save(const clvm_dataset* data, const char* dir) {
  return guarded([&] {
    require(data, "data");
    require(dir, "dir");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw clvm::IoError("cannot create " + std::string(dir) + ": " + ec.message());
    const std::filesystem::path root(dir);
    clvm::write_csv(root / "target.csv", {data->header, data->pair.target, data->pair.target_mask});
    clvm::write_csv(root / "background.csv", {data->header, data->pair.background, data->pair.background_mask});
    if (!data->pair.target_labels.empty()) clvm::write_labels_csv(root / "labels.csv", data->pair);
  });
}

clvm_status clvm_dataset_shape(const clvm_dataset* data, size_t* n, size_t* m, size_t* d, size_t* missing) {
  return guarded([&] {
    require(data, "data");
    if (n) *n = static_cast<size_t>(data->pair.n());
    if (m) *m = static_cast<size_t>(data->pair.m());
    if (d) *d = static_cast<size_t>(data->pair.dim());
    if (missing) *missing = static_cast<size_t>(data->pair.missing_count());
  });
}

void clvm_dataset_free(clvm_dataset* data) { delete data; }

clvm_status clvm_config_resolve(const char* base_json, const char* overrides_json, char** resolved_json) {
  return guarded([&] {
    require(resolved_json, "resolved_json");
    *resolved_json = nullptr;
    const clvm::RunConfig cfg =
        clvm::resolve_config(parse_json(base_json, "config"), parse_json(overrides_json, "overrides"));
    *resolved_json = copy_string(cfg.to_json().dump(2) + "\n");
  });
}

clvm_status clvm_fit(const clvm_dataset* data, const char* config_json, clvm_model** out) {
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    *out = nullptr;
    const clvm::RunConfig cfg = clvm::RunConfig::from_json(parse_json(config_json, "config"));
    auto model = std::make_unique<clvm_model>();
    model->artifact = clvm::fit_model(data->pair, cfg);
    model->has_fitted_latents = true;
    *out = model.release();
  });
}

clvm_status clvm_model_save(const clvm_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    write_text(path, clvm::model_to_json(model->artifact).dump(2) + "\n");
  });
}

clvm_status clvm_model_load(const char* path, clvm_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    const std::string text = read_text(path);
    clvm::Json j;
    try {
      j = clvm::Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw clvm::DataError(std::string(path) + ": not valid JSON: " + e.what());
    }
    auto model = std::make_unique<clvm_model>();
    model->artifact = clvm::model_from_json(j);
    *out = model.release();
  });
}

clvm_status clvm_model_to_json(const clvm_model* model, char** json) {
  return guarded([&] {
    require(model, "model");
    require(json, "json");
    *json = nullptr;
    *json = copy_string(clvm::model_to_json(model->artifact).dump(2) + "\n");
  });
}

clvm_status clvm_model_write_trace(const clvm_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    write_text(path, clvm::trace_jsonl(model->artifact));
  });
}

clvm_status clvm_model_write_latents(const clvm_model* model, const clvm_dataset* data,
                                     const clvm_dataset* labels_from, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    if (data == nullptr) {
      if (!model->has_fitted_latents) {
        throw clvm::ConfigError("a loaded model has no fitted latents; pass data to transform");
      }
      require(labels_from, "labels_from");
      clvm::write_latent_csv(path, clvm::fitted_latents(model->artifact), labels_from->pair);
    } else {
      clvm::write_latent_csv(path, clvm::transform_data(model->artifact, data->pair), data->pair);
    }
  });
}

clvm_status clvm_model_summary(const clvm_model* model, char** json) {
  return guarded([&] {
    require(model, "model");
    require(json, "json");
    *json = nullptr;
    *json = copy_string(clvm::model_summary(model->artifact).dump());
  });
}

void clvm_model_free(clvm_model* model) { delete model; }

clvm_status clvm_evaluate(const char* latents_path, const char* labels_path, const char* reference_path,
                          const char* options_json, char** report_json) {
  return guarded([&] {
    require(latents_path, "latents_path");
    require(report_json, "report_json");
    *report_json = nullptr;
    const clvm::Json report =
        clvm::evaluate_latents(latents_path, labels_path ? labels_path : "", reference_path ? reference_path : "",
                               parse_json(options_json, "options"));
    *report_json = copy_string(report.dump());
  });
}

}  // extern "C"
