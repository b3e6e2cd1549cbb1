#ifndef CLVM_CLVM_H
#define CLVM_CLVM_H

/* C interface of the contrastive latent variable model toolkit.
 *
 * Objects are opaque handles released with their _free function. Every call
 * returns a clvm_status; on failure clvm_last_error() describes the cause
 * for the calling thread until its next call. Strings returned through
 * `char**` are owned by the caller and released with clvm_string_free.
 * JSON arguments are UTF-8 text; NULL means an empty object. */

#include <stddef.h>

#if defined(_WIN32)
#define CLVM_API __declspec(dllexport)
#else
#define CLVM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum clvm_status {
  CLVM_OK = 0,
  CLVM_ERR_CONFIG = 2,   /* invalid option, key or argument */
  CLVM_ERR_DATA = 3,     /* malformed, mismatched or unsupported input */
  CLVM_ERR_NUMERIC = 4,  /* non-finite objective or failed factorization */
  CLVM_ERR_IO = 5,       /* file could not be read or written */
  CLVM_ERR_INTERNAL = 6
} clvm_status;

typedef struct clvm_dataset clvm_dataset;
typedef struct clvm_model clvm_model;

CLVM_API const char* clvm_version(void);
CLVM_API const char* clvm_last_error(void);
CLVM_API void clvm_string_free(char* s);

/* Datasets ---------------------------------------------------------------- */

/* Loads target and background CSVs with a header row. `labels_path` may be
 * NULL; otherwise it is a `label` or `id,set,label` file. */
CLVM_API clvm_status clvm_dataset_load(const char* target_path, const char* background_path,
                                       const char* labels_path, clvm_dataset** out);

/* Generators "subgroups", "planted" and "signal"; see the README for keys. */
CLVM_API clvm_status clvm_dataset_generate(const char* generator, const char* options_json, clvm_dataset** out);

/* Writes target.csv, background.csv and labels.csv into `dir`. */
CLVM_API clvm_status clvm_dataset_save(const clvm_dataset* data, const char* dir);

CLVM_API clvm_status clvm_dataset_shape(const clvm_dataset* data, size_t* n, size_t* m, size_t* d,
                                        size_t* missing);
CLVM_API void clvm_dataset_free(clvm_dataset* data);

/* Configuration ----------------------------------------------------------- */

/* Parses `base_json` with `overrides_json` keys replacing its own, validates,
 * and returns the fully resolved configuration. */
CLVM_API clvm_status clvm_config_resolve(const char* base_json, const char* overrides_json, char** resolved_json);

/* Fitting and models ------------------------------------------------------ */

CLVM_API clvm_status clvm_fit(const clvm_dataset* data, const char* config_json, clvm_model** out);

CLVM_API clvm_status clvm_model_save(const clvm_model* model, const char* path);
CLVM_API clvm_status clvm_model_load(const char* path, clvm_model** out);
CLVM_API clvm_status clvm_model_to_json(const clvm_model* model, char** json);

/* One JSON object per line. */
CLVM_API clvm_status clvm_model_write_trace(const clvm_model* model, const char* path);

/* Latent means as CSV. With `data` NULL the fitted rows are written (only
 * valid for a model returned by clvm_fit); otherwise `data` is transformed
 * under the model. `labels_from` supplies labels when `data` is NULL. */
CLVM_API clvm_status clvm_model_write_latents(const clvm_model* model, const clvm_dataset* data,
                                              const clvm_dataset* labels_from, const char* path);

CLVM_API clvm_status clvm_model_summary(const clvm_model* model, char** json);
CLVM_API void clvm_model_free(clvm_model* model);

/* Evaluation -------------------------------------------------------------- */

/* Scores a latent CSV: ARI of k-means against labels, silhouette of the
 * labels, and with `reference_path` the Procrustes distance. `labels_path`
 * and `reference_path` may be NULL. */
CLVM_API clvm_status clvm_evaluate(const char* latents_path, const char* labels_path, const char* reference_path,
                                   const char* options_json, char** report_json);

#ifdef __cplusplus
}
#endif

#endif
