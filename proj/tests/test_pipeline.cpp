#include <doctest.h>

#include <string>

#include "clvm/errors.hpp"
#include "clvm/pipeline.hpp"
#include "test_util.hpp"

using namespace clvm;
using clvm_test::TempDir;
using clvm_test::write_file;

namespace {

ContrastivePair small_data() { return generate_dataset("subgroups", Json{{"n_per_subgroup", 8}, {"m", 30}, {"seed", 1}}); }

RunConfig quick(Method method) {
  RunConfig c;
  c.method = method;
  c.max_iter = 20;
  c.eval_mc = 4;
  c.epochs = 2;
  c.batch = 16;
  c.deterministic = true;
  return c;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad types") {
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"nonsense", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"k", "two"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"method", "gibbs"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"method", "cpca"}, {"t", 0}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"method", "em"}, {"k", 0}, {"t", 0}}), ConfigError);
}

TEST_CASE("method defaults resolve per method") {
  const RunConfig vi = RunConfig::from_json(Json{{"method", "vi"}});
  CHECK(vi.resolved_max_iter() == 5000);
  CHECK(vi.resolved_rel_tol() == 1e-5);
  const RunConfig em = RunConfig::from_json(Json{{"method", "em"}});
  CHECK(em.resolved_max_iter() == 500);
  CHECK(RunConfig::from_json(Json{{"method", "cvae"}}).resolved_lr() == 1e-3);
}

TEST_CASE("resolved config round trips through JSON") {
  const RunConfig c = resolve_config(Json{{"method", "vi"}, {"k", 3}, {"rho", 2.5}}, Json{{"k", 4}});
  CHECK(c.k == 4);
  CHECK(c.rho == 2.5);
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("model JSON round trip is exact for every method") {
  const ContrastivePair data = small_data();
  for (Method m : {Method::em, Method::vi, Method::cvae, Method::cpca}) {
    INFO(to_string(m));
    const ModelArtifact fit = fit_model(data, quick(m));
    const Json j = model_to_json(fit);
    const ModelArtifact back = model_from_json(Json::parse(j.dump()));
    CHECK(model_to_json(back).dump() == j.dump());
    const LatentTable a = transform_data(fit, data);
    const LatentTable b = transform_data(back, data);
    CHECK((a.target_t - b.target_t).norm() == 0.0);
  }
}

TEST_CASE("model JSON with the wrong format version is refused") {
  const ModelArtifact fit = fit_model(small_data(), quick(Method::em));
  Json j = model_to_json(fit);
  j["format_version"] = 99;
  CHECK_THROWS_AS(model_from_json(j), DataError);
}

TEST_CASE("stored config leaves out file paths") {
  RunConfig c = quick(Method::em);
  c.target = "/somewhere/target.csv";
  const Json j = model_to_json(fit_model(small_data(), c));
  CHECK_FALSE(j["config"].contains("target"));
}

TEST_CASE("generate options") {
  CHECK(generate_dataset("subgroups", Json::object()).n() == 400);
  CHECK(generate_dataset("subgroups", Json{{"with_outliers", 20}}).n() == 420);
  const ContrastivePair m = generate_dataset("subgroups", Json{{"missing_fraction", 0.1}, {"n_per_subgroup", 5}});
  CHECK(m.missing_count() > 0);
  CHECK_THROWS_AS(generate_dataset("subgroups", Json{{"colour", 1}}), ConfigError);
  CHECK_THROWS_AS(generate_dataset("spirals", Json::object()), ConfigError);
  CHECK(generate_dataset("planted", Json{{"d", 7}, {"n", 30}, {"m", 20}}).dim() == 7);
}

TEST_CASE("latent CSV has one row per data row") {
  const ContrastivePair data = small_data();
  const ModelArtifact fit = fit_model(data, quick(Method::em));
  const std::string csv = latent_csv(fitted_latents(fit), data);
  CHECK(csv.rfind("id,set,label,t1,t2,z1,z2\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + data.n() + data.m());
}

TEST_CASE("eval reports a row-count mismatch as a data error") {
  TempDir dir("pipeline_eval");
  const ContrastivePair data = small_data();
  const ModelArtifact fit = fit_model(data, quick(Method::em));
  write_latent_csv(dir / "lat.csv", fitted_latents(fit), data);
  write_file(dir / "labels.csv", "label\n0\n1\n");
  CHECK_THROWS_AS(evaluate_latents(dir / "lat.csv", dir / "labels.csv", "", Json::object()), DataError);
  const Json ok = evaluate_latents(dir / "lat.csv", "", "", Json::object());
  CHECK(ok["points"] == data.n());
  CHECK_THROWS_AS(evaluate_latents(dir / "lat.csv", "", "", Json{{"coords", "q"}}), ConfigError);
}

TEST_CASE("summary lists per-row norms of W") {
  const ModelArtifact fit = fit_model(small_data(), quick(Method::em));
  const Json s = model_summary(fit);
  CHECK(s["method"] == "em");
  CHECK(s["w_row_norms"].size() == 30u);
}
