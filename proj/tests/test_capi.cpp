#include <doctest.h>

#include <cstring>
#include <string>

#include "clvm/clvm.h"
#include "test_util.hpp"

using clvm_test::TempDir;
using clvm_test::write_file;

TEST_CASE("NULL arguments report a configuration error") {
  CHECK(clvm_dataset_load(nullptr, "b.csv", nullptr, nullptr) == CLVM_ERR_CONFIG);
  CHECK(std::string(clvm_last_error()).find("NULL") != std::string::npos);
  clvm_model* model = nullptr;
  CHECK(clvm_fit(nullptr, "{}", &model) == CLVM_ERR_CONFIG);
  CHECK(model == nullptr);
  clvm_dataset_free(nullptr);
  clvm_model_free(nullptr);
  clvm_string_free(nullptr);
}

TEST_CASE("status codes follow the error kind") {
  TempDir dir("capi_status");
  clvm_dataset* data = nullptr;
  CHECK(clvm_dataset_load((dir / "absent.csv").c_str(), (dir / "absent.csv").c_str(), nullptr, &data) ==
        CLVM_ERR_IO);
  write_file(dir / "t.csv", "a,b\n1,2\n3,x\n");
  write_file(dir / "b.csv", "a,b\n1,2\n");
  CHECK(clvm_dataset_load((dir / "t.csv").c_str(), (dir / "b.csv").c_str(), nullptr, &data) == CLVM_ERR_DATA);
  CHECK(clvm_dataset_generate("subgroups", "{not json", &data) == CLVM_ERR_CONFIG);
  CHECK(clvm_dataset_generate("subgroups", R"({"unknown": 1})", &data) == CLVM_ERR_CONFIG);
  char* resolved = nullptr;
  CHECK(clvm_config_resolve(R"({"method": "em"})", R"({"k": -1})", &resolved) == CLVM_ERR_CONFIG);
  CHECK(resolved == nullptr);
  CHECK(clvm_last_error()[0] != '\0');
  CHECK(clvm_version()[0] != '\0');
}

TEST_CASE("fit, save, load and transform through the C interface") {
  TempDir dir("capi_fit");
  clvm_dataset* data = nullptr;
  REQUIRE(clvm_dataset_generate("subgroups", R"({"n_per_subgroup": 8, "m": 30, "seed": 2})", &data) == CLVM_OK);
  CHECK(clvm_last_error()[0] == '\0');
  size_t n = 0, m = 0, d = 0, missing = 1;
  REQUIRE(clvm_dataset_shape(data, &n, &m, &d, &missing) == CLVM_OK);
  CHECK(n == 32);
  CHECK(m == 30);
  CHECK(d == 30);
  CHECK(missing == 0);
  REQUIRE(clvm_dataset_save(data, dir.path().c_str()) == CLVM_OK);

  clvm_model* model = nullptr;
  REQUIRE(clvm_fit(data, R"({"method": "em", "max_iter": 20})", &model) == CLVM_OK);
  const std::string model_path = (dir / "model.json").string();
  REQUIRE(clvm_model_save(model, model_path.c_str()) == CLVM_OK);
  REQUIRE(clvm_model_write_latents(model, nullptr, data, (dir / "fit.csv").c_str()) == CLVM_OK);
  REQUIRE(clvm_model_write_trace(model, (dir / "trace.jsonl").c_str()) == CLVM_OK);

  clvm_model* loaded = nullptr;
  REQUIRE(clvm_model_load(model_path.c_str(), &loaded) == CLVM_OK);
  char* a = nullptr;
  char* b = nullptr;
  REQUIRE(clvm_model_to_json(model, &a) == CLVM_OK);
  REQUIRE(clvm_model_to_json(loaded, &b) == CLVM_OK);
  CHECK(std::strcmp(a, b) == 0);
  clvm_string_free(a);
  clvm_string_free(b);

  CHECK(clvm_model_write_latents(loaded, nullptr, data, (dir / "x.csv").c_str()) == CLVM_ERR_CONFIG);
  clvm_dataset* reloaded = nullptr;
  REQUIRE(clvm_dataset_load((dir / "target.csv").c_str(), (dir / "background.csv").c_str(),
                            (dir / "labels.csv").c_str(), &reloaded) == CLVM_OK);
  REQUIRE(clvm_model_write_latents(loaded, reloaded, nullptr, (dir / "transformed.csv").c_str()) == CLVM_OK);
  CHECK(clvm_test::read_file(dir / "transformed.csv") == clvm_test::read_file(dir / "fit.csv"));

  char* summary = nullptr;
  REQUIRE(clvm_model_summary(model, &summary) == CLVM_OK);
  CHECK(std::string(summary).find("\"method\":\"em\"") != std::string::npos);
  clvm_string_free(summary);

  char* report = nullptr;
  REQUIRE(clvm_evaluate((dir / "fit.csv").c_str(), (dir / "labels.csv").c_str(), nullptr, nullptr, &report) ==
          CLVM_OK);
  CHECK(std::string(report).find("\"ari\"") != std::string::npos);
  clvm_string_free(report);

  clvm_model_free(model);
  clvm_model_free(loaded);
  clvm_dataset_free(data);
  clvm_dataset_free(reloaded);
}

TEST_CASE("loading a corrupt model file is a data error") {
  TempDir dir("capi_corrupt");
  write_file(dir / "m.json", "{\"format_version\": 1");
  clvm_model* model = nullptr;
  CHECK(clvm_model_load((dir / "m.json").c_str(), &model) == CLVM_ERR_DATA);
  CHECK(model == nullptr);
}
