#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "test_util.hpp"

using clvm_test::read_file;
using clvm_test::TempDir;
using clvm_test::write_file;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const TempDir& dir, const std::string& args) {
  const std::string out = (dir / "stdout.txt").string(), err = (dir / "stderr.txt").string();
  const std::string cmd = std::string("\"") + CLVM_CLI_PATH + "\" " + args + " > \"" + out + "\" 2> \"" + err + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

std::string quoted(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

// Writes a small subgroups dataset into dir/data.
void small_dataset(const TempDir& dir) {
  const Result r = run(dir, "generate subgroups --seed 3 --set n_per_subgroup=10 --set m=40 --out-dir " +
                                quoted(dir / "data"));
  REQUIRE(r.code == 0);
}

std::string data_flags(const TempDir& dir) {
  return " --target " + quoted(dir / "data/target.csv") + " --background " + quoted(dir / "data/background.csv") +
         " --labels " + quoted(dir / "data/labels.csv");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) out.push_back(part);
  return out;
}

}  // namespace

TEST_CASE("generate writes the default subgroup sizes") {
  TempDir dir("cli_generate");
  REQUIRE(run(dir, "generate subgroups --out-dir " + quoted(dir / "a")).code == 0);
  CHECK(count_lines(read_file(dir / "a/target.csv")) == 401);
  CHECK(count_lines(read_file(dir / "a/background.csv")) == 401);
  REQUIRE(run(dir, "generate subgroups --with-outliers 20 --out-dir " + quoted(dir / "b")).code == 0);
  CHECK(count_lines(read_file(dir / "b/target.csv")) == 421);
}

TEST_CASE("exit codes follow the error kind") {
  TempDir dir("cli_codes");
  small_dataset(dir);
  const std::string data = data_flags(dir);
  Result r = run(dir, "fit --method bogus" + data + " --out-dir " + quoted(dir / "o"));
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error[config]", 0) == 0);
  CHECK(run(dir, "fit --k two" + data).code == 2);
  CHECK(run(dir, "fit --set nonsense=1" + data + " --out-dir " + quoted(dir / "o")).code == 2);
  r = run(dir, "fit --target " + quoted(dir / "missing.csv") + " --background " + quoted(dir / "missing.csv") +
                   " --out-dir " + quoted(dir / "o"));
  CHECK(r.code == 5);
  REQUIRE(run(dir, "generate subgroups --missing-fraction 0.1 --set n_per_subgroup=5 --out-dir " +
                       quoted(dir / "holes")).code == 0);
  r = run(dir, "fit --method em --target " + quoted(dir / "holes/target.csv") + " --background " +
                   quoted(dir / "holes/background.csv") + " --out-dir " + quoted(dir / "o"));
  CHECK(r.code == 3);
  CHECK(r.err.rfind("error[data]", 0) == 0);
  CHECK(run(dir, "no-such-command").code == 2);
}

TEST_CASE("fit writes model, latents, trace and resolved config") {
  TempDir dir("cli_fit");
  small_dataset(dir);
  REQUIRE(run(dir, "fit --method em --max-iter 30" + data_flags(dir) + " --out-dir " + quoted(dir / "fit")).code == 0);
  for (const char* f : {"model.json", "latents.csv", "trace.jsonl", "resolved_config.json"}) {
    CHECK(std::filesystem::exists(dir / (std::string("fit/") + f)));
  }
  CHECK(count_lines(read_file(dir / "fit/latents.csv")) == 1 + 40 + 40);
  // Re-running from the resolved config reproduces the model.
  REQUIRE(run(dir, "fit --config " + quoted(dir / "fit/resolved_config.json") + data_flags(dir) + " --out-dir " +
                       quoted(dir / "again")).code == 0);
  CHECK(read_file(dir / "fit/model.json") == read_file(dir / "again/model.json"));
  // Transforming the training data reproduces the fitted latents.
  REQUIRE(run(dir, "transform --model " + quoted(dir / "fit/model.json") + data_flags(dir) + " --out-dir " +
                       quoted(dir / "tr")).code == 0);
  CHECK(read_file(dir / "tr/latents.csv") == read_file(dir / "fit/latents.csv"));
}

TEST_CASE("a single-point sweep equals a plain fit") {
  TempDir dir("cli_sweep1");
  small_dataset(dir);
  const std::string common = " --method em --max-iter 30" + data_flags(dir);
  REQUIRE(run(dir, "fit --k 3" + common + " --out-dir " + quoted(dir / "fit")).code == 0);
  REQUIRE(run(dir, "sweep --param k --values 3" + common + " --out-dir " + quoted(dir / "sweep")).code == 0);
  CHECK(read_file(dir / "sweep/k_3/model.json") == read_file(dir / "fit/model.json"));
  CHECK(count_lines(read_file(dir / "sweep/summary.csv")) == 2);
  CHECK(run(dir, "sweep --param k --values ," + common + " --out-dir " + quoted(dir / "none")).code == 2);
}

TEST_CASE("a group penalty shrinks the rows of W") {
  TempDir dir("cli_sweep_rho");
  small_dataset(dir);
  REQUIRE(run(dir, "sweep --param rho --values 0,10 --method vi --w-prior group --max-iter 1500 --seed 1" +
                       data_flags(dir) + " --out-dir " + quoted(dir / "s")).code == 0);
  const auto lines = split(read_file(dir / "s/summary.csv"), '\n');
  REQUIRE(lines.size() == 3);
  const auto header = split(lines[0], ',');
  const auto col = std::find(header.begin(), header.end(), "w_row_norms") - header.begin();
  const auto zero_col = std::find(header.begin(), header.end(), "zero_norm_rows") - header.begin();
  auto total_norm = [&](const std::string& line) {
    const auto norms = split(split(line, ',')[static_cast<std::size_t>(col)], ';');
    REQUIRE(norms.size() == 30);
    double sum = 0.0;
    for (const auto& v : norms) sum += std::stod(v);
    return sum;
  };
  auto zero_rows = [&](const std::string& line) { return std::stoi(split(line, ',')[static_cast<std::size_t>(zero_col)]); };
  INFO("summed row norms: rho=0 " << total_norm(lines[1]) << ", rho=10 " << total_norm(lines[2]));
  CHECK(total_norm(lines[2]) < 0.75 * total_norm(lines[1]));
  CHECK(zero_rows(lines[2]) > zero_rows(lines[1]));
}

TEST_CASE("a cPCA alpha sweep writes one projection per value") {
  TempDir dir("cli_cpca");
  small_dataset(dir);
  REQUIRE(run(dir, "sweep --param alpha --values 0,1,10 --method cpca" + data_flags(dir) + " --out-dir " +
                       quoted(dir / "s")).code == 0);
  for (const char* a : {"alpha_0", "alpha_1", "alpha_10"}) {
    CHECK(count_lines(read_file(dir / "s" / a / "projection.csv")) == 1 + 30);
  }
}

TEST_CASE("eval scores separated, random and identical configurations") {
  TempDir dir("cli_eval");
  std::string sep = "id,set,label,t1,t2\n", rnd = sep;
  std::uint64_t state = 12345;
  auto next = [&] {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<double>(state >> 11) / 9007199254740992.0;
  };
  for (int i = 0; i < 600; ++i) {
    const int label = i % 3;
    std::ostringstream row;
    row << i << ",target," << label << "," << 10.0 * label + next() << "," << next() << "\n";
    sep += row.str();
    std::ostringstream r2;
    r2 << i << ",target," << label << "," << next() << "," << next() << "\n";
    rnd += r2.str();
  }
  write_file(dir / "sep.csv", sep);
  write_file(dir / "rnd.csv", rnd);
  Result r = run(dir, "eval --latents " + quoted(dir / "sep.csv") + " --reference " + quoted(dir / "sep.csv"));
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["ari"].get<double>() == doctest::Approx(1.0));
  CHECK(j["procrustes"].get<double>() == doctest::Approx(0.0));
  r = run(dir, "eval --latents " + quoted(dir / "rnd.csv") + " --out-dir " + quoted(dir / "ev"));
  REQUIRE(r.code == 0);
  CHECK(std::abs(nlohmann::json::parse(r.out)["ari"].get<double>()) < 0.05);
  CHECK(std::filesystem::exists(dir / "ev/eval.json"));
}
