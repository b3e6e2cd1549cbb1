#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "clvm/errors.hpp"
#include "clvm/vi_engine.hpp"

using namespace clvm;

namespace {

ContrastivePair small_pair(bool with_missing) {
  ContrastivePair p = standardize(generate_synthetic_subgroups(6, 24, 2), ScalingMode::zscore).first;
  if (with_missing) p = delete_target_cells(p, 0.1, 4);
  return p;
}

ModelSpec base_spec(const ContrastivePair& p) {
  ModelSpec s;
  s.d = p.dim();
  s.k = 2;
  s.t = 2;
  return s;
}

double entry(const VariationalState& s, const std::string& block, Index idx) {
  double v = 0.0;
  s.for_each_matrix([&](const std::string& name, const Matrix& m) {
    if (name == block) v = m.data()[idx];
  });
  return v;
}

}  // namespace

TEST_CASE("gaussian_kl closed form") {
  CHECK(gaussian_kl(0.0, 0.0) == doctest::Approx(0.0));
  const double m = 0.7, ls = -0.4, s2 = std::exp(2 * ls);
  CHECK(gaussian_kl(m, ls) == doctest::Approx(0.5 * (s2 + m * m - 1.0) - ls));
}

TEST_CASE("pathwise gradient equals the common-random-number finite difference") {
  const ContrastivePair pair = small_pair(true);
  for (bool horseshoe : {false, true}) {
    ModelSpec spec = base_spec(pair);
    if (horseshoe) spec.w_prior = WPrior::horseshoe;
    VariationalState state = initial_state(spec, pair, 3);
    RngStream jitter(8);
    state.for_each_matrix(
        [&](const std::string&, Matrix& m) { m.array() += 0.05 * jitter.normal_matrix(m.rows(), m.cols()).array(); });
    RngStream g_rng(21);
    const ElboResult g = elbo_gradient(spec, state, pair, g_rng);
    std::vector<std::string> names;
    state.for_each_matrix([&](const std::string& name, const Matrix& m) {
      if (m.size() > 0) names.push_back(name);
    });
    for (const std::string& name : names) {
      Index size = 0;
      state.for_each_matrix([&](const std::string& n, const Matrix& m) {
        if (n == name) size = m.size();
      });
      const Index idx = size / 2;
      const double h = 1e-5;
      auto eval = [&](double delta) {
        VariationalState s = state;
        s.for_each_matrix([&](const std::string& n, Matrix& m) {
          if (n == name) m.data()[idx] += delta;
        });
        RngStream r(21);
        return elbo_estimate(spec, s, pair, r).elbo;
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double an = entry(g.grad, name, idx);
      INFO(name << "[" << idx << "] horseshoe=" << horseshoe);
      CHECK(std::abs(fd - an) <= 1e-5 * std::max({1.0, std::abs(fd), std::abs(an)}));
    }
  }
}

TEST_CASE("ELBO estimate does not depend on the thread count") {
  const ContrastivePair pair = small_pair(true);
  const ModelSpec spec = base_spec(pair);
  const VariationalState state = initial_state(spec, pair, 1);
  EvalOptions one;
  one.n_mc = 4;
  one.chunk_rows = 7;
  EvalOptions many = one;
  many.threads = 3;
  RngStream r1(5), r2(5);
  CHECK(elbo_estimate(spec, state, pair, r1, one).elbo == elbo_estimate(spec, state, pair, r2, many).elbo);
}

TEST_CASE("ADAM minimises a quadratic") {
  Matrix x = Matrix::Constant(2, 1, 5.0);
  AdamState adam;
  adam.lr = 0.1;
  for (int i = 0; i < 2000; ++i) {
    const Matrix g = 2.0 * (x.array() - 1.0).matrix();
    adam_step(adam, {&x}, {&g}, false);
  }
  CHECK(std::abs(x(0, 0) - 1.0) < 1e-3);
  CHECK(std::abs(x(1, 0) - 1.0) < 1e-3);
}

TEST_CASE("fit_vi is reproducible for a fixed seed") {
  const ContrastivePair pair = small_pair(false);
  const ModelSpec spec = base_spec(pair);
  ViOptions opts;
  opts.max_iter = 60;
  opts.eval_every = 20;
  opts.eval_mc = 4;
  opts.seed = 9;
  opts.deterministic = true;
  const ViFit a = fit_vi(spec, pair, opts);
  const ViFit b = fit_vi(spec, pair, opts);
  CHECK((a.model.params.S - b.model.params.S).norm() == 0.0);
  CHECK(a.final_elbo == b.final_elbo);
  for (const TraceEntry& e : a.model.trace) CHECK(e.wall_ms == 0.0);
  CHECK(a.model.target_z.rows() == pair.n());
}

TEST_CASE("ModelSpec rejects invalid settings") {
  ModelSpec s;
  s.d = 3;
  s.k = 1;
  s.t = 1;
  s.likelihood = Likelihood::student_t;
  s.student_a = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(parse_w_prior("laplace"), ConfigError);
  CHECK(parse_likelihood("student_t") == Likelihood::student_t);
}
