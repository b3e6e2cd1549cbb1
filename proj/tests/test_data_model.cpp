#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "clvm/data_model.hpp"
#include "clvm/errors.hpp"
#include "test_util.hpp"

using namespace clvm;
using clvm_test::TempDir;
using clvm_test::write_file;

TEST_CASE("CSV round trip preserves values, header and missing cells") {
  TempDir dir("csv");
  CsvTable t;
  t.header = {"a", "b", "c"};
  t.values.resize(2, 3);
  t.values << 1.5, -2.25, 0.1, 1e-300, 3.0, 7.0;
  t.mask = Mask::Constant(2, 3, true);
  t.mask(1, 2) = false;
  write_csv(dir / "t.csv", t);
  const CsvTable back = load_csv(dir / "t.csv");
  CHECK(back.header == t.header);
  CHECK(back.mask(1, 2) == false);
  CHECK(back.mask.count() == 5);
  for (Index r = 0; r < 2; ++r) {
    for (Index c = 0; c < 3; ++c) {
      if (t.mask(r, c)) CHECK(back.values(r, c) == t.values(r, c));
    }
  }
}

TEST_CASE("CSV missing tokens are recognised") {
  TempDir dir("csvna");
  write_file(dir / "t.csv", "x,y\n1,NA\nNaN,2\n,3\n");
  const CsvTable t = load_csv(dir / "t.csv");
  CHECK(t.values.rows() == 3);
  CHECK(t.mask.count() == 3);
  CHECK_FALSE(t.mask(0, 1));
  CHECK_FALSE(t.mask(1, 0));
  CHECK_FALSE(t.mask(2, 0));
}

TEST_CASE("CSV errors carry the right kind") {
  TempDir dir("csverr");
  CHECK_THROWS_AS(load_csv(dir / "absent.csv"), IoError);
  write_file(dir / "empty.csv", "");
  CHECK_THROWS_AS(load_csv(dir / "empty.csv"), DataError);
  write_file(dir / "ragged.csv", "a,b\n1,2\n3\n");
  CHECK_THROWS_AS(load_csv(dir / "ragged.csv"), DataError);
  write_file(dir / "text.csv", "a,b\n1,hello\n");
  CHECK_THROWS_AS(load_csv(dir / "text.csv"), DataError);
}

TEST_CASE("labels round trip through the id,set,label format") {
  TempDir dir("labels");
  ContrastivePair p = ContrastivePair::from_complete(Matrix::Zero(3, 2), Matrix::Zero(2, 2));
  p.target_labels = {0, 1, -1};
  p.background_labels = {4, 5};
  write_labels_csv(dir / "l.csv", p);
  const LabelsTable l = load_labels_csv(dir / "l.csv");
  CHECK(l.target == p.target_labels);
  CHECK(l.background == p.background_labels);
  write_file(dir / "plain.csv", "label\n2\n3\n");
  CHECK(load_labels_csv(dir / "plain.csv").target == std::vector<int>{2, 3});
  write_file(dir / "bad.csv", "label\n2.5\n");
  CHECK_THROWS_AS(load_labels_csv(dir / "bad.csv"), DataError);
}

TEST_CASE("standardize then invert_scaling is the identity") {
  RngStream rng(1);
  ContrastivePair p = ContrastivePair::from_complete(rng.normal_matrix(30, 4) * 3.0, rng.normal_matrix(20, 4));
  p.target.col(1).array() += 10.0;
  const auto [scaled, params] = standardize(p, ScalingMode::zscore);
  Matrix all(50, 4);
  all << scaled.target, scaled.background;
  CHECK(all.colwise().mean().norm() < 1e-12);
  for (Index c = 0; c < 4; ++c) {
    const double var = (all.col(c).array() - all.col(c).mean()).square().sum() / 49.0;
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-12);
  }
  const ContrastivePair back = invert_scaling(scaled, params);
  CHECK((back.target - p.target).norm() < 1e-10);
  CHECK((apply_scaling(p, params).background - scaled.background).norm() < 1e-12);
}

TEST_CASE("zscore flags zero-variance columns instead of dividing by zero") {
  Matrix t = Matrix::Ones(5, 2), b = Matrix::Ones(5, 2);
  t.col(0) << 1, 2, 3, 4, 5;
  const auto [scaled, params] = standardize(ContrastivePair::from_complete(t, b), ScalingMode::zscore);
  CHECK(params.flagged_columns == std::vector<Index>{1});
  CHECK(params.scale(1) == 1.0);
  CHECK(scaled.target.allFinite());
}

TEST_CASE("subgroup generator shape, labels and block means") {
  const ContrastivePair p = generate_synthetic_subgroups(100, 400, 7);
  CHECK(p.n() == 400);
  CHECK(p.m() == 400);
  CHECK(p.dim() == 30);
  CHECK(p.complete());
  std::set<int> labels(p.target_labels.begin(), p.target_labels.end());
  CHECK(labels == std::set<int>{0, 1, 2, 3});
  // Subgroup 3 sits at mean 6 on the first block and 3 on the second.
  double first = 0, second = 0;
  int count = 0;
  for (Index r = 0; r < p.n(); ++r) {
    if (p.target_labels[static_cast<std::size_t>(r)] != 3) continue;
    first += p.target.row(r).segment(0, 10).mean();
    second += p.target.row(r).segment(10, 10).mean();
    ++count;
  }
  CHECK(first / count == doctest::Approx(6.0).epsilon(0.05));
  CHECK(second / count == doctest::Approx(3.0).epsilon(0.05));
  CHECK((generate_synthetic_subgroups(100, 400, 7).target - p.target).norm() == 0.0);
}

TEST_CASE("inject_outliers appends labelled rows inside the bounds") {
  const ContrastivePair p = generate_synthetic_subgroups(5, 10, 1);
  const ContrastivePair o = inject_outliers(p, 3, -20.0, 20.0, 2);
  CHECK(o.n() == p.n() + 3);
  CHECK(o.m() == p.m() + 3);
  CHECK(o.target_labels.back() == kOutlierLabel);
  CHECK(o.target.bottomRows(3).cwiseAbs().maxCoeff() <= 20.0);
  CHECK((o.target.topRows(p.n()) - p.target).norm() == 0.0);
}

TEST_CASE("delete_target_cells removes the requested fraction of target cells only") {
  const ContrastivePair p = generate_synthetic_subgroups(10, 20, 1);
  const ContrastivePair q = delete_target_cells(p, 0.25, 3);
  CHECK(q.target_mask.size() - q.target_mask.count() == std::llround(0.25 * 40 * 30));
  CHECK(q.background_mask.all());
  CHECK_THROWS_AS(delete_target_cells(p, 1.0, 3), ConfigError);
  const Matrix imputed = mean_impute(q.target, q.target_mask);
  CHECK(imputed.allFinite());
}

TEST_CASE("validate rejects mismatched widths and non-finite observed cells") {
  CHECK_THROWS_AS(ContrastivePair::from_complete(Matrix::Zero(3, 2), Matrix::Zero(3, 3)).validate(), DataError);
  ContrastivePair p = ContrastivePair::from_complete(Matrix::Zero(3, 2), Matrix::Zero(3, 2));
  p.target(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(p.validate(), DataError);
}

TEST_CASE("planted and signal-on-noise generators honour their shapes") {
  PlantedSpec ps;
  ps.seed = 3;
  const PlantedData pd = generate_planted(ps);
  CHECK(pd.pair.n() == ps.n);
  CHECK(pd.pair.dim() == ps.d);
  CHECK(pd.truth.S.cols() == ps.k);
  CHECK(pd.truth.W.cols() == ps.t);
  SignalNoiseSpec ss;
  ss.n = 50;
  ss.m = 40;
  const ContrastivePair sn = generate_signal_on_noise(ss);
  CHECK(sn.n() == 50);
  CHECK(sn.m() == 40);
  CHECK(sn.dim() == ss.dim);
  CHECK(sn.target_labels.size() == 50u);
}
