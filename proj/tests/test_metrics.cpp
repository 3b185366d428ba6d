#include <doctest.h>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "encdiff/metrics.hpp"
#include "oracles.hpp"

using namespace encdiff;
using namespace oracles;

namespace {

const FactorDataset& shapes16() {
  static const FactorDataset ds = generate(FactorSpec::minishapes(16), 1);
  return ds;
}

}  // namespace

TEST_CASE("DCI entropy stage on injected importances") {
  CHECK(dci_from_importance(Eigen::MatrixXd::Identity(5, 5)) == 1.0);
  CHECK(dci_from_importance(Eigen::MatrixXd::Identity(7, 3) * 2.5) == 1.0);
  for (int F = 2; F <= 8; ++F)
    for (int R : {1, 3, 20}) CHECK(dci_from_importance(Eigen::MatrixXd::Constant(R, F, 1.0 / F)) == 0.0);
  Eigen::MatrixXd P(2, 2);
  P << 0.8, 0.2, 0.2, 0.8;
  CHECK(std::abs(dci_from_importance(P) - (1 - hand_entropy2(0.8))) < 1e-12);
  CHECK(std::abs(dci_from_importance(P) - 0.278072) < 1e-6);
  CHECK(dci_from_importance(Eigen::MatrixXd::Zero(3, 3)) == 0.0);
  Eigen::MatrixXd neg = Eigen::MatrixXd::Identity(2, 2);
  neg(0, 1) = -0.1;
  CHECK_THROWS_AS(dci_from_importance(neg), std::invalid_argument);
}

TEST_CASE("DCI score properties on random importances") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int R = rng.uniform_int(1, 12), F = rng.uniform_int(2, 6);
    Eigen::MatrixXd P(R, F);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.uniform();
    const double s = dci_from_importance(P);
    CHECK(s >= 0.0);
    CHECK(s < 1.0);
    // row permutation
    Eigen::MatrixXd Q = P.colwise().reverse();
    CHECK(std::abs(dci_from_importance(Q) - s) < 1e-12);
    // one-hot rows give exactly 1
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(R, F);
    for (int i = 0; i < R; ++i) H(i, rng.uniform_int(0, F - 1)) = rng.uniform() + 0.1;
    CHECK(dci_from_importance(H) == 1.0);
  }
}

TEST_CASE("boosted trees fit a step function and attribute it") {
  Rng rng(8);
  const int n = 500;
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < 3; ++f) x(i, f) = rng.uniform();
    y(i) = x(i, 1) > 0.5 ? 3.0 : (x(i, 1) > 0.25 ? 1.0 : 0.0);
  }
  BoostedTrees gbt;
  gbt.fit(x, y, {20, 3, 0.3});
  const double mse = (gbt.predict(x) - y).squaredNorm() / n;
  const double var = (y.array() - y.mean()).square().mean();
  CHECK(mse < 0.01 * var);
  const auto& imp = gbt.gain_importance();
  CHECK(imp(1) > 0.99 * imp.sum());
  CHECK(imp.minCoeff() >= 0);
}

TEST_CASE("DCI pipeline on ground-truth and noise codes") {
  const auto& ds = shapes16();
  const auto gt = ground_truth(ds);
  const auto res = dci_disentanglement(gt, ds, {});
  CHECK(res.disentanglement > 0.95);
  CHECK(res.informativeness > 0.5);
  CHECK(res.skipped_factors.empty());
  for (Eigen::Index j = 0; j < res.importance.cols(); ++j) CHECK(std::abs(res.importance.col(j).sum() - 1.0) < 1e-12);
  CHECK((res.importance.array() >= 0).all());

  const auto again = dci_disentanglement(gt, ds, {});
  CHECK(again.disentanglement == res.disentanglement);
  CHECK(again.importance == res.importance);

  const auto nz = dci_disentanglement(noise(ds.size(), 5, 2), ds, {});
  CHECK(nz.disentanglement < 0.3);
}

TEST_CASE("FactorVAE score sanity") {
  const auto& ds = shapes16();
  const auto gt = ground_truth(ds);
  const FactorVaeConfig cfg{};
  const auto base = factorvae_details(gt, ds, cfg);
  CHECK(base.score >= 0.99);
  CHECK(base.votes.sum() == cfg.num_votes);

  // positive per-code scaling plus a permutation
  RepresentationMatrix moved = gt;
  const std::vector<int> perm{3, 0, 4, 1, 2};
  const std::vector<double> scale{0.5, 7.0, 0.9, 4.0, 3.0};
  for (int j = 0; j < 5; ++j) moved.values.col(perm[static_cast<std::size_t>(j)]) = gt.values.col(j) * scale[static_cast<std::size_t>(j)];
  CHECK(factorvae_score(moved, ds, cfg) == base.score);

  const int R = 10;
  const double oracle = noise_vote_baseline(R, 5, cfg.num_votes, 400, 99);
  const double score = factorvae_score(noise(ds.size(), R, 5), ds, cfg);
  CHECK(std::abs(score - oracle) < 0.05);
  CHECK(score >= 0.0);
  CHECK(score <= 1.0);
}

TEST_CASE("FactorVAE pruning and degenerate input") {
  const auto& ds = shapes16();
  auto gt = ground_truth(ds);
  RepresentationMatrix padded;
  padded.values.resize(gt.values.rows(), 7);
  padded.values << gt.values, Eigen::MatrixXd::Constant(gt.values.rows(), 2, 4.0);
  const auto res = factorvae_details(padded, ds, {});
  CHECK(res.active_codes == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(res.score >= 0.99);

  RepresentationMatrix flat{Eigen::MatrixXd::Constant(gt.values.rows(), 3, 1.0)};
  CHECK_THROWS_AS(factorvae_score(flat, ds, {}), DegenerateRepresentation);
  RepresentationMatrix misaligned{gt.values.topRows(10)};
  CHECK_THROWS_AS(factorvae_score(misaligned, ds, {}), std::invalid_argument);
}

TEST_CASE("PCA of whitened data is a signed permutation") {
  Rng rng(21);
  const int M = 2000;
  Eigen::MatrixXd Z(M, 3);
  for (Eigen::Index i = 0; i < Z.size(); ++i) Z.data()[i] = rng.normal();
  // exact whitening, then distinct scales so the eigenbasis is the axes
  Eigen::MatrixXd Zc = Z.rowwise() - Z.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Zc, Eigen::ComputeThinU);
  Eigen::MatrixXd W = svd.matrixU() * std::sqrt(M - 1.0);
  W.col(1) *= 3.0;
  W.col(2) *= 2.0;
  const auto p = pca_postprocess({W}, 3);
  CHECK((p.reps.values.col(0).cwiseAbs() - W.col(1).cwiseAbs()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((p.reps.values.col(1).cwiseAbs() - W.col(2).cwiseAbs()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((p.reps.values.col(2).cwiseAbs() - W.col(0).cwiseAbs()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("PCA reconstruction, variances and sign convention") {
  Rng rng(5);
  const int M = 400, R = 6;
  Eigen::MatrixXd A(R, R), Z(M, R);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < Z.size(); ++i) Z.data()[i] = rng.normal();
  const Eigen::MatrixXd X = (Z * A).rowwise() + Eigen::RowVectorXd::LinSpaced(R, -3, 3);
  const auto p = pca_postprocess({X}, R);
  CHECK(!p.rank_deficient);
  const Eigen::MatrixXd back = (p.reps.values * p.components.transpose()).rowwise() + p.mean.transpose();
  CHECK((back - X).cwiseAbs().maxCoeff() < 1e-6);

  // variances against singular values of the centered data
  const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Xc);
  const Eigen::VectorXd sv2 = svd.singularValues().array().square() / (M - 1.0);
  CHECK((p.variances - sv2).cwiseAbs().maxCoeff() < 1e-9 * sv2(0));

  const Eigen::MatrixXd cov = p.reps.values.transpose() * p.reps.values / (M - 1.0);
  Eigen::MatrixXd off = cov;
  off.diagonal().setZero();
  CHECK(off.cwiseAbs().maxCoeff() < 1e-6);
  CHECK((cov.diagonal() - p.variances).cwiseAbs().maxCoeff() < 1e-8);

  for (int k = 0; k < R; ++k) {
    Eigen::Index arg = 0;
    p.components.col(k).cwiseAbs().maxCoeff(&arg);
    CHECK(p.components(arg, k) > 0);
  }
  const auto top2 = pca_postprocess({X}, 2);
  CHECK(top2.reps.values.cols() == 2);
  CHECK((top2.reps.values - p.reps.values.leftCols(2)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS(pca_postprocess({X}, R + 1), std::invalid_argument);
}

TEST_CASE("PCA flags rank deficiency") {
  Rng rng(6);
  Eigen::MatrixXd X(100, 4);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.normal(), b = rng.normal();
    X.row(i) << a, b, a + b, 2 * a;
  }
  const auto p = pca_postprocess({X}, 4);
  CHECK(p.rank_deficient);
  CHECK(p.variances(2) == 0.0);
  CHECK(p.reps.values.col(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.variances(1) > 0);
}

TEST_CASE("per-block PCA reduces each token to one code") {
  Rng rng(7);
  Eigen::MatrixXd X(300, 12);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  const auto r = pca_per_block({X, RepresentationSource::vector}, 4);
  CHECK(r.values.cols() == 3);
  CHECK(r.source_mode == RepresentationSource::pca);
  const auto first = pca_postprocess({X.leftCols(4)}, 1);
  CHECK((r.values.col(0) - first.reps.values.col(0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(pca_per_block({X}, 5), std::invalid_argument);
}

TEST_CASE("mean squared error") {
  std::vector<float> a{0.5f, -0.25f, 1.0f, -1.0f};
  std::vector<float> neg(a.size());
  std::transform(a.begin(), a.end(), neg.begin(), [](float v) { return -v; });
  CHECK(mean_squared_error(a, a) == 0.0);
  double expect = 0;
  for (float v : a) expect += 4.0 * v * v;
  CHECK(mean_squared_error(a, neg) == doctest::Approx(expect / 4).epsilon(1e-15));
  std::vector<float> b{0.1f, 0.2f, 0.3f, 0.4f};
  double manual = 0;
  for (std::size_t i = 0; i < 4; ++i) manual += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
  CHECK(mean_squared_error(a, b) == doctest::Approx(manual / 4).epsilon(1e-15));
}

TEST_CASE("metric statistics and report serialization") {
  const auto one = MetricStat::of({0.7});
  CHECK(one.std == 0.0);
  CHECK(one.mean == 0.7);
  const auto two = MetricStat::of({1.0, 3.0});
  CHECK(two.mean == 2.0);
  CHECK(two.std == doctest::Approx(std::sqrt(2.0)));

  MetricReport r;
  r.dci_disentanglement = one;
  r.importance = Eigen::MatrixXd::Identity(2, 2);
  r.factor_names = {"a", "b"};
  r.seeds_used = {4};
  const auto j = to_json(r);
  CHECK(j["dci_disentanglement"]["std"] == 0.0);
  CHECK(!j.contains("factorvae_score"));
  CHECK(j["importance"][1][1] == 1.0);
  CHECK(importance_csv(r) == "code,a,b\n0,1,0\n1,0,1\n");
}
