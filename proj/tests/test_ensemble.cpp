#include <doctest.h>

#include "fpps/ensemble.hpp"
#include "test_support.hpp"

using namespace fpps;

namespace {

/// Finite-difference divergence of x_i -> cov(x_i) where `cov` sees the ensemble with particle i moved.
VectorXd fd_divergence(const MatrixXd& x, Eigen::Index i, const std::function<MatrixXd(const MatrixXd&)>& cov,
                       double h = 1e-5) {
  const Eigen::Index n = x.rows();
  VectorXd div = VectorXd::Zero(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    MatrixXd xp = x, xm = x;
    xp(k, i) += h;
    xm(k, i) -= h;
    div += (cov(xp).col(k) - cov(xm).col(k)) / (2 * h);  // row l: sum_k d P_lk / d x_k
  }
  return div;
}

}  // namespace

TEST_CASE("mean and covariance use 1/M normalisation") {
  MatrixXd x(1, 2);
  x << 0.0, 2.0;
  const Ensemble<double> ens(x);
  CHECK(mean(ens)(0) == doctest::Approx(1.0));
  CHECK(covariance(ens)(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("ensemble rejects empty and non-finite input") {
  CHECK_THROWS_AS(Ensemble<double>(MatrixXd(2, 0)), ContractViolation);
  MatrixXd bad = MatrixXd::Zero(2, 2);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(Ensemble<double>{bad}, ContractViolation);
}

TEST_CASE("cross covariance of a linear map is P A^T") {
  std::mt19937_64 rng(1);
  const Ensemble<double> ens(testing::random_matrix(rng, 3, 12));
  const MatrixXd a = testing::random_matrix(rng, 2, 3);
  const MatrixXd h = a * ens.particles();
  CHECK(testing::rel_err(cross_covariance(ens, h), covariance(ens) * a.transpose()) < 1e-13);
}

TEST_CASE("localisation weights are row stochastic and approach uniform as gamma grows") {
  std::mt19937_64 rng(2);
  const Ensemble<double> ens(testing::random_matrix(rng, 2, 7));
  const LocalisationConfig<double> cfg(0.3, testing::random_spd(rng, 2));
  const MatrixXd w = localisation_weights(ens, cfg);
  CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-14);
  CHECK(w.minCoeff() >= 0.0);

  const LocalisationConfig<double> wide(1e12, MatrixXd::Identity(2, 2));
  const MatrixXd u = localisation_weights(ens, wide);
  CHECK((u.array() - 1.0 / 7.0).abs().maxCoeff() < 1e-10);
  CHECK(testing::rel_err(localised_covariance(ens, u, 3), covariance(ens)) < 1e-10);
  CHECK(testing::rel_err(localised_mean(ens, u, 3), mean(ens)) < 1e-10);
}

TEST_CASE("localisation weights match the brute-force softmax") {
  std::mt19937_64 rng(3);
  const Ensemble<double> ens(testing::random_matrix(rng, 3, 5));
  const MatrixXd d = testing::random_spd(rng, 3);
  const LocalisationConfig<double> cfg(0.8, d);
  const MatrixXd w = localisation_weights(ens, cfg);
  const MatrixXd dinv = d.inverse();
  for (Eigen::Index i = 0; i < 5; ++i) {
    VectorXd e(5);
    for (Eigen::Index j = 0; j < 5; ++j) {
      const VectorXd diff = ens.particle(i) - ens.particle(j);
      e(j) = std::exp(-diff.dot(dinv * diff) / (2 * 0.8));
    }
    CHECK(testing::rel_err(w.row(i).transpose(), e / e.sum()) < 1e-13);
  }
}

TEST_CASE("weight gradient closed form agrees with finite differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Ensemble<double> ens(testing::random_matrix(rng, 2, 6));
    const LocalisationConfig<double> cfg(0.5 + trial * 0.1, testing::random_spd(rng, 2));
    const MatrixXd w = localisation_weights(ens, cfg);
    const Eigen::Index i = trial % 6, j = (trial + 2) % 6;
    const VectorXd fd = testing::fd_gradient(
        [&](const VectorXd& xi) {
          MatrixXd x = ens.particles();
          x.col(i) = xi;
          return localisation_weights(Ensemble<double>(x), cfg)(i, j);
        },
        ens.particle(i));
    CHECK(testing::rel_err(grad_localisation_weights(ens, w, cfg, i, j), fd) < 1e-6);
  }
}

TEST_CASE("global divergence correction matches a finite-difference divergence") {
  std::mt19937_64 rng(6);
  for (Eigen::Index n : {1, 2, 3})
    for (Eigen::Index m : {3, 5, 10}) {
      const MatrixXd x = testing::random_matrix(rng, n, m);
      const Ensemble<double> ens(x);
      const VectorXd fd = fd_divergence(x, 1, [](const MatrixXd& z) { return covariance(Ensemble<double>(z)); });
      CHECK(testing::rel_err(divergence_correction_global(ens, 1), fd) < 1e-6);
    }
}

TEST_CASE("localised divergence correction matches finite differences and the global limit") {
  std::mt19937_64 rng(7);
  for (Eigen::Index n : {1, 2, 3})
    for (Eigen::Index m : {3, 5, 10}) {
      const MatrixXd x = testing::random_matrix(rng, n, m);
      const Ensemble<double> ens(x);
      const LocalisationConfig<double> cfg(0.7, testing::random_spd(rng, n));
      const Eigen::Index i = m - 1;
      const VectorXd fd = fd_divergence(x, i, [&](const MatrixXd& z) {
        const Ensemble<double> e(z);
        return localised_covariance(e, localisation_weights(e, cfg), i);
      });
      const VectorXd closed = divergence_correction_localised(ens, localisation_weights(ens, cfg), cfg, i);
      CHECK(testing::rel_err(closed, fd) < 1e-6);

      const LocalisationConfig<double> wide(1e12, MatrixXd::Identity(n, n));
      const VectorXd limit = divergence_correction_localised(ens, localisation_weights(ens, wide), wide, i);
      CHECK(testing::rel_err(limit, divergence_correction_global(ens, i)) < 1e-9);
    }
}

TEST_CASE("psd_sqrt") {
  std::mt19937_64 rng(8);
  const MatrixXd s = testing::random_spd(rng, 4, 0.0);
  const MatrixXd q = psd_sqrt(s);
  CHECK(testing::rel_err(q * q, s) < 1e-12);
  CHECK(testing::rel_err(q, q.transpose()) < 1e-15);

  // rank-deficient covariance of a collapsed ensemble
  const Ensemble<double> collapsed(MatrixXd::Ones(3, 5));
  CHECK(psd_sqrt(covariance(collapsed)).norm() == doctest::Approx(0.0));

  MatrixXd indefinite(2, 2);
  indefinite << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(psd_sqrt(indefinite), ContractViolation);
}
