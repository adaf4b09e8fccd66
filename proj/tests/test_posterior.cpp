#include <doctest.h>

#include <cmath>

#include "fpps/benchmarks.hpp"
#include "fpps/integrator.hpp"
#include "fpps/posterior.hpp"
#include "test_support.hpp"

using namespace fpps;

namespace {

// Equilibrated ensemble for N(0.5, 0.64) via the covariance-preconditioned exact flow.
struct Equilibrium {
  Benchmark bench;
  Ensemble<double> ens;
  KernelSpec<double> kernel;
};

const Equilibrium& gaussian_equilibrium() {
  static const Equilibrium eq = [] {
    Benchmark b = linear_gaussian_problem(VectorXd::Constant(1, 0.5), MatrixXd::Constant(1, 1, 0.64));
    std::mt19937_64 rng(12);
    const Ensemble<double> ens0(2.0 * testing::random_matrix(rng, 1, 100));
    const KernelSpec<double> k = KernelSpec<double>::gaussian(MatrixXd::Constant(1, 1, 0.02));
    FlowVariant<double> v;
    v.preconditioner = Preconditioner::global_covariance;
    IntegratorConfig cfg;
    cfg.t_end = 40.0;
    cfg.record_stride = 50;
    const FlowTrajectory traj = integrate(v, ens0, KernelSchedule(k), b.problem, cfg);
    return Equilibrium{b, traj.final_ensemble, k};
  }();
  return eq;
}

double normal_pdf(double x, double mu, double var) {
  return std::exp(-0.5 * (x - mu) * (x - mu) / var) / std::sqrt(2 * M_PI * var);
}

}  // namespace

TEST_CASE("single-particle density at its own location") {
  const Ensemble<double> ens(MatrixXd::Constant(2, 1, 0.7));
  const PosteriorEstimate<double> est(ens, KernelSpec<double>::gaussian(0.3 * MatrixXd::Identity(2, 2)));
  CHECK(kde_log_density(VectorXd(VectorXd::Constant(2, 0.7)), est) == doctest::Approx(1.0));
  VectorXd x(2);
  x << 1.0, 0.2;
  const double k = gaussian_kernel(x, VectorXd(VectorXd::Constant(2, 0.7)), est.kernel().bandwidth());
  CHECK(kde_log_density(x, est) == doctest::Approx(std::log(k) + k));
}

TEST_CASE("density is invariant under particle permutation") {
  std::mt19937_64 rng(1);
  const MatrixXd x = testing::random_matrix(rng, 2, 9);
  MatrixXd perm = x;
  perm.col(0).swap(perm.col(5));
  perm.col(2).swap(perm.col(8));
  const KernelSpec<double> k = KernelSpec<double>::gaussian(0.4 * MatrixXd::Identity(2, 2));
  const PosteriorEstimate<double> a(Ensemble<double>(x), k), b(Ensemble<double>(perm), k);
  for (int r = 0; r < 10; ++r) {
    const VectorXd q = testing::random_matrix(rng, 2, 1);
    CHECK(kde_log_density(q, a) == doctest::Approx(kde_log_density(q, b)).epsilon(1e-13));
  }
}

TEST_CASE("far-away queries give the negative infinity sentinel") {
  const PosteriorEstimate<double> est(Ensemble<double>(MatrixXd::Zero(1, 3)),
                                      KernelSpec<double>::gaussian(1e-3 * MatrixXd::Identity(1, 1)));
  const double v = kde_log_density(VectorXd(VectorXd::Constant(1, 1e3)), est);
  CHECK(std::isinf(v));
  CHECK(v < 0);
}

TEST_CASE("posterior sampling") {
  std::mt19937_64 rng(2);
  const Ensemble<double> ens(testing::random_matrix(rng, 2, 6));

  SUBCASE("weights are normalised and nonnegative") {
    const PosteriorEstimate<double> est(ens, KernelSpec<double>::gaussian(0.2 * MatrixXd::Identity(2, 2)));
    const auto ws = sample_posterior(est, 5, rng);
    CHECK(ws.samples.cols() == 30);
    CHECK(std::abs(ws.weights.sum() - 1.0) < 1e-12);
    CHECK(ws.weights.minCoeff() >= 0);
  }
  SUBCASE("vanishing bandwidth reproduces the particles") {
    const PosteriorEstimate<double> est(ens, KernelSpec<double>::gaussian(1e-20 * MatrixXd::Identity(2, 2)));
    const auto ws = sample_posterior(est, 1, rng);
    CHECK((ws.samples - ens.particles()).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("data-driven kernels have no sampler") {
    const PosteriorEstimate<double> est(ens, KernelSpec<double>(KernelFamily::data_driven, MatrixXd::Identity(2, 2),
                                                                ens.particles()));
    CHECK_THROWS_AS(sample_posterior(est, 2, rng), UnsupportedOperation);
  }
}

TEST_CASE("weighted moments") {
  MatrixXd s(1, 3);
  s << 0.0, 1.0, 4.0;
  VectorXd w(3);
  w << 0.5, 0.25, 0.25;
  const auto [mu, cov] = weighted_moments(s, w);
  CHECK(mu(0) == doctest::Approx(1.25));
  CHECK(cov(0, 0) == doctest::Approx(0.5 * 1.5625 + 0.25 * 0.0625 + 0.25 * 7.5625));
}

TEST_CASE("variational derivative") {
  const Benchmark b = elliptic2d_problem();
  std::mt19937_64 rng(3);
  const Ensemble<double> ens(0.3 * testing::random_matrix(rng, 2, 7));
  const KernelSpec<double> k = KernelSpec<double>::gaussian(0.05 * MatrixXd::Identity(2, 2));

  SUBCASE("its gradient is minus the unpreconditioned drift") {
    for (Eigen::Index i = 0; i < ens.size(); ++i) {
      const VectorXd xi = ens.particle(i);
      const VectorXd g =
          testing::fd_gradient([&](const VectorXd& z) { return variational_derivative(z, ens, k, b.problem); }, xi, 1e-7);
      CHECK(testing::rel_err(g, -drift(xi, ens, k, b.problem)) < 1e-6);
    }
  }
  SUBCASE("single particle value") {
    const Ensemble<double> one(MatrixXd::Constant(2, 1, 0.1));
    const VectorXd x = one.particle(0);
    CHECK(variational_derivative(x, one, k, b.problem) == doctest::Approx(regularized_misfit(x, b.problem) + 1.0));
  }
}

TEST_CASE("diagnostics") {
  MatrixXd x(1, 2);
  x << 0.0, 2.0;
  const auto d = diagnostics(Ensemble<double>(x));
  CHECK(d.spread == doctest::Approx(1.0));
  CHECK(d.mean(0) == doctest::Approx(1.0));
  CHECK(d.cov_trace == doctest::Approx(1.0));
  CHECK_FALSE(d.potential);

  std::mt19937_64 rng(4);
  const Ensemble<double> ens(testing::random_matrix(rng, 3, 8));
  const auto e = diagnostics(ens);
  CHECK(e.spread == doctest::Approx(covariance(ens).trace()).epsilon(1e-14));
  CHECK(diagnostics(Ensemble<double>(MatrixXd::Ones(2, 4))).spread == 0.0);

  const Benchmark b = elliptic2d_problem();
  const KernelSpec<double> k = KernelSpec<double>::gaussian(MatrixXd::Identity(2, 2));
  const Ensemble<double> ens2(testing::random_matrix(rng, 2, 5));
  REQUIRE(diagnostics(ens2, k, b.problem).potential);
  CHECK(*diagnostics(ens2, k, b.problem).potential == doctest::Approx(potential(ens2, k, b.problem)));
}

TEST_CASE("equilibrium density matches the one-dimensional Gaussian target") {
  const Equilibrium& eq = gaussian_equilibrium();
  const PosteriorEstimate<double> est(eq.ens, eq.kernel);
  const VectorXd axis = VectorXd::LinSpaced(801, -4.0, 5.0);
  const GridDensity g = grid_density(est, {axis});
  const double cell = axis(1) - axis(0);
  double tv = 0, mass = 0;
  for (std::size_t s = 0; s < g.points.size(); ++s) {
    tv += std::abs(g.density[s] - normal_pdf(g.points[s](0), 0.5, 0.64)) * cell;
    mass += g.density[s] * cell;
  }
  CHECK(mass == doctest::Approx(1.0));
  CHECK(0.5 * tv <= 0.05);
}

TEST_CASE("weighted samples recover the Gaussian posterior mean") {
  const Equilibrium& eq = gaussian_equilibrium();
  const PosteriorEstimate<double> est(eq.ens, eq.kernel);
  std::mt19937_64 rng(5);
  const auto ws = sample_posterior(est, 20, rng);
  const auto [mu, cov] = weighted_moments(ws.samples, ws.weights);
  const double se = std::sqrt(0.64 / ess(ws.weights));
  CHECK(std::abs(mu(0) - 0.5) < 3 * se + 0.02);
}

TEST_CASE("variational derivative is nearly flat at equilibrium") {
  const Equilibrium& eq = gaussian_equilibrium();
  VectorXd at_particles(eq.ens.size());
  for (Eigen::Index i = 0; i < eq.ens.size(); ++i)
    at_particles(i) = variational_derivative(VectorXd(eq.ens.particle(i)), eq.ens, eq.kernel, eq.bench.problem);
  const double sd = std::sqrt((at_particles.array() - at_particles.mean()).square().mean());
  double lo = INFINITY, hi = -INFINITY;
  for (double x : {-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 3.5}) {
    const double v = variational_derivative(VectorXd(VectorXd::Constant(1, x)), eq.ens, eq.kernel, eq.bench.problem);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(sd <= 0.05 * (hi - lo));
}
