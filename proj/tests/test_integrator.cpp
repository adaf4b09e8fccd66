#include <doctest.h>

#include <cmath>

#include "fpps/benchmarks.hpp"
#include "fpps/integrator.hpp"
#include "test_support.hpp"

using namespace fpps;

TEST_CASE("Dormand-Prince solves linear decay accurately") {
  IntegratorConfig cfg;
  cfg.rel_tol = 1e-9;
  cfg.abs_tol = 1e-12;
  cfg.t_end = 2.0;
  MatrixXd y0(2, 1);
  y0 << 1.0, -3.0;
  const auto res = dormand_prince([](double, const MatrixXd& y) -> MatrixXd { return -y; }, y0, cfg);
  CHECK(res.complete);
  CHECK(res.t == 2.0);
  CHECK(std::abs(res.state(0, 0) - std::exp(-2.0)) < 1e-9);
  CHECK(std::abs(res.state(1, 0) + 3 * std::exp(-2.0)) < 1e-8);
}

TEST_CASE("time-dependent right-hand side") {
  IntegratorConfig cfg;
  cfg.rel_tol = 1e-10;
  cfg.abs_tol = 1e-12;
  const auto res = dormand_prince([](double t, const MatrixXd& y) -> MatrixXd { return MatrixXd::Constant(1, 1, std::cos(t)) + 0 * y; },
                                  MatrixXd::Zero(1, 1), cfg);
  CHECK(std::abs(res.state(0, 0) - std::sin(1.0)) < 1e-9);
}

TEST_CASE("stop times are hit exactly and reported to the observer") {
  IntegratorConfig cfg;
  cfg.t_end = 3.0;
  cfg.stop_times = {0.3, 1.7, 5.0};
  std::vector<double> stops;
  const auto res = dormand_prince([](double, const MatrixXd& y) -> MatrixXd { return -y; }, MatrixXd::Ones(1, 1), cfg,
                                  [&](double t, const MatrixXd&, bool at_stop) {
                                    if (at_stop) stops.push_back(t);
                                    return true;
                                  });
  CHECK(res.complete);
  REQUIRE(stops.size() == 3);
  CHECK(stops[0] == 0.3);
  CHECK(stops[1] == 1.7);
  CHECK(stops[2] == 3.0);
}

TEST_CASE("observer can end the run early") {
  IntegratorConfig cfg;
  cfg.t_end = 10.0;
  const auto res = dormand_prince([](double, const MatrixXd& y) -> MatrixXd { return -y; }, MatrixXd::Ones(1, 1), cfg,
                                  [](double t, const MatrixXd&, bool) { return t < 1.0; });
  CHECK_FALSE(res.complete);
  CHECK(res.stopped_early);
  CHECK(res.t >= 1.0);
  CHECK(res.t < 10.0);
}

TEST_CASE("max_steps yields an incomplete result") {
  IntegratorConfig cfg;
  cfg.t_end = 100.0;
  cfg.max_steps = 5;
  const auto res = dormand_prince([](double, const MatrixXd& y) -> MatrixXd { return -y; }, MatrixXd::Ones(1, 1), cfg);
  CHECK_FALSE(res.complete);
  CHECK(res.accepted + res.rejected == 5);
  CHECK(res.t < 100.0);
}

TEST_CASE("non-finite stages are rejected and a persistent failure is reported") {
  IntegratorConfig cfg;
  // Blows up beyond |y| > 1.5: the stepper must shrink steps rather than accept NaN.
  const auto f = [](double, const MatrixXd& y) -> MatrixXd {
    if (std::abs(y(0, 0)) > 1.5) return MatrixXd::Constant(1, 1, std::nan(""));
    return MatrixXd::Constant(1, 1, 0.1);
  };
  const auto res = dormand_prince(f, MatrixXd::Ones(1, 1), cfg);
  CHECK(res.complete);
  CHECK(res.state.allFinite());

  const auto always_nan = [](double, const MatrixXd& y) -> MatrixXd { return MatrixXd::Constant(y.rows(), y.cols(), std::nan("")); };
  CHECK_THROWS_AS(dormand_prince(always_nan, MatrixXd::Ones(1, 1), cfg), IntegrationFailure);
}

TEST_CASE("invalid integrator configuration") {
  IntegratorConfig cfg;
  cfg.rel_tol = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigurationError);
  cfg = IntegratorConfig{};
  cfg.t_end = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigurationError);
}

TEST_CASE("linear-Gaussian ensemble mean decays towards the posterior mean") {
  // One-dimensional target N(0, 1): the mean obeys d mean/dt = -mean.
  const Benchmark b = linear_gaussian_problem(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
  MatrixXd x(1, 4);
  x << 0.2, 0.7, 1.3, 1.8;
  IntegratorConfig cfg;
  cfg.rel_tol = 1e-10;
  cfg.abs_tol = 1e-12;
  const auto traj = integrate_linear_gaussian(Ensemble<double>(x), b.problem, cfg);
  CHECK(traj.complete);
  CHECK(std::abs(mean(traj.final_ensemble)(0) - std::exp(-1.0)) < 1e-6);
}

TEST_CASE("kernel schedules") {
  const MatrixXd ref = 2.0 * MatrixXd::Identity(2, 2);
  std::mt19937_64 rng(3);
  const Ensemble<double> ens(testing::random_matrix(rng, 2, 20));
  const KernelSpec<double> base = KernelSpec<double>::gaussian(MatrixXd::Identity(2, 2));

  SUBCASE("fixed kernel is returned unchanged") {
    const KernelSchedule s(base);
    CHECK(s.at(ens).bandwidth() == base.bandwidth());
    CHECK_FALSE(s.freeze_time());
  }
  SUBCASE("fixed policy uses the reference") {
    BandwidthPolicy p;
    p.mode = BandwidthMode::fixed_prior;
    p.alpha = 0.5;
    const KernelSchedule s(base, p, ref);
    CHECK((s.at(ens).bandwidth() - MatrixXd::Identity(2, 2)).norm() < 1e-14);
  }
  SUBCASE("adaptive policy follows the ensemble until frozen") {
    BandwidthPolicy p;
    p.mode = BandwidthMode::adaptive_covariance;
    p.alpha = 1.0;
    p.freeze_time = 2.0;
    KernelSchedule s(base, p, ref);
    CHECK(s.adaptive());
    CHECK((s.at(ens).bandwidth() - covariance(ens)).norm() < 1e-12);
    s.freeze(ens);
    const Ensemble<double> other(3.0 * ens.particles());
    CHECK((s.at(other).bandwidth() - covariance(ens)).norm() < 1e-12);
  }
}

TEST_CASE("flow integration records diagnostics and freezes the bandwidth") {
  const Benchmark b = bimodal_problem();
  std::mt19937_64 rng(11);
  const Ensemble<double> ens(testing::random_matrix(rng, 2, 12));
  FlowVariant<double> v;
  v.preconditioner = Preconditioner::global_covariance;
  BandwidthPolicy p;
  p.mode = BandwidthMode::adaptive_covariance;
  p.alpha = 0.5;
  p.freeze_time = 0.5;
  IntegratorConfig cfg;
  cfg.t_end = 1.0;
  cfg.stop_times = {0.25};
  const auto traj = integrate(v, ens, KernelSchedule(KernelSpec<double>::gaussian(MatrixXd::Identity(2, 2)), p,
                                                     MatrixXd::Identity(2, 2)),
                              b.problem, cfg);
  CHECK(traj.complete);
  CHECK(traj.t_final == 1.0);
  CHECK(traj.diagnostics.front().t == 0.0);
  CHECK(traj.diagnostics.back().t == 1.0);
  REQUIRE(traj.snapshots.size() == 1);
  CHECK(traj.snapshots[0].t == 0.25);
  for (std::size_t i = 1; i < traj.diagnostics.size(); ++i) CHECK(traj.diagnostics[i].t > traj.diagnostics[i - 1].t);
  REQUIRE(traj.final_kernel);
  CHECK((traj.final_kernel->bandwidth() - 0.5 * covariance(traj.final_ensemble)).norm() > 1e-6);
}
