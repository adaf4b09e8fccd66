#include <doctest.h>

#include "fpps/kernels.hpp"
#include "test_support.hpp"

using namespace fpps;

TEST_CASE("gaussian kernel values") {
  VectorXd x(2), y(2);
  x << 1.0, 0.0;
  y << 0.0, 0.0;
  CHECK(gaussian_kernel(x, x, MatrixXd(MatrixXd::Identity(2, 2))) == doctest::Approx(1.0));
  CHECK(gaussian_kernel(x, y, MatrixXd(MatrixXd::Identity(2, 2))) == doctest::Approx(std::exp(-0.5)));
  CHECK(gaussian_kernel(x, y, MatrixXd(4.0 * MatrixXd::Identity(2, 2))) == doctest::Approx(std::exp(-0.125)));
}

TEST_CASE("data-driven kernel is symmetric and normalised by anchor masses") {
  std::mt19937_64 rng(1);
  const MatrixXd anchors = testing::random_matrix(rng, 2, 6);
  const MatrixXd b = testing::random_spd(rng, 2);
  const VectorXd x = testing::random_matrix(rng, 2, 1), y = testing::random_matrix(rng, 2, 1);
  const double kxy = data_driven_kernel<double>(x, y, anchors, b);
  CHECK(kxy == doctest::Approx(data_driven_kernel<double>(y, x, anchors, b)).epsilon(1e-14));

  double sx = 0, sy = 0;
  for (Eigen::Index a = 0; a < anchors.cols(); ++a) {
    sx += gaussian_kernel<double>(anchors.col(a), x, b);
    sy += gaussian_kernel<double>(anchors.col(a), y, b);
  }
  CHECK(kxy == doctest::Approx(gaussian_kernel(x, y, b) / std::sqrt(sx * sy)).epsilon(1e-13));
  CHECK_THROWS_AS(data_driven_kernel<double>(x, y, MatrixXd(2, 0), b), ConfigurationError);
}

TEST_CASE("grad_log_kernel agrees with finite differences for both families") {
  std::mt19937_64 rng(2);
  const MatrixXd b = testing::random_spd(rng, 3);
  const MatrixXd anchors = testing::random_matrix(rng, 3, 5);
  for (const auto& spec : {KernelSpec<double>::gaussian(b), KernelSpec<double>(KernelFamily::data_driven, b, anchors)}) {
    const VectorXd x = testing::random_matrix(rng, 3, 1), y = testing::random_matrix(rng, 3, 1);
    const VectorXd fd = testing::fd_gradient([&](const VectorXd& z) { return log_kernel(spec, z, y); }, x);
    CHECK(testing::rel_err(grad_log_kernel(spec, x, y), fd) < 1e-8);
  }
}

TEST_CASE("kernel spec validation") {
  MatrixXd indefinite(2, 2);
  indefinite << 1.0, 3.0, 3.0, 1.0;
  CHECK_THROWS_AS(KernelSpec<double>::gaussian(indefinite), ContractViolation);
  CHECK_THROWS_AS(KernelSpec<double>(KernelFamily::data_driven, MatrixXd::Identity(2, 2)), ConfigurationError);
}

TEST_CASE("AMISE constants") {
  const AmiseConstants c2 = amise_constants(2);
  CHECK(c2.delta == doctest::Approx(1.0 / 6.0));
  CHECK(c2.c_delta == doctest::Approx(std::pow(1.0, 1.0 / 6.0)));
  const AmiseConstants c4 = amise_constants(4);
  CHECK(c4.delta == doctest::Approx(0.125));
  CHECK(c4.c_delta == doctest::Approx(std::pow(4.0 / 6.0, 0.125)));
}

TEST_CASE("bandwidth policies") {
  MatrixXd ref(2, 2), cur(2, 2);
  ref << 4.0, 1.0, 1.0, 2.0;
  cur << 0.5, 0.1, 0.1, 0.3;
  BandwidthPolicy p;
  p.alpha = 0.05;
  p.mode = BandwidthMode::fixed_prior;
  CHECK(testing::rel_err(bandwidth<double>(p, ref, cur, 100, 2), 0.05 * ref) < 1e-15);
  p.mode = BandwidthMode::adaptive_covariance;
  CHECK(testing::rel_err(bandwidth<double>(p, ref, cur, 100, 2), 0.05 * cur) < 1e-15);

  const double scale = std::pow(4.0 / 4.0, 1.0 / 6.0) / std::pow(100.0, 1.0 / 6.0);
  p.mode = BandwidthMode::amise_fixed;
  const MatrixXd bf = bandwidth<double>(p, ref, cur, 100, 2);
  CHECK(bf(0, 0) == doctest::Approx(scale * 4.0));
  CHECK(bf(1, 1) == doctest::Approx(scale * 2.0));
  CHECK(bf(0, 1) == 0.0);
  p.mode = BandwidthMode::amise_adaptive;
  CHECK(bandwidth<double>(p, ref, cur, 100, 2)(1, 1) == doctest::Approx(scale * 0.3));

  SUBCASE("collapsed ensemble is degenerate") {
    CHECK_THROWS_AS(bandwidth<double>(p, ref, MatrixXd::Zero(2, 2), 100, 2), DegenerateEnsembleError);
  }
  SUBCASE("tiny diagonal entries are regularised") {
    MatrixXd thin = MatrixXd::Zero(2, 2);
    thin(0, 0) = 1.0;
    const MatrixXd b = bandwidth<double>(p, ref, thin, 100, 2);
    CHECK(b(1, 1) > 0.0);
    CHECK_NOTHROW(KernelSpec<double>::gaussian(b));
  }
  SUBCASE("non-positive alpha") {
    BandwidthPolicy bad;
    bad.alpha = 0.0;
    CHECK_THROWS_AS(bandwidth<double>(bad, ref, cur, 10, 2), ConfigurationError);
  }
}
