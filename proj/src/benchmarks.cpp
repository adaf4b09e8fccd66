#include "fpps/benchmarks.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "fpps/rng.hpp"

namespace fpps {

KlPrior::KlPrior(Eigen::Index n_modes, double tau) : n_(n_modes), tau_(tau) {
  detail::require(n_modes >= 1, "KlPrior: need at least one mode");
  detail::require(tau > 0, "KlPrior: tau must be positive");
}

double KlPrior::eigenvalue(Eigen::Index k) const {
  detail::require(k >= 1 && k <= n_, "KlPrior: mode index out of range");
  return std::pow(static_cast<double>(k), -2.0 * tau_);
}

double KlPrior::basis(Eigen::Index k, double s) {
  return std::sqrt(2.0 * std::numbers::pi) * std::sin(2.0 * std::numbers::pi * static_cast<double>(k) * s);
}

VectorXd KlPrior::eigenvalues() const {
  VectorXd l(n_);
  for (Eigen::Index k = 1; k <= n_; ++k) l(k - 1) = eigenvalue(k);
  return l;
}

MatrixXd KlPrior::covariance() const { return eigenvalues().asDiagonal(); }

double KlPrior::field(const VectorXd& x, double s) const {
  detail::require(x.size() == n_, "KlPrior: coefficient dimension mismatch");
  double u = 0;
  for (Eigen::Index k = 1; k <= n_; ++k) u += x(k - 1) * basis(k, s);
  return u;
}

Grid1D::Grid1D(int level) : level_(level) {
  detail::require(level >= 1 && level <= 24, "Grid1D: level must lie in [1, 24]");
}

VectorXd darcy_solve(const Grid1D& grid, const VectorXd& u) {
  const Eigen::Index n = grid.intervals();
  detail::require(u.size() == n + 1, "darcy_solve: u must hold a value at every grid node");
  detail::require(u.allFinite(), "darcy_solve: u must be finite");
  const Eigen::Index k = n - 1;
  const double h2 = grid.mesh() * grid.mesh();
  // Edge coefficients a_{m+1/2}, m = 0..n-1.
  VectorXd a(n);
  for (Eigen::Index m = 0; m < n; ++m) a(m) = std::exp(0.5 * (u(m) + u(m + 1)));

  // Row r corresponds to node m = r + 1: (a_{m-1/2} + a_{m+1/2}) p_m - a_{m-1/2} p_{m-1} - a_{m+1/2} p_{m+1} = h^2.
  VectorXd diag(k), upper(k), rhs = VectorXd::Constant(k, h2);
  for (Eigen::Index r = 0; r < k; ++r) {
    diag(r) = a(r) + a(r + 1);
    upper(r) = -a(r + 1);
  }
  // Thomas algorithm; the lower diagonal equals the upper one by symmetry.
  for (Eigen::Index r = 1; r < k; ++r) {
    const double factor = upper(r - 1) / diag(r - 1);
    diag(r) -= factor * upper(r - 1);
    rhs(r) -= factor * rhs(r - 1);
  }
  VectorXd p(k);
  p(k - 1) = rhs(k - 1) / diag(k - 1);
  for (Eigen::Index r = k - 2; r >= 0; --r) p(r) = (rhs(r) - upper(r) * p(r + 1)) / diag(r);
  return p;
}

Benchmark linear_gaussian_problem(const VectorXd& posterior_mean, const MatrixXd& posterior_cov) {
  detail::require(posterior_cov.rows() == posterior_mean.size() && posterior_cov.cols() == posterior_mean.size(),
                  "linear_gaussian_problem: covariance shape mismatch");
  const Eigen::Index n = posterior_mean.size();
  const MatrixXd doubled = 2.0 * posterior_cov;
  InverseProblem<double> problem([](const VectorXd& x) { return x; },
                                 [n](const VectorXd&) { return MatrixXd(MatrixXd::Identity(n, n)); }, posterior_mean,
                                 doubled, posterior_mean, doubled);
  return {std::move(problem), std::nullopt, std::nullopt, posterior_mean, posterior_cov};
}

Benchmark elliptic2d_problem() {
  const Eigen::Vector2d s(0.25, 0.75);
  auto forward = [s](const VectorXd& x) {
    VectorXd h(2);
    for (int i = 0; i < 2; ++i) h(i) = x(1) * s(i) + std::exp(-x(0)) * (-0.5 * s(i) * s(i) + 0.5 * s(i));
    return h;
  };
  auto jacobian = [s](const VectorXd& x) {
    MatrixXd j(2, 2);
    for (int i = 0; i < 2; ++i) {
      j(i, 0) = -std::exp(-x(0)) * (-0.5 * s(i) * s(i) + 0.5 * s(i));
      j(i, 1) = s(i);
    }
    return j;
  };
  VectorXd y(2);
  y << -0.0173, -0.573;
  InverseProblem<double> problem(forward, jacobian, y, 0.01 * MatrixXd::Identity(2, 2), VectorXd::Zero(2),
                                 100.0 * MatrixXd::Identity(2, 2));
  return {std::move(problem), std::nullopt, std::nullopt, std::nullopt, std::nullopt};
}

Benchmark bimodal_problem() {
  auto forward = [](const VectorXd& x) {
    VectorXd h(1);
    h(0) = (x(0) - x(1)) * (x(0) - x(1));
    return h;
  };
  auto jacobian = [](const VectorXd& x) {
    MatrixXd j(1, 2);
    j << 2.0 * (x(0) - x(1)), -2.0 * (x(0) - x(1));
    return j;
  };
  VectorXd y(1);
  y << 4.2297;
  InverseProblem<double> problem(forward, jacobian, y, MatrixXd::Identity(1, 1), VectorXd::Zero(2),
                                 MatrixXd::Identity(2, 2));
  return {std::move(problem), std::nullopt, std::nullopt, std::nullopt, std::nullopt};
}

Benchmark kl_linear_problem(Eigen::Index n_x, Eigen::Index n_y, double tau, std::optional<VectorXd> truth,
                            double noise_variance) {
  detail::require(n_x >= 1 && n_y >= 1, "kl_linear_problem: dimensions must be positive");
  detail::require(noise_variance > 0, "kl_linear_problem: noise variance must be positive");
  const KlPrior prior(n_x, tau);
  MatrixXd a(n_y, n_x);
  for (Eigen::Index i = 0; i < n_y; ++i)
    for (Eigen::Index k = 0; k < n_x; ++k)
      a(i, k) = KlPrior::basis(k + 1, static_cast<double>(i + 1) / static_cast<double>(n_y));
  const VectorXd x_true = truth.value_or(VectorXd::Zero(n_x));
  detail::require(x_true.size() == n_x, "kl_linear_problem: truth dimension mismatch");
  const VectorXd y = a * x_true;
  const MatrixXd r = noise_variance * MatrixXd::Identity(n_y, n_y);
  const MatrixXd p0 = prior.covariance();

  const MatrixXd precision = a.transpose() * a / noise_variance + MatrixXd(prior.eigenvalues().cwiseInverse().asDiagonal());
  const Eigen::LLT<MatrixXd> llt(precision);
  const MatrixXd post_cov = llt.solve(MatrixXd::Identity(n_x, n_x));
  const VectorXd post_mean = llt.solve(a.transpose() * y / noise_variance);

  InverseProblem<double> problem([a](const VectorXd& x) { return VectorXd(a * x); },
                                 [a](const VectorXd&) { return a; }, y, r, VectorXd::Zero(n_x), p0);
  return {std::move(problem), x_true, std::nullopt, post_mean, post_cov};
}

VectorXd darcy_forward(const DarcyParams& params, const VectorXd& x) {
  const Grid1D grid(params.level);
  const KlPrior prior(params.n_x, params.tau);
  detail::require(grid.intervals() % params.n_y == 0, "darcy_forward: N_y must divide the number of grid intervals");
  VectorXd u(grid.intervals() + 1);
  for (Eigen::Index m = 0; m <= grid.intervals(); ++m) u(m) = prior.field(x, grid.node(m));
  const VectorXd p = darcy_solve(grid, u);
  const Eigen::Index stride = grid.intervals() / params.n_y;
  VectorXd obs(params.n_y);
  for (Eigen::Index i = 1; i <= params.n_y; ++i) {
    const Eigen::Index node = i * stride;
    obs(i - 1) = (node == grid.intervals()) ? 0.0 : p(node - 1);
  }
  return obs;
}

Benchmark darcy1d_problem(const DarcyParams& params, const VectorXd& truth, const VectorXd& noise) {
  detail::require(truth.size() == params.n_x, "darcy1d_problem: truth dimension mismatch");
  detail::require(noise.size() == params.n_y, "darcy1d_problem: noise dimension mismatch");
  detail::require(params.noise_variance > 0, "darcy1d_problem: noise variance must be positive");
  const KlPrior prior(params.n_x, params.tau);
  const VectorXd y = darcy_forward(params, truth) + noise;
  InverseProblem<double> problem([params](const VectorXd& x) { return darcy_forward(params, x); }, std::nullopt, y,
                                 params.noise_variance * MatrixXd::Identity(params.n_y, params.n_y),
                                 VectorXd::Zero(params.n_x), prior.covariance(), FiniteDifference::forward);
  return {std::move(problem), truth, noise, std::nullopt, std::nullopt};
}

Benchmark darcy1d_problem(const DarcyParams& params, std::uint64_t seed) {
  const KlPrior prior(params.n_x, params.tau);
  std::mt19937_64 rng(derive_seed(seed, 0x7a0e7a0eULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd truth = VectorXd::Zero(params.n_x);
  for (Eigen::Index k = 1; k <= std::min(params.active_modes, params.n_x); ++k)
    truth(k - 1) = std::sqrt(prior.eigenvalue(k)) * normal(rng);
  VectorXd noise(params.n_y);
  for (Eigen::Index i = 0; i < params.n_y; ++i) noise(i) = std::sqrt(params.noise_variance) * normal(rng);
  return darcy1d_problem(params, truth, noise);
}

}  // namespace fpps
