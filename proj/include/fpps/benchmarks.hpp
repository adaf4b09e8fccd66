#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include "fpps/inverse_problem.hpp"

namespace fpps {

/// Problem plus whatever reference information the construction provides.
struct Benchmark {
  InverseProblem<double> problem;
  std::optional<VectorXd> truth;
  std::optional<VectorXd> noise;  // realised measurement error, if drawn
  std::optional<VectorXd> posterior_mean;
  std::optional<MatrixXd> posterior_cov;
};

/// Sine KL basis psi_k(s) = sqrt(2 pi) sin(2 pi k s) with eigenvalues k^{-2 tau}.
class KlPrior {
 public:
  KlPrior(Eigen::Index n_modes, double tau);

  Eigen::Index size() const { return n_; }
  double tau() const { return tau_; }
  double eigenvalue(Eigen::Index k) const;  // k = 1..N_x
  static double basis(Eigen::Index k, double s);
  VectorXd eigenvalues() const;
  MatrixXd covariance() const;
  /// u(s, x) = sum_k x_k psi_k(s)
  double field(const VectorXd& x, double s) const;

 private:
  Eigen::Index n_;
  double tau_;
};

/// Uniform grid on [0, 1] with mesh 2^{-level}; node m sits at m * h, m = 0..2^level.
class Grid1D {
 public:
  explicit Grid1D(int level);
  int level() const { return level_; }
  double mesh() const { return std::ldexp(1.0, -level_); }
  Eigen::Index intervals() const { return Eigen::Index{1} << level_; }
  Eigen::Index interior() const { return intervals() - 1; }
  double node(Eigen::Index m) const { return static_cast<double>(m) * mesh(); }

 private:
  int level_;
};

/// Solves -(e^u p')' = 1, p(0) = p(1) = 0 with conservative finite differences.
/// `u` is given at all 2^l + 1 grid nodes (boundaries included); the result
/// holds p at the 2^l - 1 interior nodes.
VectorXd darcy_solve(const Grid1D& grid, const VectorXd& u);

/// Identity forward map arranged so that Phi_R(x) = 1/2 (x - m)^T P^{-1} (x - m).
Benchmark linear_gaussian_problem(const VectorXd& posterior_mean, const MatrixXd& posterior_cov);

/// p(s, x) = x_2 s + e^{-x_1}(-s^2/2 + s/2) observed at s = 0.25, 0.75.
Benchmark elliptic2d_problem();

/// h(x) = (x_1 - x_2)^2 with y = 4.2297, unit noise and standard normal prior.
Benchmark bimodal_problem();

/// y = A x^dagger with A_ik = psi_k(i / N_y); R = noise_variance * I.
/// The truth defaults to zero; the analytic posterior is attached.
Benchmark kl_linear_problem(Eigen::Index n_x, Eigen::Index n_y, double tau = 1.0,
                            std::optional<VectorXd> truth = std::nullopt, double noise_variance = 10.0);

struct DarcyParams {
  Eigen::Index n_x = 32;
  Eigen::Index n_y = 16;
  double tau = 1.5;
  int level = 8;
  double noise_variance = 0.01;
  Eigen::Index active_modes = 4;  // truth modes drawn from the prior, the rest are zero
};

/// Observes p at s_i = i / N_y (the last point, s = 1, is the boundary value 0).
Benchmark darcy1d_problem(const DarcyParams& params, const VectorXd& truth, const VectorXd& noise);

/// Draws the truth and noise realisation from `seed`.
Benchmark darcy1d_problem(const DarcyParams& params, std::uint64_t seed);

/// The Darcy forward map alone, for grid studies.
VectorXd darcy_forward(const DarcyParams& params, const VectorXd& x);

}  // namespace fpps
