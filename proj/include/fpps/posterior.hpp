#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "fpps/ensemble.hpp"
#include "fpps/flow.hpp"
#include "fpps/inverse_problem.hpp"
#include "fpps/kernels.hpp"

namespace fpps {

/// KDE reconstruction from equilibrium particles X_c with cached column sums
/// s_j = sum_l k(X_c^l, X_c^j).
template <typename Scalar>
class PosteriorEstimate {
 public:
  PosteriorEstimate(Ensemble<Scalar> particles, KernelSpec<Scalar> kernel)
      : particles_(std::move(particles)), kernel_(std::move(kernel)) {
    detail::require(kernel_.dim() == particles_.dim(), "PosteriorEstimate: kernel dimension mismatch");
    col_sums_ = kernel_gram(particles_, kernel_).col_sums;
  }

  const Ensemble<Scalar>& particles() const { return particles_; }
  const KernelSpec<Scalar>& kernel() const { return kernel_; }
  const Vector<Scalar>& col_sums() const { return col_sums_; }

 private:
  Ensemble<Scalar> particles_;
  KernelSpec<Scalar> kernel_;
  Vector<Scalar> col_sums_;
};

namespace detail {

/// Returns (ln sum_j k(x, X_j), sum_j k(x, X_j)/s_j); the log is -inf once every kernel value underflows.
template <typename Scalar>
std::pair<Scalar, Scalar> kde_parts(const Vector<Scalar>& x, const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                                    const Vector<Scalar>& col_sums) {
  const Eigen::Index m = ens.size();
  Vector<Scalar> logk(m);
  for (Eigen::Index j = 0; j < m; ++j) logk(j) = log_kernel(kernel, x, Vector<Scalar>(ens.particle(j)));
  const Scalar top = logk.maxCoeff();
  using std::exp;
  using std::log;
  const Vector<Scalar> k = logk.unaryExpr([](Scalar v) { using std::exp; return exp(v); });
  const Scalar weight_term = k.cwiseQuotient(col_sums).sum();
  if (!(k.maxCoeff() > Scalar(0))) return {-std::numeric_limits<Scalar>::infinity(), weight_term};
  return {top + log((logk.array() - top).exp().sum()), weight_term};
}

}  // namespace detail

/// ln((1/M) sum_i k(x, X_c^i)) + sum_j k(x, X_c^j)/s_j; -inf when x is far from every particle.
template <typename Scalar>
Scalar kde_log_density(const Vector<Scalar>& x, const PosteriorEstimate<Scalar>& est) {
  detail::require(x.size() == est.particles().dim(), "kde_log_density: dimension mismatch");
  const auto [log_sum, weight_term] = detail::kde_parts(x, est.particles(), est.kernel(), est.col_sums());
  using std::log;
  if (!std::isfinite(static_cast<double>(log_sum))) return log_sum;
  return log_sum - log(static_cast<Scalar>(est.particles().size())) + weight_term;
}

template <typename Scalar>
struct WeightedSamples {
  Matrix<Scalar> samples;  // column-wise
  Vector<Scalar> weights;  // normalised
};

/// Effective sample size 1 / sum w^2 of normalised weights.
template <typename Scalar>
Scalar ess(const Vector<Scalar>& weights) {
  return Scalar(1) / weights.squaredNorm();
}

/// Draws K samples from N(X_c^i, B) per particle with importance weights
/// proportional to exp(sum_j k(x, X_c^j)/s_j).
template <typename Scalar>
WeightedSamples<Scalar> sample_posterior(const PosteriorEstimate<Scalar>& est, Eigen::Index k_per_particle,
                                         std::mt19937_64& rng) {
  if (est.kernel().family() != KernelFamily::gaussian)
    throw UnsupportedOperation("sample_posterior: no closed-form sampler for the data-driven kernel");
  detail::require(k_per_particle >= 1, "sample_posterior: K must be positive");
  const Eigen::Index m = est.particles().size();
  const Eigen::Index n = est.particles().dim();
  const Eigen::Index total = m * k_per_particle;
  const Matrix<Scalar> l = est.kernel().bandwidth_llt().matrixL();
  std::normal_distribution<double> normal(0.0, 1.0);

  WeightedSamples<Scalar> out;
  out.samples.resize(n, total);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index r = 0; r < k_per_particle; ++r) {
      Vector<Scalar> xi(n);
      for (Eigen::Index d = 0; d < n; ++d) xi(d) = static_cast<Scalar>(normal(rng));
      out.samples.col(i * k_per_particle + r) = est.particles().particle(i) + l * xi;
    }

  Vector<Scalar> logw(total);
  parallel_for(total, [&](Eigen::Index s) {
    logw(s) = detail::kde_parts(Vector<Scalar>(out.samples.col(s)), est.particles(), est.kernel(), est.col_sums()).second;
  });
  using std::exp;
  out.weights = (logw.array() - logw.maxCoeff()).exp();
  out.weights /= out.weights.sum();
  return out;
}

/// Weighted mean and 1/sum(w) covariance of weighted samples.
template <typename Scalar>
std::pair<Vector<Scalar>, Matrix<Scalar>> weighted_moments(const Matrix<Scalar>& samples, const Vector<Scalar>& weights) {
  detail::require(samples.cols() == weights.size(), "weighted_moments: size mismatch");
  const Vector<Scalar> mu = samples * weights / weights.sum();
  const Matrix<Scalar> c = samples.colwise() - mu;
  return {mu, c * weights.asDiagonal() * c.transpose() / weights.sum()};
}

/// ln((1/M) sum_j k(x, X_j)) + Phi_R(x) + sum_j k(x, X_j)/s_j
template <typename Scalar>
Scalar variational_derivative(const Vector<Scalar>& x, const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                              const InverseProblem<Scalar>& problem) {
  const KernelGram<Scalar> gram = kernel_gram(ens, kernel);
  const auto [log_sum, weight_term] = detail::kde_parts(x, ens, kernel, gram.col_sums);
  using std::log;
  return log_sum - log(static_cast<Scalar>(ens.size())) + regularized_misfit(x, problem) + weight_term;
}

template <typename Scalar>
struct EnsembleDiagnostics {
  Scalar spread;
  Vector<Scalar> mean;
  Scalar cov_trace;
  std::optional<Scalar> potential;
};

/// Spread e_t = (1/M) sum |X_i - mean|^2, which coincides with trace(P^{xx}).
template <typename Scalar>
EnsembleDiagnostics<Scalar> diagnostics(const Ensemble<Scalar>& ens) {
  EnsembleDiagnostics<Scalar> d;
  d.mean = mean(ens);
  d.spread = (ens.particles().colwise() - d.mean).colwise().squaredNorm().mean();
  d.cov_trace = covariance(ens).trace();
  return d;
}

template <typename Scalar>
EnsembleDiagnostics<Scalar> diagnostics(const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                                        const InverseProblem<Scalar>& problem) {
  EnsembleDiagnostics<Scalar> d = diagnostics(ens);
  d.potential = potential(ens, kernel, problem);
  return d;
}

/// Log density on a rectangular grid (1-D or 2-D) normalised by the midpoint rule.
struct GridDensity {
  std::vector<VectorXd> points;
  std::vector<double> log_density;
  std::vector<double> density;  // normalised, sums to 1 / cell volume
};

/// `axes` holds one set of node coordinates per dimension (uniform spacing assumed).
inline GridDensity grid_density(const PosteriorEstimate<double>& est, const std::vector<VectorXd>& axes) {
  detail::require(static_cast<Eigen::Index>(axes.size()) == est.particles().dim() && !axes.empty() && axes.size() <= 2,
                  "grid_density: need one axis per dimension, dimension 1 or 2");
  GridDensity g;
  const Eigen::Index nx = axes[0].size();
  const Eigen::Index ny = axes.size() == 2 ? axes[1].size() : 1;
  for (Eigen::Index a = 0; a < nx; ++a)
    for (Eigen::Index b = 0; b < ny; ++b) {
      VectorXd p(static_cast<Eigen::Index>(axes.size()));
      p(0) = axes[0](a);
      if (axes.size() == 2) p(1) = axes[1](b);
      g.points.push_back(p);
    }
  g.log_density.resize(g.points.size());
  parallel_for(static_cast<Eigen::Index>(g.points.size()), [&](Eigen::Index s) {
    g.log_density[static_cast<std::size_t>(s)] = kde_log_density(g.points[static_cast<std::size_t>(s)], est);
  });
  double cell = 1.0;
  for (const auto& ax : axes)
    if (ax.size() > 1) cell *= (ax(ax.size() - 1) - ax(0)) / static_cast<double>(ax.size() - 1);
  double top = -std::numeric_limits<double>::infinity();
  for (double v : g.log_density) top = std::max(top, v);
  double total = 0;
  g.density.resize(g.points.size());
  for (std::size_t s = 0; s < g.points.size(); ++s) {
    g.density[s] = std::isfinite(g.log_density[s]) ? std::exp(g.log_density[s] - top) : 0.0;
    total += g.density[s];
  }
  for (double& v : g.density) v /= total * cell;
  return g;
}

}  // namespace fpps
