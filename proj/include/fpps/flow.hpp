#pragma once

#include <cmath>
#include <limits>
#include <optional>

#include "fpps/ensemble.hpp"
#include "fpps/inverse_problem.hpp"
#include "fpps/kernels.hpp"

namespace fpps {

enum class Preconditioner { identity, global_covariance, localised_covariance };
enum class GradientMode { exact, gradient_free };

/// Member of the deterministic Fokker-Planck flow family.
template <typename Scalar>
struct FlowVariant {
  Preconditioner preconditioner = Preconditioner::identity;
  GradientMode gradient = GradientMode::exact;
  std::optional<LocalisationConfig<Scalar>> localisation;

  void validate() const {
    if (gradient == GradientMode::gradient_free && preconditioner == Preconditioner::identity)
      throw ConfigurationError("FlowVariant: gradient-free mode requires covariance preconditioning");
    if (preconditioner == Preconditioner::localised_covariance && !localisation)
      throw ConfigurationError("FlowVariant: localised preconditioner requires a localisation config");
  }
};

/// Gram matrix K_ij = k(X_i, X_j) with its row sums and column sums s_j.
template <typename Scalar>
struct KernelGram {
  Matrix<Scalar> values;
  Vector<Scalar> row_sums;
  Vector<Scalar> col_sums;
};

namespace detail {

template <typename Scalar>
Vector<Scalar> log_anchor_masses(const KernelSpec<Scalar>& kernel, const Ensemble<Scalar>& ens) {
  Vector<Scalar> a(ens.size());
  for (Eigen::Index i = 0; i < ens.size(); ++i) a(i) = log_anchor_mass(kernel, Vector<Scalar>(ens.particle(i)));
  return a;
}

}  // namespace detail

template <typename Scalar>
KernelGram<Scalar> kernel_gram(const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel) {
  detail::require(kernel.dim() == ens.dim(), "kernel_gram: kernel dimension mismatch");
  const Eigen::Index m = ens.size();
  const Matrix<Scalar> z = kernel.bandwidth_llt().matrixL().solve(ens.particles());
  Matrix<Scalar> logk(m, m);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < m; ++i) logk(i, j) = Scalar(-0.5) * (z.col(i) - z.col(j)).squaredNorm();
  if (kernel.family() == KernelFamily::data_driven) {
    const Vector<Scalar> a = detail::log_anchor_masses(kernel, ens);
    logk.colwise() -= Scalar(0.5) * a;
    logk.rowwise() -= Scalar(0.5) * a.transpose();
  }
  KernelGram<Scalar> gram;
  gram.values = logk.unaryExpr([](Scalar v) { using std::exp; return exp(v); });
  gram.row_sums = gram.values.rowwise().sum();
  gram.col_sums = gram.values.colwise().sum().transpose();
  for (Eigen::Index i = 0; i < m; ++i)
    if (!(gram.row_sums(i) > Scalar(0)) || !(gram.col_sums(i) > Scalar(0)))
      throw IsolatedParticleError("kernel values underflow for particle " + std::to_string(i), static_cast<long>(i));
  return gram;
}

/// grad_x [ ln((1/M) sum_j k(x, X_j)) + sum_j k(x, X_j) / s_j ] at an arbitrary x,
/// with s_j = sum_l k(X_l, X_j) held fixed.
template <typename Scalar>
Vector<Scalar> kde_log_gradient_terms(const Vector<Scalar>& x, const Ensemble<Scalar>& ens,
                                      const KernelSpec<Scalar>& kernel, const KernelGram<Scalar>& gram) {
  const Eigen::Index m = ens.size();
  Vector<Scalar> logk(m);
  for (Eigen::Index j = 0; j < m; ++j) logk(j) = log_kernel(kernel, x, Vector<Scalar>(ens.particle(j)));
  const Scalar top = logk.maxCoeff();
  using std::log;
  if (!(top > log(std::numeric_limits<Scalar>::min())))
    throw IsolatedParticleError("kde_log_gradient_terms: all kernel values underflow", -1);
  const Vector<Scalar> k = logk.array().exp();
  const Vector<Scalar> coeff = k / k.sum() + k.cwiseQuotient(gram.col_sums);
  Vector<Scalar> g = Vector<Scalar>::Zero(x.size());
  for (Eigen::Index j = 0; j < m; ++j)
    if (coeff(j) != Scalar(0)) g += coeff(j) * grad_log_kernel(kernel, x, Vector<Scalar>(ens.particle(j)));
  return g;
}

template <typename Scalar>
Vector<Scalar> kde_log_gradient_terms(const Vector<Scalar>& x, const Ensemble<Scalar>& ens,
                                      const KernelSpec<Scalar>& kernel) {
  return kde_log_gradient_terms(x, ens, kernel, kernel_gram(ens, kernel));
}

/// kde_log_gradient_terms evaluated at every particle, column-wise.
template <typename Scalar>
Matrix<Scalar> ensemble_kde_log_gradients(const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                                          const KernelGram<Scalar>& gram) {
  const auto& x = ens.particles();
  // C_ij = K_ij (1/r_i + 1/s_j)
  const Matrix<Scalar> c =
      (gram.row_sums.cwiseInverse().asDiagonal() * gram.values) + gram.values * gram.col_sums.cwiseInverse().asDiagonal();
  const Vector<Scalar> c_rows = c.rowwise().sum();
  const Matrix<Scalar> pulled = x * c_rows.asDiagonal() - x * c.transpose();
  Matrix<Scalar> g = -kernel.bandwidth_llt().solve(pulled);
  if (kernel.family() == KernelFamily::data_driven) {
    for (Eigen::Index i = 0; i < ens.size(); ++i)
      g.col(i) -= Scalar(0.5) * c_rows(i) * detail::grad_log_anchor_mass(kernel, Vector<Scalar>(x.col(i)));
  }
  return g;
}

/// F(x) = -grad_x { ln((1/M) sum_j k(x, X_j)) + Phi_R(x) + sum_j k(x, X_j)/s_j }
template <typename Scalar>
Vector<Scalar> drift(const Vector<Scalar>& x, const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                     const InverseProblem<Scalar>& problem) {
  return -kde_log_gradient_terms(x, ens, kernel) - grad_regularized_misfit(x, problem);
}

/// V(z) = sum_i [ ln((1/M) sum_j k(x_i, x_j)) + Phi_R(x_i) ]
template <typename Scalar>
Scalar potential(const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel, const InverseProblem<Scalar>& problem) {
  const KernelGram<Scalar> gram = kernel_gram(ens, kernel);
  Scalar v(0);
  using std::log;
  for (Eigen::Index i = 0; i < ens.size(); ++i)
    v += log(gram.row_sums(i) / static_cast<Scalar>(ens.size())) +
         regularized_misfit(Vector<Scalar>(ens.particle(i)), problem);
  return v;
}

/// h(X_i) for every particle, column-wise.
template <typename Scalar>
Matrix<Scalar> forward_all(const Ensemble<Scalar>& ens, const InverseProblem<Scalar>& problem) {
  Matrix<Scalar> h(problem.data_dim(), ens.size());
  parallel_for(ens.size(), [&](Eigen::Index i) { h.col(i) = problem.forward(Vector<Scalar>(ens.particle(i))); });
  return h;
}

/// grad Phi_R(X_i) for every particle, column-wise.
template <typename Scalar>
Matrix<Scalar> grad_all(const Ensemble<Scalar>& ens, const InverseProblem<Scalar>& problem) {
  Matrix<Scalar> g(ens.dim(), ens.size());
  parallel_for(ens.size(),
               [&](Eigen::Index i) { g.col(i) = grad_regularized_misfit(Vector<Scalar>(ens.particle(i)), problem); });
  return g;
}

/// Ensemble velocity dX_i/dt for the given flow variant, column-wise.
template <typename Scalar>
Matrix<Scalar> rhs(const FlowVariant<Scalar>& variant, const Ensemble<Scalar>& ens, const KernelSpec<Scalar>& kernel,
                   const InverseProblem<Scalar>& problem) {
  variant.validate();
  const Eigen::Index m = ens.size();
  const Matrix<Scalar> kde = ensemble_kde_log_gradients(ens, kernel, kernel_gram(ens, kernel));
  Matrix<Scalar> v(ens.dim(), m);

  if (variant.gradient == GradientMode::exact) {
    const Matrix<Scalar> f = -kde - grad_all(ens, problem);
    switch (variant.preconditioner) {
      case Preconditioner::identity: return f;
      case Preconditioner::global_covariance: return covariance(ens) * f;
      case Preconditioner::localised_covariance: {
        const Matrix<Scalar> w = localisation_weights(ens, *variant.localisation);
        parallel_for(m, [&](Eigen::Index i) { v.col(i) = localised_covariance(ens, w, i) * f.col(i); });
        return v;
      }
    }
  }

  const Matrix<Scalar> h = forward_all(ens, problem);
  const Matrix<Scalar> data_pull = problem.noise_llt().solve(h.colwise() - problem.observation());
  const Matrix<Scalar> prior_pull = problem.prior_llt().solve(ens.particles().colwise() - problem.prior_mean());
  if (variant.preconditioner == Preconditioner::global_covariance) {
    const Matrix<Scalar> p = covariance(ens);
    return -p * (kde + prior_pull) - cross_covariance(ens, h) * data_pull;
  }
  const Matrix<Scalar> w = localisation_weights(ens, *variant.localisation);
  parallel_for(m, [&](Eigen::Index i) {
    const Matrix<Scalar> p = localised_covariance(ens, w, i);
    v.col(i) = -p * (kde.col(i) + prior_pull.col(i)) - localised_cross_covariance(ens, h, w, i) * data_pull.col(i);
  });
  return v;
}

/// dX_i/dt = -grad Phi_R(X_i) + (P^{xx})^{-1} (X_i - mean) for quadratic Phi_R.
template <typename Scalar>
Matrix<Scalar> linear_gaussian_rhs(const Ensemble<Scalar>& ens, const InverseProblem<Scalar>& problem) {
  if (ens.size() < ens.dim() + 1)
    throw DegenerateEnsembleError("linear_gaussian_rhs: needs M >= N_x + 1 particles");
  const Eigen::LLT<Matrix<Scalar>> llt(covariance(ens));
  if (llt.info() != Eigen::Success || !(llt.rcond() > Scalar(1e-14))) throw DegenerateEnsembleError("linear_gaussian_rhs: singular ensemble covariance");
  const Matrix<Scalar> centered = ens.particles().colwise() - mean(ens);
  return -grad_all(ens, problem) + llt.solve(centered);
}

}  // namespace fpps
