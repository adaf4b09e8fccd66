#pragma once

#include <cmath>
#include <utility>

#include "fpps/core.hpp"

namespace fpps {

/// M particles in R^{N_x}, stored column-wise (column i is particle i).
template <typename Scalar>
class Ensemble {
 public:
  using MatrixType = Matrix<Scalar>;

  Ensemble() = default;
  explicit Ensemble(MatrixType particles) : particles_(std::move(particles)) {
    detail::require(particles_.cols() >= 1, "Ensemble: needs at least one particle");
    detail::require(particles_.rows() >= 1, "Ensemble: dimension must be positive");
    detail::require(particles_.allFinite(), "Ensemble: non-finite particle entries");
  }

  Eigen::Index size() const { return particles_.cols(); }
  Eigen::Index dim() const { return particles_.rows(); }

  const MatrixType& particles() const { return particles_; }
  auto particle(Eigen::Index i) const { return particles_.col(i); }

 private:
  MatrixType particles_;
};

/// Distance-dependent localisation: scale gamma and metric D (SPD).
template <typename Scalar>
class LocalisationConfig {
 public:
  LocalisationConfig(Scalar gamma, Matrix<Scalar> metric) : gamma_(gamma), metric_(std::move(metric)) {
    detail::require(gamma_ > Scalar(0), "LocalisationConfig: gamma must be positive");
    detail::require(detail::is_symmetric(metric_, Scalar(1e-12)),
                    "LocalisationConfig: metric is not symmetric");
    llt_.compute(metric_);
    detail::require(llt_.info() == Eigen::Success,
                    "LocalisationConfig: metric is not positive definite");
  }

  Scalar gamma() const { return gamma_; }
  const Matrix<Scalar>& metric() const { return metric_; }
  const Eigen::LLT<Matrix<Scalar>>& metric_llt() const { return llt_; }

 private:
  Scalar gamma_;
  Matrix<Scalar> metric_;
  Eigen::LLT<Matrix<Scalar>> llt_;
};

template <typename Scalar>
Vector<Scalar> mean(const Ensemble<Scalar>& ens) {
  return ens.particles().rowwise().mean();
}

/// Empirical covariance with 1/M normalisation.
template <typename Scalar>
Matrix<Scalar> covariance(const Ensemble<Scalar>& ens) {
  const Matrix<Scalar> centered = ens.particles().colwise() - mean(ens);
  return centered * centered.transpose() / static_cast<Scalar>(ens.size());
}

/// (1/M) sum_i (X_i - mean)(h_i - mean_h)^T; h_values holds h(X_i) column-wise.
template <typename Scalar>
Matrix<Scalar> cross_covariance(const Ensemble<Scalar>& ens, const Matrix<Scalar>& h_values) {
  detail::require(h_values.cols() == ens.size(), "cross_covariance: h_values not aligned with particles");
  const Matrix<Scalar> cx = ens.particles().colwise() - mean(ens);
  const Matrix<Scalar> ch = h_values.colwise() - Vector<Scalar>(h_values.rowwise().mean());
  return cx * ch.transpose() / static_cast<Scalar>(ens.size());
}

/// Row-stochastic weights w_ij proportional to exp(-|X_i - X_j|_D^2 / (2 gamma)).
template <typename Scalar>
Matrix<Scalar> localisation_weights(const Ensemble<Scalar>& ens, const LocalisationConfig<Scalar>& cfg) {
  const Eigen::Index m = ens.size();
  // Whitened coordinates turn |.|_D into the Euclidean norm.
  const Matrix<Scalar> z = cfg.metric_llt().matrixL().solve(ens.particles());
  Matrix<Scalar> w(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j)
      w(i, j) = -(z.col(i) - z.col(j)).squaredNorm() / (Scalar(2) * cfg.gamma());
    const Scalar top = w.row(i).maxCoeff();
    w.row(i) = (w.row(i).array() - top).exp();
    w.row(i) /= w.row(i).sum();
  }
  return w;
}

template <typename Scalar>
Vector<Scalar> localised_mean(const Ensemble<Scalar>& ens, const Matrix<Scalar>& weights, Eigen::Index i) {
  return ens.particles() * weights.row(i).transpose();
}

template <typename Scalar>
Matrix<Scalar> localised_covariance(const Ensemble<Scalar>& ens, const Matrix<Scalar>& weights,
                                    Eigen::Index i) {
  const Matrix<Scalar> centered = ens.particles().colwise() - localised_mean(ens, weights, i);
  return centered * weights.row(i).asDiagonal() * centered.transpose();
}

template <typename Scalar>
Matrix<Scalar> localised_cross_covariance(const Ensemble<Scalar>& ens, const Matrix<Scalar>& h_values,
                                          const Matrix<Scalar>& weights, Eigen::Index i) {
  detail::require(h_values.cols() == ens.size(),
                  "localised_cross_covariance: h_values not aligned with particles");
  const Vector<Scalar> w = weights.row(i).transpose();
  const Matrix<Scalar> cx = ens.particles().colwise() - Vector<Scalar>(ens.particles() * w);
  const Matrix<Scalar> ch = h_values.colwise() - Vector<Scalar>(h_values * w);
  return cx * w.asDiagonal() * ch.transpose();
}

/// Gradient of w_ij with respect to particle i: (w_ij / gamma) D^{-1} (X_j - localised mean_i).
template <typename Scalar>
Vector<Scalar> grad_localisation_weights(const Ensemble<Scalar>& ens, const Matrix<Scalar>& weights,
                                         const LocalisationConfig<Scalar>& cfg, Eigen::Index i,
                                         Eigen::Index j) {
  const Vector<Scalar> diff = ens.particle(j) - localised_mean(ens, weights, i);
  return weights(i, j) / cfg.gamma() * cfg.metric_llt().solve(diff);
}

/// Divergence of x_i -> P^{xx} for the global empirical covariance.
template <typename Scalar>
Vector<Scalar> divergence_correction_global(const Ensemble<Scalar>& ens, Eigen::Index i) {
  const Scalar factor = static_cast<Scalar>(ens.dim() + 1) / static_cast<Scalar>(ens.size());
  return factor * (Vector<Scalar>(ens.particle(i)) - mean(ens));
}

/// Divergence of x_i -> P^{xx}(X_i) for the localised covariance.
///
/// The three weight-gradient sums of the closed form collapse to
/// sum_j (X_j - m_i)(X_j - m_i)^T grad w_ij because sum_j grad w_ij = 0; the
/// centred form avoids cancellation for ensembles far from the origin.
template <typename Scalar>
Vector<Scalar> divergence_correction_localised(const Ensemble<Scalar>& ens, const Matrix<Scalar>& weights,
                                               const LocalisationConfig<Scalar>& cfg, Eigen::Index i) {
  const Vector<Scalar> local_mean = localised_mean(ens, weights, i);
  const Matrix<Scalar> centered = ens.particles().colwise() - local_mean;
  // Columns are grad_{x_i} w_ij.
  const Matrix<Scalar> grads =
      cfg.metric_llt().solve(centered) * (weights.row(i).transpose() / cfg.gamma()).asDiagonal();
  const Vector<Scalar> proj = centered.cwiseProduct(grads).colwise().sum().transpose();
  return weights(i, i) * static_cast<Scalar>(ens.dim() + 1) *
             (Vector<Scalar>(ens.particle(i)) - local_mean) +
         centered * proj;
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
template <typename Scalar>
Matrix<Scalar> psd_sqrt(const Matrix<Scalar>& s) {
  detail::require(detail::is_symmetric(s, Scalar(1e-10)), "psd_sqrt: matrix is not symmetric");
  const Matrix<Scalar> sym = Scalar(0.5) * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(sym);
  Vector<Scalar> values = eig.eigenvalues();
  const Scalar clip = Scalar(1e-10) * std::max<Scalar>(Scalar(1), sym.cwiseAbs().maxCoeff());
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    if (values(k) < -clip) throw ContractViolation("psd_sqrt: matrix is indefinite");
    using std::sqrt;
    values(k) = values(k) > Scalar(0) ? sqrt(values(k)) : Scalar(0);
  }
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace fpps
