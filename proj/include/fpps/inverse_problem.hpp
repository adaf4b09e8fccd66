#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <utility>

#include "fpps/core.hpp"

namespace fpps {

enum class FiniteDifference { none, forward, central };

/// Bayesian inverse problem y = h(x) + noise with Gaussian noise N(0, R) and
/// Gaussian prior N(prior_mean, prior_cov).
///
/// The regularized misfit Phi_R(x) = 1/2 |y - h(x)|_R^2 + 1/2 |x - m0|_P0^2 is
/// the unnormalised negative log-posterior used throughout the library.
/// Instances are immutable after construction.
template <typename Scalar>
class InverseProblem {
 public:
  using VectorType = Vector<Scalar>;
  using MatrixType = Matrix<Scalar>;
  using ForwardMap = std::function<VectorType(const VectorType&)>;
  using Jacobian = std::function<MatrixType(const VectorType&)>;

  InverseProblem(ForwardMap forward, std::optional<Jacobian> jacobian, VectorType observation,
                 MatrixType noise_cov, VectorType prior_mean, MatrixType prior_cov,
                 FiniteDifference fallback = FiniteDifference::none)
      : forward_(std::move(forward)),
        jacobian_(std::move(jacobian)),
        y_(std::move(observation)),
        noise_cov_(std::move(noise_cov)),
        prior_mean_(std::move(prior_mean)),
        prior_cov_(std::move(prior_cov)),
        fallback_(fallback) {
    detail::require(static_cast<bool>(forward_), "InverseProblem: forward map is empty");
    detail::require(noise_cov_.rows() == y_.size() && noise_cov_.cols() == y_.size(),
                    "InverseProblem: noise covariance does not match observation dimension");
    detail::require(prior_cov_.rows() == prior_mean_.size() &&
                        prior_cov_.cols() == prior_mean_.size(),
                    "InverseProblem: prior covariance does not match prior mean");
    noise_llt_ = factor(noise_cov_, "noise covariance");
    prior_llt_ = factor(prior_cov_, "prior covariance");
  }

  Eigen::Index state_dim() const { return prior_mean_.size(); }
  Eigen::Index data_dim() const { return y_.size(); }

  const VectorType& observation() const { return y_; }
  const MatrixType& noise_cov() const { return noise_cov_; }
  const VectorType& prior_mean() const { return prior_mean_; }
  const MatrixType& prior_cov() const { return prior_cov_; }
  const Eigen::LLT<MatrixType>& prior_llt() const { return prior_llt_; }
  const Eigen::LLT<MatrixType>& noise_llt() const { return noise_llt_; }
  bool has_jacobian() const { return jacobian_.has_value(); }
  FiniteDifference fallback() const { return fallback_; }

  VectorType forward(const VectorType& x) const {
    detail::require(x.size() == state_dim(), "InverseProblem: state dimension mismatch");
    VectorType hx = forward_(x);
    detail::require(hx.size() == data_dim(), "InverseProblem: forward output dimension mismatch");
    return hx;
  }

  /// R^{-1} r
  VectorType noise_precision_apply(const VectorType& r) const { return noise_llt_.solve(r); }
  /// P0^{-1} v
  VectorType prior_precision_apply(const VectorType& v) const { return prior_llt_.solve(v); }

  /// Misfit from a precomputed forward value.
  Scalar misfit_from_forward(const VectorType& hx) const {
    const VectorType r = y_ - hx;
    return Scalar(0.5) * r.dot(noise_llt_.solve(r));
  }

  Scalar prior_term(const VectorType& x) const {
    const VectorType d = x - prior_mean_;
    return Scalar(0.5) * d.dot(prior_llt_.solve(d));
  }

  MatrixType jacobian(const VectorType& x) const {
    if (jacobian_) {
      MatrixType J = (*jacobian_)(x);
      detail::require(J.rows() == data_dim() && J.cols() == state_dim(),
                      "InverseProblem: Jacobian has wrong shape");
      return J;
    }
    if (fallback_ == FiniteDifference::none)
      throw ConfigurationError("InverseProblem: no Jacobian and finite-difference fallback disabled");
    return finite_difference_jacobian(x);
  }

  MatrixType finite_difference_jacobian(const VectorType& x) const {
    const Scalar eps(1e-6);
    MatrixType J(data_dim(), state_dim());
    const VectorType h0 = forward(x);
    for (Eigen::Index k = 0; k < state_dim(); ++k) {
      using std::abs;
      using std::max;
      const Scalar step = eps * max(Scalar(1), abs(x(k)));
      VectorType xp = x;
      xp(k) += step;
      if (fallback_ == FiniteDifference::central) {
        VectorType xm = x;
        xm(k) -= step;
        J.col(k) = (forward(xp) - forward(xm)) / (Scalar(2) * step);
      } else {
        J.col(k) = (forward(xp) - h0) / step;
      }
    }
    return J;
  }

 private:
  static Eigen::LLT<MatrixType> factor(const MatrixType& m, const char* name) {
    if (!detail::is_symmetric(m, Scalar(1e-12)))
      throw ContractViolation(std::string("InverseProblem: ") + name + " is not symmetric");
    Eigen::LLT<MatrixType> llt(m);
    if (llt.info() != Eigen::Success)
      throw ContractViolation(std::string("InverseProblem: ") + name + " is not positive definite");
    return llt;
  }

  ForwardMap forward_;
  std::optional<Jacobian> jacobian_;
  VectorType y_;
  MatrixType noise_cov_;
  VectorType prior_mean_;
  MatrixType prior_cov_;
  FiniteDifference fallback_;
  Eigen::LLT<MatrixType> noise_llt_;
  Eigen::LLT<MatrixType> prior_llt_;
};

/// 1/2 |y - h(x)|_R^2
template <typename Scalar>
Scalar misfit(const Vector<Scalar>& x, const InverseProblem<Scalar>& problem) {
  return problem.misfit_from_forward(problem.forward(x));
}

template <typename Scalar>
Scalar regularized_misfit(const Vector<Scalar>& x, const InverseProblem<Scalar>& problem) {
  return misfit(x, problem) + problem.prior_term(x);
}

/// Dh(x)^T R^{-1} (h(x) - y) + P0^{-1} (x - m0)
template <typename Scalar>
Vector<Scalar> grad_regularized_misfit(const Vector<Scalar>& x,
                                       const InverseProblem<Scalar>& problem) {
  const Vector<Scalar> residual = problem.forward(x) - problem.observation();
  const Matrix<Scalar> J = problem.jacobian(x);
  return J.transpose() * problem.noise_precision_apply(residual) +
         problem.prior_precision_apply(x - problem.prior_mean());
}

}  // namespace fpps
