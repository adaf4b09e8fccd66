#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <utility>

#include "fpps/core.hpp"

namespace fpps {

enum class KernelFamily { gaussian, data_driven };

/// Kernel k(x, x') = psi(|x - x'|_B) with psi(r) = exp(-r^2/2), or its
/// data-driven normalisation against a fixed anchor set.
template <typename Scalar>
class KernelSpec {
 public:
  KernelSpec(KernelFamily family, Matrix<Scalar> bandwidth, std::optional<Matrix<Scalar>> anchors = {})
      : family_(family), bandwidth_(std::move(bandwidth)), anchors_(std::move(anchors)) {
    detail::require(detail::is_symmetric(bandwidth_, Scalar(1e-12)), "KernelSpec: bandwidth not symmetric");
    llt_.compute(bandwidth_);
    if (llt_.info() != Eigen::Success) throw ContractViolation("KernelSpec: bandwidth not positive definite");
    if (family_ == KernelFamily::data_driven) {
      if (!anchors_ || anchors_->cols() == 0)
        throw ConfigurationError("KernelSpec: data-driven kernel requires anchors");
      detail::require(anchors_->rows() == bandwidth_.rows(), "KernelSpec: anchor dimension mismatch");
    }
  }

  static KernelSpec gaussian(Matrix<Scalar> bandwidth) {
    return KernelSpec(KernelFamily::gaussian, std::move(bandwidth));
  }

  KernelFamily family() const { return family_; }
  const Matrix<Scalar>& bandwidth() const { return bandwidth_; }
  const Eigen::LLT<Matrix<Scalar>>& bandwidth_llt() const { return llt_; }
  const std::optional<Matrix<Scalar>>& anchors() const { return anchors_; }
  Eigen::Index dim() const { return bandwidth_.rows(); }

  /// Same family and anchors with a different bandwidth matrix.
  KernelSpec with_bandwidth(Matrix<Scalar> bandwidth) const {
    return KernelSpec(family_, std::move(bandwidth), anchors_);
  }

  /// |x - x'|_B^2
  template <typename A, typename B>
  Scalar sq_distance(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& xp) const {
    return llt_.matrixL().solve(Vector<Scalar>(x - xp)).squaredNorm();
  }

  /// B^{-1} v
  Vector<Scalar> precision_apply(const Vector<Scalar>& v) const { return llt_.solve(v); }

 private:
  KernelFamily family_;
  Matrix<Scalar> bandwidth_;
  std::optional<Matrix<Scalar>> anchors_;
  Eigen::LLT<Matrix<Scalar>> llt_;
};

/// exp(-1/2 (x - x')^T B^{-1} (x - x')), unnormalised.
template <typename Scalar>
Scalar gaussian_kernel(const Vector<Scalar>& x, const Vector<Scalar>& xp, const Matrix<Scalar>& bandwidth) {
  detail::require(x.size() == xp.size() && x.size() == bandwidth.rows(), "gaussian_kernel: dimension mismatch");
  const Vector<Scalar> d = x - xp;
  using std::exp;
  return exp(Scalar(-0.5) * d.dot(bandwidth.llt().solve(d)));
}

namespace detail {

/// log sum_a psi(|z - a|_B) over the anchor columns, stabilised.
template <typename Scalar>
Scalar log_anchor_mass(const KernelSpec<Scalar>& spec, const Vector<Scalar>& z) {
  const auto& anchors = *spec.anchors();
  Scalar top = -std::numeric_limits<Scalar>::infinity();
  Vector<Scalar> e(anchors.cols());
  for (Eigen::Index a = 0; a < anchors.cols(); ++a) {
    e(a) = Scalar(-0.5) * spec.sq_distance(z, anchors.col(a));
    top = std::max(top, e(a));
  }
  using std::exp;
  using std::log;
  return top + log((e.array() - top).exp().sum());
}

/// grad_z log sum_a psi(|z - a|_B)
template <typename Scalar>
Vector<Scalar> grad_log_anchor_mass(const KernelSpec<Scalar>& spec, const Vector<Scalar>& z) {
  const auto& anchors = *spec.anchors();
  Vector<Scalar> e(anchors.cols());
  for (Eigen::Index a = 0; a < anchors.cols(); ++a) e(a) = Scalar(-0.5) * spec.sq_distance(z, anchors.col(a));
  e = (e.array() - e.maxCoeff()).exp();
  e /= e.sum();
  const Vector<Scalar> weighted_anchor = anchors * e;
  return -spec.precision_apply(z - weighted_anchor);
}

}  // namespace detail

/// Data-driven kernel psi(|x-x'|_B) / (sqrt(sum_i psi(|X_i - x'|_B)) sqrt(sum_j psi(|x - X_j|_B))).
template <typename Scalar>
Scalar data_driven_kernel(const Vector<Scalar>& x, const Vector<Scalar>& xp, const Matrix<Scalar>& anchors,
                          const Matrix<Scalar>& bandwidth) {
  if (anchors.cols() == 0) throw ConfigurationError("data_driven_kernel: anchors are empty");
  const KernelSpec<Scalar> spec(KernelFamily::data_driven, bandwidth, anchors);
  using std::exp;
  return exp(Scalar(-0.5) * spec.sq_distance(x, xp) - Scalar(0.5) * detail::log_anchor_mass(spec, xp) -
             Scalar(0.5) * detail::log_anchor_mass(spec, x));
}

template <typename Scalar>
Scalar log_kernel(const KernelSpec<Scalar>& spec, const Vector<Scalar>& x, const Vector<Scalar>& xp) {
  Scalar value = Scalar(-0.5) * spec.sq_distance(x, xp);
  if (spec.family() == KernelFamily::data_driven)
    value -= Scalar(0.5) * (detail::log_anchor_mass(spec, x) + detail::log_anchor_mass(spec, xp));
  return value;
}

template <typename Scalar>
Scalar kernel(const KernelSpec<Scalar>& spec, const Vector<Scalar>& x, const Vector<Scalar>& xp) {
  using std::exp;
  return exp(log_kernel(spec, x, xp));
}

/// grad_x log k(x, x'); the kernel gradient is k times this.
template <typename Scalar>
Vector<Scalar> grad_log_kernel(const KernelSpec<Scalar>& spec, const Vector<Scalar>& x, const Vector<Scalar>& xp) {
  Vector<Scalar> g = -spec.precision_apply(x - xp);
  if (spec.family() == KernelFamily::data_driven) g -= Scalar(0.5) * detail::grad_log_anchor_mass(spec, x);
  return g;
}

struct AmiseConstants {
  double delta;
  double c_delta;
};

/// delta = 1/(N_x+4), c_delta = (4/(N_x+2))^delta.
inline AmiseConstants amise_constants(Eigen::Index nx) {
  detail::require(nx >= 1, "amise_constants: dimension must be positive");
  const double delta = 1.0 / static_cast<double>(nx + 4);
  return {delta, std::pow(4.0 / static_cast<double>(nx + 2), delta)};
}

enum class BandwidthMode { fixed_prior, adaptive_covariance, amise_fixed, amise_adaptive };

struct BandwidthPolicy {
  BandwidthMode mode = BandwidthMode::fixed_prior;
  double alpha = 1.0;
  std::optional<double> freeze_time;

  bool adaptive() const {
    return mode == BandwidthMode::adaptive_covariance || mode == BandwidthMode::amise_adaptive;
  }
  void validate() const {
    if ((mode == BandwidthMode::fixed_prior || mode == BandwidthMode::adaptive_covariance) && !(alpha > 0))
      throw ConfigurationError("BandwidthPolicy: alpha must be positive");
    if (freeze_time && *freeze_time < 0) throw ConfigurationError("BandwidthPolicy: freeze_time must be >= 0");
  }
};

/// Kernel bandwidth matrix for the given policy.
///
/// `reference` is the fixed covariance (P0, or the posterior covariance for
/// the B_* choice); `current` is the ensemble covariance P_t. Freezing the
/// adaptive modes at `freeze_time` is the caller's job (see KernelSchedule):
/// this function always uses the `current` it is handed.
template <typename Scalar>
Matrix<Scalar> bandwidth(const BandwidthPolicy& policy, const Matrix<Scalar>& reference,
                         const Matrix<Scalar>& current, Eigen::Index m, Eigen::Index nx) {
  policy.validate();
  const auto amise_scale = [&] {
    const AmiseConstants c = amise_constants(nx);
    return static_cast<Scalar>(c.c_delta / std::pow(static_cast<double>(m), c.delta));
  };
  Matrix<Scalar> b;
  switch (policy.mode) {
    case BandwidthMode::fixed_prior: b = static_cast<Scalar>(policy.alpha) * reference; break;
    case BandwidthMode::adaptive_covariance: b = static_cast<Scalar>(policy.alpha) * current; break;
    case BandwidthMode::amise_fixed: b = amise_scale() * Matrix<Scalar>(reference.diagonal().asDiagonal()); break;
    case BandwidthMode::amise_adaptive: b = amise_scale() * Matrix<Scalar>(current.diagonal().asDiagonal()); break;
  }
  const Scalar trace = b.trace();
  if (!(trace > Scalar(0))) throw DegenerateEnsembleError("bandwidth: degenerate covariance (zero trace)");
  if (b.diagonal().minCoeff() < Scalar(1e-12))
    b += Scalar(1e-12) * trace / static_cast<Scalar>(nx) * Matrix<Scalar>::Identity(nx, nx);
  return b;
}

}  // namespace fpps
