#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fpps/ensemble.hpp"
#include "fpps/flow.hpp"
#include "fpps/integrator.hpp"
#include "fpps/inverse_problem.hpp"

namespace fpps {

enum class SamplerKind {
  plain_brownian,
  interacting,
  corrected,
  localised_corrected,
  gradient_free_corrected,
  localised_gradient_free_corrected
};

template <typename Scalar>
struct SamplerVariant {
  SamplerKind kind = SamplerKind::corrected;
  std::optional<Matrix<Scalar>> preconditioner;  // C, plain_brownian only
  std::optional<LocalisationConfig<Scalar>> localisation;

  bool localised() const {
    return kind == SamplerKind::localised_corrected || kind == SamplerKind::localised_gradient_free_corrected;
  }
  bool gradient_free() const {
    return kind == SamplerKind::gradient_free_corrected || kind == SamplerKind::localised_gradient_free_corrected;
  }
  bool corrected() const { return kind != SamplerKind::plain_brownian && kind != SamplerKind::interacting; }

  void validate() const {
    if (localised() && !localisation) throw ConfigurationError("SamplerVariant: localised kind requires localisation");
    if (kind == SamplerKind::plain_brownian) {
      if (!preconditioner) throw ConfigurationError("SamplerVariant: plain_brownian requires a preconditioner C");
      if (!detail::is_symmetric(*preconditioner, Scalar(1e-12)) ||
          Eigen::LLT<Matrix<Scalar>>(*preconditioner).info() != Eigen::Success)
        throw ConfigurationError("SamplerVariant: C must be symmetric positive definite");
    }
  }
};

/// Either `dt` (fixed step) or `safety` (adaptive step, capped at dt_max).
struct StepConfig {
  std::optional<double> dt;
  double safety = 0.1;
  double dt_max = 0.1;
  double t_end = 1.0;
  std::uint64_t seed = 0;
  double burn_in = 0.0;
  long thin_stride = 1;
  long record_stride = 1;
  bool noise = true;

  void validate() const;
};

namespace detail {

/// Per-particle data misfit gradient scaled by data_scale plus prior gradient.
template <typename Scalar>
Matrix<Scalar> scaled_gradients(const Ensemble<Scalar>& ens, const InverseProblem<Scalar>& problem, Scalar data_scale) {
  Matrix<Scalar> g = grad_all(ens, problem);
  if (data_scale != Scalar(1)) {
    const Matrix<Scalar> prior = problem.prior_llt().solve(ens.particles().colwise() - problem.prior_mean());
    g = data_scale * (g - prior) + prior;
  }
  return g;
}

}  // namespace detail

/// Drift of each particle, column-wise. `data_scale` multiplies the data
/// misfit contribution (1 for the posterior, n/N for tempered mutations).
/// For localised kinds `weights` may carry precomputed localisation weights.
template <typename Scalar>
Matrix<Scalar> sde_drift(const SamplerVariant<Scalar>& variant, const Ensemble<Scalar>& ens,
                         const InverseProblem<Scalar>& problem, Scalar data_scale = Scalar(1),
                         const Matrix<Scalar>* weights = nullptr) {
  variant.validate();
  const Eigen::Index m = ens.size();
  Matrix<Scalar> v(ens.dim(), m);
  Matrix<Scalar> local_w;
  if (variant.localised()) local_w = weights ? *weights : localisation_weights(ens, *variant.localisation);

  switch (variant.kind) {
    case SamplerKind::plain_brownian:
      return -(*variant.preconditioner) * detail::scaled_gradients(ens, problem, data_scale);
    case SamplerKind::interacting:
      return -covariance(ens) * detail::scaled_gradients(ens, problem, data_scale);
    case SamplerKind::corrected: {
      v = -covariance(ens) * detail::scaled_gradients(ens, problem, data_scale);
      for (Eigen::Index i = 0; i < m; ++i) v.col(i) += divergence_correction_global(ens, i);
      return v;
    }
    case SamplerKind::localised_corrected: {
      const Matrix<Scalar> g = detail::scaled_gradients(ens, problem, data_scale);
      parallel_for(m, [&](Eigen::Index i) {
        v.col(i) = -localised_covariance(ens, local_w, i) * g.col(i) +
                   divergence_correction_localised(ens, local_w, *variant.localisation, i);
      });
      return v;
    }
    case SamplerKind::gradient_free_corrected:
    case SamplerKind::localised_gradient_free_corrected: break;
  }

  const Matrix<Scalar> h = forward_all(ens, problem);
  const Matrix<Scalar> data_pull = problem.noise_llt().solve(h.colwise() - problem.observation());
  const Matrix<Scalar> prior_pull = problem.prior_llt().solve(ens.particles().colwise() - problem.prior_mean());
  if (variant.kind == SamplerKind::gradient_free_corrected) {
    v = -data_scale * cross_covariance(ens, h) * data_pull - covariance(ens) * prior_pull;
    for (Eigen::Index i = 0; i < m; ++i) v.col(i) += divergence_correction_global(ens, i);
    return v;
  }
  parallel_for(m, [&](Eigen::Index i) {
    v.col(i) = -data_scale * localised_cross_covariance(ens, h, local_w, i) * data_pull.col(i) -
               localised_covariance(ens, local_w, i) * prior_pull.col(i) +
               divergence_correction_localised(ens, local_w, *variant.localisation, i);
  });
  return v;
}

/// sqrt(2) Q xi_i with Q the symmetric square root of C, P^{xx} or P^{xx}(X_i).
template <typename Scalar>
Matrix<Scalar> sde_diffusion_apply(const SamplerVariant<Scalar>& variant, const Ensemble<Scalar>& ens,
                                   const Matrix<Scalar>& draws, const Matrix<Scalar>* weights = nullptr) {
  variant.validate();
  detail::require(draws.rows() == ens.dim() && draws.cols() == ens.size(),
                  "sde_diffusion_apply: draws must be N_x x M");
  using std::sqrt;
  const Scalar root2 = sqrt(Scalar(2));
  if (variant.kind == SamplerKind::plain_brownian) return root2 * psd_sqrt(*variant.preconditioner) * draws;
  if (!variant.localised()) return root2 * psd_sqrt(covariance(ens)) * draws;
  const Matrix<Scalar> w = weights ? *weights : localisation_weights(ens, *variant.localisation);
  Matrix<Scalar> out(ens.dim(), ens.size());
  parallel_for(ens.size(), [&](Eigen::Index i) {
    out.col(i) = root2 * psd_sqrt(localised_covariance(ens, w, i)) * draws.col(i);
  });
  return out;
}

/// safety / max(max_i |drift_i|, 1e-12), capped at dt_max.
template <typename Scalar>
Scalar adaptive_dt(const SamplerVariant<Scalar>& variant, const Ensemble<Scalar>& ens,
                   const InverseProblem<Scalar>& problem, Scalar safety, Scalar dt_max = Scalar(0.1),
                   Scalar data_scale = Scalar(1)) {
  detail::require(safety > Scalar(0), "adaptive_dt: safety must be positive");
  const Scalar beta = sde_drift(variant, ens, problem, data_scale).colwise().norm().maxCoeff();
  return std::min(dt_max, safety / std::max(beta, Scalar(1e-12)));
}

/// Standard normal N_x x M draws for one step from per-particle substreams.
MatrixXd step_draws(std::uint64_t seed, std::uint64_t step, Eigen::Index nx, Eigen::Index m);

/// One Euler-Maruyama step; localisation weights are computed once and shared
/// by drift and diffusion. Pass dt <= 0 to use the adaptive rule from cfg.
/// Returns the new particle matrix and the step actually taken.
std::pair<MatrixXd, double> langevin_step(const SamplerVariant<double>& variant, const Ensemble<double>& ens,
                                          const InverseProblem<double>& problem, double dt, std::uint64_t seed,
                                          std::uint64_t step, bool noise = true, double data_scale = 1.0,
                                          double safety = 0.1, double dt_max = 0.1);

struct LangevinRecord {
  std::vector<MatrixXd> collected;  // ensembles collected after burn_in every thin_stride steps
  std::vector<double> collected_times;
  std::vector<DiagnosticRow> diagnostics;  // potential column holds sum_i Phi_R(X_i)
  std::vector<VectorXd> means;
  Ensemble<double> final_ensemble;
  double t_final = 0;
  long steps = 0;
  bool collapse_warning = false;

  /// All collected particles as one N_x x (M * n_collected) matrix.
  MatrixXd samples() const;
};

LangevinRecord run_langevin(const SamplerVariant<double>& variant, const Ensemble<double>& ens0,
                            const InverseProblem<double>& problem, const StepConfig& cfg);

}  // namespace fpps
