#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "fpps/ensemble.hpp"
#include "fpps/inverse_problem.hpp"
#include "fpps/langevin.hpp"

namespace fpps {

enum class ResamplingScheme { multinomial, systematic };

struct SmcConfig {
  long n_stages = 250;
  double stage_duration = 0.002;  // t_n; 0 disables the mutation
  std::optional<double> ess_threshold;  // M_tol, defaults to M/2
  long mutation_steps = 1;  // Euler-Maruyama steps per stage
  ResamplingScheme resampling = ResamplingScheme::multinomial;
  std::uint64_t seed = 0;

  void validate(Eigen::Index m) const;
  double threshold(Eigen::Index m) const { return ess_threshold.value_or(static_cast<double>(m) / 2.0); }
};

struct WeightedEnsemble {
  Ensemble<double> ensemble;
  VectorXd weights;

  WeightedEnsemble() = default;
  WeightedEnsemble(Ensemble<double> ens, VectorXd w);
  /// Uniform weights 1/M.
  explicit WeightedEnsemble(Ensemble<double> ens);
};

/// Stage log-weight increment -(1/N) * 1/2 |y - h(x)|_R^2.
double tempered_log_increment(const VectorXd& x, const InverseProblem<double>& problem, long n, long n_stages);

/// Same increment from a precomputed data misfit.
double tempered_log_increment_from_misfit(double data_misfit, long n, long n_stages);

/// M indices drawn with replacement proportional to the weights.
std::vector<Eigen::Index> multinomial_indices(const VectorXd& weights, std::mt19937_64& rng);
std::vector<Eigen::Index> systematic_indices(const VectorXd& weights, std::mt19937_64& rng);

WeightedEnsemble resample_multinomial(const WeightedEnsemble& we, std::mt19937_64& rng);
WeightedEnsemble resample_systematic(const WeightedEnsemble& we, std::mt19937_64& rng);

struct SmcStage {
  long stage = 0;
  double t = 0;
  double ess = 0;  // after the weight update, before resampling
  bool resampled = false;
  double ess_after_resample = 0;  // ESS of the weights entering the mutation
  double potential = 0;  // sum_i Phi_R(X_i) after the mutation
  double spread = 0;  // after the mutation
  double cov_trace = 0;
};

struct SmcResult {
  WeightedEnsemble final;
  std::vector<SmcStage> stages;
};

/// Likelihood-tempered SMC with Langevin mutation; `variant` is normally
/// gradient_free_corrected (any sampler kind is accepted).
SmcResult smc_run(const InverseProblem<double>& problem, const Ensemble<double>& ens0,
                  const SamplerVariant<double>& variant, const SmcConfig& cfg);

struct PcnResult {
  MatrixXd chain;  // column k is the state after step k+1
  double acceptance_rate = 0;
};

/// Random-walk Metropolis with the pCN proposal
/// m0 + sqrt(1 - s^2)(x - m0) + s P0^{1/2} xi, accepted with min(1, exp(Phi(x) - Phi(x_hat))).
PcnResult pcn_run(const InverseProblem<double>& problem, const VectorXd& x0, double s, long n_steps,
                  std::uint64_t seed);

}  // namespace fpps
