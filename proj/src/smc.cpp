#include "fpps/smc.hpp"

#include <algorithm>
#include <cmath>

#include "fpps/flow.hpp"
#include "fpps/posterior.hpp"
#include "fpps/rng.hpp"

namespace fpps {

void SmcConfig::validate(Eigen::Index m) const {
  if (n_stages < 1) throw ConfigurationError("SmcConfig: N_stages must be >= 1");
  if (!(stage_duration >= 0)) throw ConfigurationError("SmcConfig: stage_duration must be >= 0");
  if (mutation_steps < 1) throw ConfigurationError("SmcConfig: mutation_steps must be >= 1");
  const double tol = threshold(m);
  if (!(tol >= 1) || tol > static_cast<double>(m))
    throw ConfigurationError("SmcConfig: ess_threshold must lie in [1, M]");
}

WeightedEnsemble::WeightedEnsemble(Ensemble<double> ens, VectorXd w) : ensemble(std::move(ens)), weights(std::move(w)) {
  detail::require(weights.size() == ensemble.size(), "WeightedEnsemble: weight count mismatch");
  detail::require(weights.allFinite() && weights.minCoeff() >= 0, "WeightedEnsemble: weights must be nonnegative");
  detail::require(std::abs(weights.sum() - 1.0) <= 1e-12, "WeightedEnsemble: weights must sum to one");
}

WeightedEnsemble::WeightedEnsemble(Ensemble<double> ens)
    : ensemble(std::move(ens)), weights(VectorXd::Constant(ensemble.size(), 1.0 / static_cast<double>(ensemble.size()))) {}

double tempered_log_increment_from_misfit(double data_misfit, long n, long n_stages) {
  detail::require(n >= 1 && n <= n_stages, "tempered_log_increment: stage index out of range");
  return -data_misfit / static_cast<double>(n_stages);
}

double tempered_log_increment(const VectorXd& x, const InverseProblem<double>& problem, long n, long n_stages) {
  return tempered_log_increment_from_misfit(misfit(x, problem), n, n_stages);
}

std::vector<Eigen::Index> multinomial_indices(const VectorXd& weights, std::mt19937_64& rng) {
  std::discrete_distribution<Eigen::Index> pick(weights.data(), weights.data() + weights.size());
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(weights.size()));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::vector<Eigen::Index> systematic_indices(const VectorXd& weights, std::mt19937_64& rng) {
  const Eigen::Index m = weights.size();
  const double u0 = std::uniform_real_distribution<double>(0.0, 1.0)(rng) / static_cast<double>(m);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
  double cumulative = weights(0);
  Eigen::Index j = 0;
  for (Eigen::Index k = 0; k < m; ++k) {
    const double u = u0 + static_cast<double>(k) / static_cast<double>(m);
    while (u > cumulative && j < m - 1) cumulative += weights(++j);
    idx[static_cast<std::size_t>(k)] = j;
  }
  return idx;
}

namespace {

WeightedEnsemble gather(const WeightedEnsemble& we, const std::vector<Eigen::Index>& idx) {
  MatrixXd x(we.ensemble.dim(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = we.ensemble.particle(idx[k]);
  return WeightedEnsemble(Ensemble<double>(std::move(x)));
}

}  // namespace

WeightedEnsemble resample_multinomial(const WeightedEnsemble& we, std::mt19937_64& rng) {
  return gather(we, multinomial_indices(we.weights, rng));
}

WeightedEnsemble resample_systematic(const WeightedEnsemble& we, std::mt19937_64& rng) {
  return gather(we, systematic_indices(we.weights, rng));
}

SmcResult smc_run(const InverseProblem<double>& problem, const Ensemble<double>& ens0,
                  const SamplerVariant<double>& variant, const SmcConfig& cfg) {
  cfg.validate(ens0.size());
  variant.validate();
  const Eigen::Index m = ens0.size();
  std::mt19937_64 master(derive_seed(cfg.seed, 0x5eed5a3b1eULL));
  const std::uint64_t noise_seed = derive_seed(cfg.seed, 0x3a7a7e1dULL);
  const double dt = cfg.stage_duration / static_cast<double>(cfg.mutation_steps);
  const long n_stages = cfg.n_stages;

  SmcResult out;
  WeightedEnsemble we(ens0);
  double t = 0;
  std::uint64_t step = 0;
  for (long n = 1; n <= n_stages; ++n) {
    VectorXd logw(m);
    parallel_for(m, [&](Eigen::Index i) {
      logw(i) = std::log(we.weights(i)) +
                tempered_log_increment(VectorXd(we.ensemble.particle(i)), problem, n, n_stages);
    });
    VectorXd w = (logw.array() - logw.maxCoeff()).exp();
    w /= w.sum();
    we.weights = w;

    SmcStage stage;
    stage.stage = n;
    stage.ess = ess(we.weights);
    if (stage.ess < cfg.threshold(m)) {
      we = cfg.resampling == ResamplingScheme::systematic ? resample_systematic(we, master)
                                                          : resample_multinomial(we, master);
      stage.resampled = true;
    }
    stage.ess_after_resample = ess(we.weights);

    if (dt > 0) {
      const double scale = static_cast<double>(n) / static_cast<double>(n_stages);
      for (long k = 0; k < cfg.mutation_steps; ++k) {
        MatrixXd next;
        try {
          next = langevin_step(variant, we.ensemble, problem, dt, noise_seed, step++, true, scale).first;
        } catch (const std::exception& e) {
          throw IntegrationFailure("smc_run: mutation failed at stage " + std::to_string(n) + ": " + e.what(), t);
        }
        if (!next.allFinite())
          throw IntegrationFailure("smc_run: non-finite mutation at stage " + std::to_string(n), t);
        we.ensemble = Ensemble<double>(std::move(next));
        t += dt;
      }
    }
    stage.t = t;
    const EnsembleDiagnostics<double> d = diagnostics(we.ensemble);
    stage.spread = d.spread;
    VectorXd phi(m);
    parallel_for(m, [&](Eigen::Index i) { phi(i) = regularized_misfit(VectorXd(we.ensemble.particle(i)), problem); });
    stage.potential = phi.sum();
    stage.cov_trace = d.cov_trace;
    out.stages.push_back(stage);
  }
  out.final = we;
  return out;
}

PcnResult pcn_run(const InverseProblem<double>& problem, const VectorXd& x0, double s, long n_steps,
                  std::uint64_t seed) {
  if (!(s >= 0 && s <= 1)) throw ConfigurationError("pcn_run: step size s must lie in [0, 1]");
  if (n_steps < 1) throw ConfigurationError("pcn_run: n_steps must be >= 1");
  detail::require(x0.size() == problem.state_dim(), "pcn_run: x0 dimension mismatch");
  const MatrixXd l = problem.prior_llt().matrixL();
  const VectorXd& m0 = problem.prior_mean();
  const double shrink = std::sqrt(1.0 - s * s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  PcnResult out;
  out.chain.resize(x0.size(), n_steps);
  VectorXd x = x0;
  double phi = misfit(x, problem);
  long accepted = 0;
  VectorXd xi(x0.size());
  for (long k = 0; k < n_steps; ++k) {
    for (Eigen::Index d = 0; d < xi.size(); ++d) xi(d) = normal(rng);
    const VectorXd proposal = m0 + shrink * (x - m0) + s * (l * xi);
    const double phi_new = misfit(proposal, problem);
    const double log_alpha = phi - phi_new;
    const double u = uniform(rng);
    if (std::isfinite(phi_new) && (log_alpha >= 0 || std::log(u) < log_alpha)) {
      x = proposal;
      phi = phi_new;
      ++accepted;
    }
    out.chain.col(k) = x;
  }
  out.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(n_steps);
  return out;
}

}  // namespace fpps
