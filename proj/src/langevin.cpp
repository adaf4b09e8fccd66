#include "fpps/langevin.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fpps/posterior.hpp"
#include "fpps/rng.hpp"

namespace fpps {

void StepConfig::validate() const {
  if (dt && !(*dt > 0)) throw ConfigurationError("StepConfig: dt must be positive");
  if (!dt && !(safety > 0)) throw ConfigurationError("StepConfig: safety must be positive");
  if (!(dt_max > 0)) throw ConfigurationError("StepConfig: dt_max must be positive");
  if (!(burn_in >= 0)) throw ConfigurationError("StepConfig: burn_in must be >= 0");
  if (!(t_end > burn_in)) throw ConfigurationError("StepConfig: t_end must exceed burn_in");
  if (thin_stride < 1) throw ConfigurationError("StepConfig: thin_stride must be >= 1");
  if (record_stride < 1) throw ConfigurationError("StepConfig: record_stride must be >= 1");
}

MatrixXd step_draws(std::uint64_t seed, std::uint64_t step, Eigen::Index nx, Eigen::Index m) {
  MatrixXd xi(nx, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    SplitMix64 gen = substream(seed, step, static_cast<std::uint64_t>(i));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index d = 0; d < nx; ++d) xi(d, i) = normal(gen);
  }
  return xi;
}

std::pair<MatrixXd, double> langevin_step(const SamplerVariant<double>& variant, const Ensemble<double>& ens,
                                          const InverseProblem<double>& problem, double dt, std::uint64_t seed,
                                          std::uint64_t step, bool noise, double data_scale, double safety,
                                          double dt_max) {
  MatrixXd weights;
  const MatrixXd* w = nullptr;
  if (variant.localised()) {
    weights = localisation_weights(ens, *variant.localisation);
    w = &weights;
  }
  const MatrixXd drift = sde_drift(variant, ens, problem, data_scale, w);
  if (!(dt > 0)) dt = std::min(dt_max, safety / std::max(drift.colwise().norm().maxCoeff(), 1e-12));
  MatrixXd next = ens.particles() + dt * drift;
  if (noise) {
    const MatrixXd xi = std::sqrt(dt) * step_draws(seed, step, ens.dim(), ens.size());
    next += sde_diffusion_apply(variant, ens, xi, w);
  }
  return {std::move(next), dt};
}

MatrixXd LangevinRecord::samples() const {
  if (collected.empty()) return MatrixXd(final_ensemble.dim(), 0);
  const Eigen::Index m = collected.front().cols();
  MatrixXd all(collected.front().rows(), m * static_cast<Eigen::Index>(collected.size()));
  for (std::size_t c = 0; c < collected.size(); ++c) all.middleCols(static_cast<Eigen::Index>(c) * m, m) = collected[c];
  return all;
}

namespace {

double misfit_sum(const Ensemble<double>& ens, const InverseProblem<double>& problem) {
  double v = 0;
  for (Eigen::Index i = 0; i < ens.size(); ++i) v += regularized_misfit(VectorXd(ens.particle(i)), problem);
  return v;
}

}  // namespace

LangevinRecord run_langevin(const SamplerVariant<double>& variant, const Ensemble<double>& ens0,
                            const InverseProblem<double>& problem, const StepConfig& cfg) {
  variant.validate();
  cfg.validate();
  LangevinRecord rec;
  Ensemble<double> ens = ens0;
  double t = 0;
  const auto record = [&] {
    const EnsembleDiagnostics<double> d = diagnostics(ens);
    rec.diagnostics.push_back({t, misfit_sum(ens, problem), d.spread, d.cov_trace, std::nullopt});
    rec.means.push_back(d.mean);
  };
  record();
  const double initial_spread = rec.diagnostics.front().spread;
  const double t_tol = 1e-12 * std::max(1.0, cfg.t_end);
  long since_collect = 0;

  while (t < cfg.t_end - t_tol) {
    double dt = cfg.dt.value_or(0.0);
    const auto step = static_cast<std::uint64_t>(rec.steps);
    auto [next, taken] = langevin_step(variant, ens, problem, dt, cfg.seed, step, cfg.noise, 1.0, cfg.safety,
                                       cfg.dt_max);
    if (t + taken > cfg.t_end + t_tol) {
      // Shorten the last step to land on t_end, reusing the same noise substream.
      taken = cfg.t_end - t;
      next = langevin_step(variant, ens, problem, taken, cfg.seed, step, cfg.noise).first;
    }
    if (!next.allFinite()) throw IntegrationFailure("run_langevin: non-finite particle state", t);
    ens = Ensemble<double>(std::move(next));
    t = std::abs(t + taken - cfg.t_end) <= t_tol ? cfg.t_end : t + taken;
    ++rec.steps;

    if (rec.steps % cfg.record_stride == 0 || t >= cfg.t_end) record();
    if (!variant.corrected() && !rec.collapse_warning && rec.diagnostics.back().spread < 0.1 * initial_spread)
      rec.collapse_warning = true;
    if (t >= cfg.burn_in - t_tol) {
      if (++since_collect >= cfg.thin_stride) {
        rec.collected.push_back(ens.particles());
        rec.collected_times.push_back(t);
        since_collect = 0;
      }
    }
  }
  rec.final_ensemble = ens;
  rec.t_final = t;
  return rec;
}

}  // namespace fpps
