#include "fpps/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fpps/benchmarks.hpp"
#include "fpps/flow.hpp"
#include "fpps/integrator.hpp"
#include "fpps/langevin.hpp"
#include "fpps/posterior.hpp"
#include "fpps/rng.hpp"
#include "fpps/smc.hpp"

#ifndef FPPS_VERSION
#define FPPS_VERSION "unknown"
#endif

namespace fpps {

std::string version_tag() { return FPPS_VERSION; }

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr std::uint64_t kTruthStream = 0x7472757468ULL;
constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kPosteriorStream = 0x706f7374ULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
constexpr std::uint64_t kPcnStream = 0x70636eULL;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed", "M", "output_dir",
      "problem.name", "problem.n_x", "problem.n_y", "problem.tau", "problem.noise_variance", "problem.level",
      "problem.active_modes", "problem.mean", "problem.cov",
      "method.name",
      "flow.dynamics", "flow.preconditioner", "flow.gradient",
      "kernel.family", "kernel.bandwidth", "kernel.alpha", "kernel.freeze_time", "kernel.reference",
      "localisation.gamma", "localisation.metric",
      "integrator.t_end", "integrator.rel_tol", "integrator.abs_tol", "integrator.max_steps",
      "integrator.record_stride", "integrator.max_step", "integrator.stop_times", "integrator.plateau_rel_tol",
      "integrator.plateau_window",
      "langevin.kind", "langevin.dt", "langevin.safety", "langevin.dt_max", "langevin.t_end", "langevin.burn_in",
      "langevin.thin", "langevin.record_stride", "langevin.noise",
      "smc.kind", "smc.stages", "smc.stage_duration", "smc.ess_threshold", "smc.mutation_steps", "smc.resampling",
      "pcn.s", "pcn.steps", "pcn.burn_in", "pcn.thin", "pcn.record_stride",
      "output.samples_per_particle", "output.kde_grid", "output.grid_points"};
  return keys;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<double> to_vector(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

void write_particles(const fs::path& path, const MatrixXd& x, const VectorXd* weights = nullptr) {
  std::ofstream out(path, std::ios::binary);
  for (Eigen::Index d = 0; d < x.rows(); ++d) out << (d ? "," : "") << "x_" << d + 1;
  if (weights) out << ",weight";
  out << '\n';
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    for (Eigen::Index d = 0; d < x.rows(); ++d) out << (d ? "," : "") << fmt(x(d, i));
    if (weights) out << ',' << fmt((*weights)(i));
    out << '\n';
  }
}

void write_diagnostics(const fs::path& path, const std::vector<DiagnosticRow>& rows, bool with_ess) {
  std::ofstream out(path, std::ios::binary);
  out << "t,potential,spread,cov_trace" << (with_ess ? ",ess" : "") << '\n';
  for (const auto& r : rows) {
    out << fmt(r.t) << ',' << fmt(r.potential) << ',' << fmt(r.spread) << ',' << fmt(r.cov_trace);
    if (with_ess) out << ',' << fmt(r.ess.value_or(0.0));
    out << '\n';
  }
}

MatrixXd matrix_from_list(const std::vector<double>& v, Eigen::Index n, const std::string& key) {
  if (static_cast<Eigen::Index>(v.size()) != n * n)
    throw ValidationError(key, "expected " + std::to_string(n * n) + " entries (row-major " + std::to_string(n) +
                                   "x" + std::to_string(n) + " matrix)");
  MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = v[static_cast<std::size_t>(r * n + c)];
  return m;
}

template <typename T>
void check(bool ok, const std::string& key, const T& message) {
  if (!ok) throw ValidationError(key, message);
}

struct Plan {
  std::string problem_name;
  std::string method;
  std::uint64_t seed = 0;
  Eigen::Index m = 0;
  std::optional<Benchmark> bench;
  Ensemble<double> initial;

  // fp_flow
  bool linear_gaussian_dynamics = false;
  FlowVariant<double> flow;
  std::optional<KernelSchedule> schedule;
  IntegratorConfig integrator;

  // langevin / smc
  SamplerVariant<double> sampler;
  StepConfig step;
  SmcConfig smc;

  // pcn
  double pcn_s = 0.07;
  long pcn_steps = 10000;
  long pcn_burn_in = 0;
  long pcn_thin = 1;
  long pcn_record_stride = 1;

  long samples_per_particle = 1;
  bool kde_grid = true;
  long grid_points = 101;
  fs::path output_dir;
};

Benchmark build_problem(ConfigMap& cfg, const std::string& name, std::uint64_t seed) {
  if (name == "linear_gaussian") {
    const long n = cfg.get_long("problem.n_x", 2);
    check(n >= 1, "problem.n_x", "must be >= 1");
    VectorXd mean = VectorXd::Zero(n);
    if (auto v = cfg.get_doubles("problem.mean")) {
      check(static_cast<long>(v->size()) == n, "problem.mean", "length must equal problem.n_x");
      mean = Eigen::Map<const VectorXd>(v->data(), n);
    }
    MatrixXd cov = MatrixXd::Identity(n, n);
    if (auto v = cfg.get_doubles("problem.cov")) cov = matrix_from_list(*v, n, "problem.cov");
    try {
      return linear_gaussian_problem(mean, cov);
    } catch (const ContractViolation& e) {
      throw ValidationError("problem.cov", e.what());
    }
  }
  if (name == "elliptic2d") return elliptic2d_problem();
  if (name == "bimodal") return bimodal_problem();
  if (name == "kl_linear") {
    const long nx = cfg.get_long("problem.n_x", 4);
    const long ny = cfg.get_long("problem.n_y", 16);
    const double tau = cfg.get_double("problem.tau", 1.0);
    const double noise = cfg.get_double("problem.noise_variance", 10.0);
    check(nx >= 1, "problem.n_x", "must be >= 1");
    check(ny >= 1, "problem.n_y", "must be >= 1");
    check(tau > 0, "problem.tau", "must be positive");
    check(noise > 0, "problem.noise_variance", "must be positive");
    const KlPrior prior(nx, tau);
    std::mt19937_64 rng(derive_seed(seed, kTruthStream));
    std::normal_distribution<double> normal(0.0, 1.0);
    VectorXd truth(nx);
    for (long k = 1; k <= nx; ++k) truth(k - 1) = std::sqrt(prior.eigenvalue(k)) * normal(rng);
    return kl_linear_problem(nx, ny, tau, truth, noise);
  }
  DarcyParams p;
  p.n_x = cfg.get_long("problem.n_x", 32);
  p.n_y = cfg.get_long("problem.n_y", 16);
  p.tau = cfg.get_double("problem.tau", 1.5);
  p.level = static_cast<int>(cfg.get_long("problem.level", 8));
  p.noise_variance = cfg.get_double("problem.noise_variance", 0.01);
  p.active_modes = cfg.get_long("problem.active_modes", 4);
  check(p.n_x >= 1, "problem.n_x", "must be >= 1");
  check(p.n_y >= 1, "problem.n_y", "must be >= 1");
  check(p.tau > 0, "problem.tau", "must be positive");
  check(p.level >= 1 && p.level <= 20, "problem.level", "must lie in [1, 20]");
  check((Eigen::Index{1} << p.level) % p.n_y == 0, "problem.n_y", "must divide 2^problem.level");
  check(p.noise_variance > 0, "problem.noise_variance", "must be positive");
  check(p.active_modes >= 0, "problem.active_modes", "must be >= 0");
  return darcy1d_problem(p, seed);
}

Ensemble<double> draw_prior_ensemble(const InverseProblem<double>& problem, Eigen::Index m, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, kInitStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  const MatrixXd l = problem.prior_llt().matrixL();
  MatrixXd xi(problem.state_dim(), m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index d = 0; d < xi.rows(); ++d) xi(d, i) = normal(rng);
  return Ensemble<double>((l * xi).colwise() + problem.prior_mean());
}

std::optional<LocalisationConfig<double>> localisation_from(ConfigMap& cfg, const InverseProblem<double>& problem,
                                                            const Ensemble<double>& initial) {
  const double gamma = cfg.get_double("localisation.gamma", 1.0);
  check(gamma > 0, "localisation.gamma", "must be positive");
  const std::string metric =
      cfg.get_choice("localisation.metric", "prior", {"prior", "identity", "initial_covariance"});
  MatrixXd d;
  if (metric == "prior")
    d = problem.prior_cov();
  else if (metric == "identity")
    d = MatrixXd::Identity(problem.state_dim(), problem.state_dim());
  else
    d = covariance(initial);
  try {
    return LocalisationConfig<double>(gamma, d);
  } catch (const ContractViolation& e) {
    throw ValidationError("localisation.metric", e.what());
  }
}

SamplerKind sampler_kind(const std::string& s) {
  if (s == "plain_brownian") return SamplerKind::plain_brownian;
  if (s == "interacting") return SamplerKind::interacting;
  if (s == "corrected") return SamplerKind::corrected;
  if (s == "localised_corrected") return SamplerKind::localised_corrected;
  if (s == "gradient_free_corrected") return SamplerKind::gradient_free_corrected;
  return SamplerKind::localised_gradient_free_corrected;
}

const std::vector<std::string> kSamplerKinds = {"plain_brownian",          "interacting",
                                                "corrected",               "localised_corrected",
                                                "gradient_free_corrected", "localised_gradient_free_corrected"};

Plan make_plan(ConfigMap& cfg) {
  Plan plan;
  plan.seed = cfg.get_uint64("seed", 1);
  const long m = cfg.get_long("M", 100);
  check(m >= 1, "M", "must be >= 1");
  plan.m = m;
  plan.output_dir = cfg.get_string("output_dir", "out");
  plan.problem_name = cfg.get_choice("problem.name", "", {"linear_gaussian", "elliptic2d", "bimodal", "kl_linear", "darcy1d"});
  plan.bench = build_problem(cfg, plan.problem_name, plan.seed);
  const InverseProblem<double>& problem = plan.bench->problem;
  const Eigen::Index nx = problem.state_dim();
  plan.initial = draw_prior_ensemble(problem, plan.m, plan.seed);

  plan.method = cfg.get_choice("method.name", "fp_flow", {"fp_flow", "langevin", "smc", "pcn"});
  plan.samples_per_particle = cfg.get_long("output.samples_per_particle", 1);
  check(plan.samples_per_particle >= 1, "output.samples_per_particle", "must be >= 1");
  plan.kde_grid = cfg.get_bool("output.kde_grid", true);
  plan.grid_points = cfg.get_long("output.grid_points", 101);
  check(plan.grid_points >= 2, "output.grid_points", "must be >= 2");

  if (plan.method == "fp_flow") {
    IntegratorConfig& ic = plan.integrator;
    ic.t_end = cfg.get_double("integrator.t_end", 1.0);
    ic.rel_tol = cfg.get_double("integrator.rel_tol", 1e-3);
    ic.abs_tol = cfg.get_double("integrator.abs_tol", 1e-6);
    ic.max_steps = cfg.get_long("integrator.max_steps", 1'000'000);
    ic.record_stride = cfg.get_long("integrator.record_stride", 1);
    ic.max_step = cfg.get_optional_double("integrator.max_step");
    if (auto v = cfg.get_doubles("integrator.stop_times")) ic.stop_times = *v;
    ic.plateau_rel_tol = cfg.get_optional_double("integrator.plateau_rel_tol");
    ic.plateau_window = cfg.get_double("integrator.plateau_window", 10.0);
    check(ic.t_end > 0, "integrator.t_end", "must be positive");
    check(ic.rel_tol > 0, "integrator.rel_tol", "must be positive");
    check(ic.abs_tol > 0, "integrator.abs_tol", "must be positive");
    check(ic.max_steps >= 1, "integrator.max_steps", "must be >= 1");
    check(ic.record_stride >= 1, "integrator.record_stride", "must be >= 1");
    check(!ic.max_step || *ic.max_step > 0, "integrator.max_step", "must be positive");
    check(ic.plateau_window > 0, "integrator.plateau_window", "must be positive");

    const std::string dynamics = cfg.get_choice("flow.dynamics", "kernel", {"kernel", "linear_gaussian"});
    if (dynamics == "linear_gaussian") {
      check(plan.m >= nx + 1, "M", "linear_gaussian dynamics need M >= N_x + 1");
      plan.linear_gaussian_dynamics = true;
      return plan;
    }
    const std::string pre = cfg.get_choice("flow.preconditioner", "global", {"identity", "global", "localised"});
    const std::string grad = cfg.get_choice("flow.gradient", "exact", {"exact", "gradient_free"});
    plan.flow.preconditioner = pre == "identity" ? Preconditioner::identity
                               : pre == "global" ? Preconditioner::global_covariance
                                                 : Preconditioner::localised_covariance;
    plan.flow.gradient = grad == "exact" ? GradientMode::exact : GradientMode::gradient_free;
    if (plan.flow.preconditioner == Preconditioner::localised_covariance)
      plan.flow.localisation = localisation_from(cfg, problem, plan.initial);
    check(!(plan.flow.gradient == GradientMode::gradient_free && plan.flow.preconditioner == Preconditioner::identity),
          "flow.gradient", "gradient_free requires a covariance preconditioner");

    const std::string family = cfg.get_choice("kernel.family", "gaussian", {"gaussian", "data_driven"});
    const std::string mode =
        cfg.get_choice("kernel.bandwidth", "fixed_prior", {"fixed_prior", "adaptive", "amise_fixed", "amise_adaptive"});
    BandwidthPolicy policy;
    policy.mode = mode == "fixed_prior"   ? BandwidthMode::fixed_prior
                  : mode == "adaptive"    ? BandwidthMode::adaptive_covariance
                  : mode == "amise_fixed" ? BandwidthMode::amise_fixed
                                          : BandwidthMode::amise_adaptive;
    policy.alpha = cfg.get_double("kernel.alpha", 1.0);
    policy.freeze_time = cfg.get_optional_double("kernel.freeze_time");
    check(policy.alpha > 0, "kernel.alpha", "must be positive");
    check(!policy.freeze_time || *policy.freeze_time >= 0, "kernel.freeze_time", "must be >= 0");
    const std::string reference = cfg.get_choice("kernel.reference", "prior", {"prior", "posterior"});
    MatrixXd ref = problem.prior_cov();
    if (reference == "posterior") {
      check(plan.bench->posterior_cov.has_value(), "kernel.reference",
            "posterior reference needs a problem with an analytic posterior (linear_gaussian, kl_linear)");
      ref = *plan.bench->posterior_cov;
    }
    std::optional<MatrixXd> anchors;
    if (family == "data_driven") anchors = plan.initial.particles();
    try {
      const MatrixXd b0 = bandwidth<double>(policy, ref, covariance(plan.initial), plan.m, nx);
      KernelSpec<double> base(family == "gaussian" ? KernelFamily::gaussian : KernelFamily::data_driven, b0, anchors);
      plan.schedule = KernelSchedule(base, policy, ref);
    } catch (const DegenerateEnsembleError& e) {
      throw ValidationError("kernel.bandwidth", e.what());
    } catch (const ContractViolation& e) {
      throw ValidationError("kernel.bandwidth", e.what());
    }
    return plan;
  }

  if (plan.method == "langevin" || plan.method == "smc") {
    const std::string section = plan.method;
    const std::string kind = cfg.get_choice(section + ".kind",
                                            plan.method == "smc" ? "gradient_free_corrected" : "corrected", kSamplerKinds);
    plan.sampler.kind = sampler_kind(kind);
    if (plan.sampler.kind == SamplerKind::plain_brownian) plan.sampler.preconditioner = problem.prior_cov();
    if (plan.sampler.localised()) plan.sampler.localisation = localisation_from(cfg, problem, plan.initial);
  }

  if (plan.method == "langevin") {
    StepConfig& sc = plan.step;
    sc.dt = cfg.get_optional_double("langevin.dt");
    sc.safety = cfg.get_double("langevin.safety", 0.1);
    sc.dt_max = cfg.get_double("langevin.dt_max", 0.1);
    sc.t_end = cfg.get_double("langevin.t_end", 1.0);
    sc.burn_in = cfg.get_double("langevin.burn_in", 0.0);
    sc.thin_stride = cfg.get_long("langevin.thin", 10);
    sc.record_stride = cfg.get_long("langevin.record_stride", 1);
    sc.noise = cfg.get_bool("langevin.noise", true);
    sc.seed = derive_seed(plan.seed, kNoiseStream);
    check(!sc.dt || *sc.dt > 0, "langevin.dt", "must be positive");
    check(sc.safety > 0, "langevin.safety", "must be positive");
    check(sc.dt_max > 0, "langevin.dt_max", "must be positive");
    check(sc.burn_in >= 0, "langevin.burn_in", "must be >= 0");
    check(sc.t_end > sc.burn_in, "langevin.t_end", "must exceed langevin.burn_in");
    check(sc.thin_stride >= 1, "langevin.thin", "must be >= 1");
    check(sc.record_stride >= 1, "langevin.record_stride", "must be >= 1");
  } else if (plan.method == "smc") {
    SmcConfig& sc = plan.smc;
    sc.n_stages = cfg.get_long("smc.stages", 250);
    sc.stage_duration = cfg.get_double("smc.stage_duration", 0.002);
    sc.ess_threshold = cfg.get_double("smc.ess_threshold", static_cast<double>(plan.m) / 2.0);
    sc.mutation_steps = cfg.get_long("smc.mutation_steps", 1);
    sc.resampling = cfg.get_choice("smc.resampling", "multinomial", {"multinomial", "systematic"}) == "systematic"
                        ? ResamplingScheme::systematic
                        : ResamplingScheme::multinomial;
    sc.seed = plan.seed;
    check(sc.n_stages >= 1, "smc.stages", "must be >= 1");
    check(sc.stage_duration >= 0, "smc.stage_duration", "must be >= 0");
    check(*sc.ess_threshold >= 1 && *sc.ess_threshold <= static_cast<double>(plan.m), "smc.ess_threshold",
          "must lie in [1, M]");
    check(sc.mutation_steps >= 1, "smc.mutation_steps", "must be >= 1");
  } else if (plan.method == "pcn") {
    plan.pcn_s = cfg.get_double("pcn.s", 0.07);
    plan.pcn_steps = cfg.get_long("pcn.steps", 10000);
    plan.pcn_burn_in = cfg.get_long("pcn.burn_in", 0);
    plan.pcn_thin = cfg.get_long("pcn.thin", 1);
    plan.pcn_record_stride = cfg.get_long("pcn.record_stride", 1);
    check(plan.pcn_s >= 0 && plan.pcn_s <= 1, "pcn.s", "must lie in [0, 1]");
    check(plan.pcn_steps >= 1, "pcn.steps", "must be >= 1");
    check(plan.pcn_burn_in >= 0 && plan.pcn_burn_in < plan.pcn_steps, "pcn.burn_in", "must lie in [0, pcn.steps)");
    check(plan.pcn_thin >= 1, "pcn.thin", "must be >= 1");
    check(plan.pcn_record_stride >= 1, "pcn.record_stride", "must be >= 1");
  }
  return plan;
}

void write_kde_grid(const fs::path& path, const PosteriorEstimate<double>& est, long points) {
  const Eigen::Index nx = est.particles().dim();
  const MatrixXd& x = est.particles().particles();
  const VectorXd pad = 3.0 * est.kernel().bandwidth().diagonal().cwiseSqrt();
  std::vector<VectorXd> axes;
  for (Eigen::Index d = 0; d < nx; ++d)
    axes.push_back(VectorXd::LinSpaced(points, x.row(d).minCoeff() - pad(d), x.row(d).maxCoeff() + pad(d)));
  const GridDensity g = grid_density(est, axes);
  std::ofstream out(path, std::ios::binary);
  for (Eigen::Index d = 0; d < nx; ++d) out << "x_" << d + 1 << ',';
  out << "log_density,density\n";
  for (std::size_t s = 0; s < g.points.size(); ++s) {
    for (Eigen::Index d = 0; d < nx; ++d) out << fmt(g.points[s](d)) << ',';
    out << fmt(g.log_density[s]) << ',' << fmt(g.density[s]) << '\n';
  }
}

double misfit_sum(const Ensemble<double>& ens, const InverseProblem<double>& problem) {
  double v = 0;
  for (Eigen::Index i = 0; i < ens.size(); ++i) v += regularized_misfit(VectorXd(ens.particle(i)), problem);
  return v;
}

/// Runs the plan; fills `summary` with method-specific results as it goes.
void execute(const Plan& plan, ordered_json& summary) {
  const InverseProblem<double>& problem = plan.bench->problem;
  const fs::path& dir = plan.output_dir;

  if (plan.method == "fp_flow") {
    const FlowTrajectory traj = plan.linear_gaussian_dynamics
                                    ? integrate_linear_gaussian(plan.initial, problem, plan.integrator)
                                    : integrate(plan.flow, plan.initial, *plan.schedule, problem, plan.integrator);
    write_diagnostics(dir / "diagnostics.csv", traj.diagnostics, false);
    write_particles(dir / "particles_final.csv", traj.final_ensemble.particles());
    summary["t_final"] = traj.t_final;
    summary["complete"] = traj.complete;
    summary["plateau_stop"] = traj.plateau_stop;
    summary["accepted_steps"] = traj.accepted;
    summary["rejected_steps"] = traj.rejected;
    if (traj.final_kernel && traj.final_kernel->family() == KernelFamily::gaussian) {
      const PosteriorEstimate<double> est(traj.final_ensemble, *traj.final_kernel);
      std::mt19937_64 rng(derive_seed(plan.seed, kPosteriorStream));
      const WeightedSamples<double> ws = sample_posterior(est, plan.samples_per_particle, rng);
      write_particles(dir / "samples.csv", ws.samples, &ws.weights);
      const auto [mu, cov] = weighted_moments(ws.samples, ws.weights);
      summary["sample_mean"] = to_vector(mu);
      summary["sample_cov_trace"] = cov.trace();
      summary["sample_ess"] = ess(ws.weights);
    } else {
      const VectorXd w = VectorXd::Constant(traj.final_ensemble.size(), 1.0 / static_cast<double>(traj.final_ensemble.size()));
      write_particles(dir / "samples.csv", traj.final_ensemble.particles(), &w);
    }
    if (traj.final_kernel && plan.kde_grid && problem.state_dim() <= 2)
      write_kde_grid(dir / "kde_grid.csv", PosteriorEstimate<double>(traj.final_ensemble, *traj.final_kernel),
                     plan.grid_points);
    return;
  }

  if (plan.method == "langevin") {
    const LangevinRecord rec = run_langevin(plan.sampler, plan.initial, problem, plan.step);
    write_diagnostics(dir / "diagnostics.csv", rec.diagnostics, false);
    write_particles(dir / "particles_final.csv", rec.final_ensemble.particles());
    write_particles(dir / "samples.csv", rec.samples());
    summary["t_final"] = rec.t_final;
    summary["steps"] = rec.steps;
    summary["collected_ensembles"] = rec.collected.size();
    summary["collapse_warning"] = rec.collapse_warning;
    return;
  }

  if (plan.method == "smc") {
    const SmcResult res = smc_run(problem, plan.initial, plan.sampler, plan.smc);
    std::vector<DiagnosticRow> rows;
    const EnsembleDiagnostics<double> d0 = diagnostics(plan.initial);
    rows.push_back({0.0, misfit_sum(plan.initial, problem), d0.spread, d0.cov_trace, static_cast<double>(plan.m)});
    for (const SmcStage& s : res.stages) rows.push_back({s.t, s.potential, s.spread, s.cov_trace, s.ess});
    write_diagnostics(dir / "diagnostics.csv", rows, true);
    write_particles(dir / "particles_final.csv", res.final.ensemble.particles(), &res.final.weights);
    write_particles(dir / "samples.csv", res.final.ensemble.particles(), &res.final.weights);
    long resamples = 0;
    for (const SmcStage& s : res.stages) resamples += s.resampled ? 1 : 0;
    const auto [mu, cov] = weighted_moments(res.final.ensemble.particles(), res.final.weights);
    summary["resample_count"] = resamples;
    summary["weighted_mean"] = to_vector(mu);
    summary["weighted_cov_trace"] = cov.trace();
    return;
  }

  // pcn: start at the prior mean, record the running sample covariance trace.
  const PcnResult res = pcn_run(problem, problem.prior_mean(), plan.pcn_s, plan.pcn_steps,
                                derive_seed(plan.seed, kPcnStream));
  std::vector<DiagnosticRow> rows;
  VectorXd run_mean = VectorXd::Zero(problem.state_dim());
  VectorXd run_m2 = VectorXd::Zero(problem.state_dim());
  rows.push_back({0.0, regularized_misfit(problem.prior_mean(), problem), 0.0, 0.0, std::nullopt});
  for (long k = 0; k < plan.pcn_steps; ++k) {
    const VectorXd x = res.chain.col(k);
    const VectorXd delta = x - run_mean;
    run_mean += delta / static_cast<double>(k + 1);
    run_m2 += delta.cwiseProduct(x - run_mean);
    if ((k + 1) % plan.pcn_record_stride == 0 || k + 1 == plan.pcn_steps) {
      const double tr = run_m2.sum() / static_cast<double>(k + 1);
      rows.push_back({static_cast<double>(k + 1), regularized_misfit(x, problem), tr, tr, std::nullopt});
    }
  }
  write_diagnostics(dir / "diagnostics.csv", rows, false);
  const MatrixXd last = res.chain.col(plan.pcn_steps - 1);
  write_particles(dir / "particles_final.csv", last);
  std::vector<Eigen::Index> keep;
  for (long k = plan.pcn_burn_in; k < plan.pcn_steps; k += plan.pcn_thin) keep.push_back(k);
  MatrixXd samples(problem.state_dim(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) samples.col(static_cast<Eigen::Index>(c)) = res.chain.col(keep[c]);
  write_particles(dir / "samples.csv", samples);
  summary["acceptance_rate"] = res.acceptance_rate;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

}  // namespace

int run_experiment(ConfigMap cfg, const std::optional<std::string>& output_dir_override, std::ostream& log) {
  if (output_dir_override) cfg.set("output_dir", *output_dir_override);
  const auto start = std::chrono::steady_clock::now();

  Plan plan;
  try {
    plan = make_plan(cfg);
    for (const std::string& key : cfg.unused())
      if (!known_keys().count(key)) throw ValidationError(key, "unknown configuration key");
  } catch (const ValidationError& e) {
    log << "validation error: " << e.what() << '\n';
    return exit_validation;
  } catch (const ConfigurationError& e) {
    log << "validation error: " << e.what() << '\n';
    return exit_validation;
  } catch (const ContractViolation& e) {
    log << "validation error: " << e.what() << '\n';
    return exit_validation;
  }

  std::error_code ec;
  fs::create_directories(plan.output_dir, ec);
  if (ec) {
    log << "validation error: output_dir: cannot create '" << plan.output_dir.string() << "': " << ec.message() << '\n';
    return exit_validation;
  }
  fs::remove(plan.output_dir / "error.json", ec);

  ordered_json meta;
  meta["version"] = version_tag();
  meta["problem"] = plan.problem_name;
  meta["method"] = plan.method;
  meta["seed"] = plan.seed;
  meta["M"] = plan.m;
  ordered_json config_echo = ordered_json::object();
  for (const auto& [k, v] : cfg.resolved()) config_echo[k] = v;
  meta["config"] = config_echo;
  meta["y"] = to_vector(plan.bench->problem.observation());
  meta["truth"] = plan.bench->truth ? ordered_json(to_vector(*plan.bench->truth)) : ordered_json(nullptr);
  if (plan.bench->noise) meta["noise_realisation"] = to_vector(*plan.bench->noise);
  if (plan.bench->posterior_mean) {
    meta["analytic_posterior_mean"] = to_vector(*plan.bench->posterior_mean);
    meta["analytic_posterior_cov_trace"] = plan.bench->posterior_cov->trace();
  }
  write_particles(plan.output_dir / "particles_initial.csv", plan.initial.particles());

  ordered_json summary = ordered_json::object();
  int code = exit_ok;
  try {
    execute(plan, summary);
    meta["status"] = "ok";
  } catch (const std::exception& e) {
    ordered_json err;
    err["error"] = e.what();
    if (const auto* f = dynamic_cast<const IntegrationFailure*>(&e)) err["last_good_time"] = f->last_good_time();
    if (const auto* f = dynamic_cast<const IsolatedParticleError*>(&e)) err["particle_index"] = f->index();
    write_json(plan.output_dir / "error.json", err);
    meta["status"] = "failed";
    log << "runtime error: " << e.what() << '\n';
    code = exit_runtime;
  }
  meta["summary"] = summary;
  meta["wall_time_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(plan.output_dir / "meta.json", meta);
  return code;
}

}  // namespace fpps
