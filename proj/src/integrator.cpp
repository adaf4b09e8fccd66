#include "fpps/integrator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fpps/posterior.hpp"

namespace fpps {

void IntegratorConfig::validate() const {
  if (!(rel_tol > 0) || !(abs_tol > 0)) throw ConfigurationError("IntegratorConfig: tolerances must be positive");
  if (!(t_end > 0)) throw ConfigurationError("IntegratorConfig: t_end must be positive");
  if (max_steps < 1) throw ConfigurationError("IntegratorConfig: max_steps must be >= 1");
  if (record_stride < 1) throw ConfigurationError("IntegratorConfig: record_stride must be >= 1");
  if (max_step && !(*max_step > 0)) throw ConfigurationError("IntegratorConfig: max_step must be positive");
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784, a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.2;   // hnew >= 0.2 h
constexpr double kMaxFactor = 10.0;  // hnew <= 10 h
constexpr double kBeta = 0.04;

double scaled_norm(const MatrixXd& err, const MatrixXd& y, const MatrixXd& ynew, const IntegratorConfig& cfg) {
  const Eigen::ArrayXXd scale = cfg.abs_tol + cfg.rel_tol * y.cwiseAbs().array().max(ynew.cwiseAbs().array());
  return std::sqrt((err.array() / scale).square().mean());
}

double initial_step(const StateRhs& f, double t, const MatrixXd& y, const MatrixXd& f0, double hmax,
                    const IntegratorConfig& cfg) {
  const Eigen::ArrayXXd scale = cfg.abs_tol + cfg.rel_tol * y.cwiseAbs().array();
  const double d0 = std::sqrt((y.array() / scale).square().mean());
  const double d1 = std::sqrt((f0.array() / scale).square().mean());
  double h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h = std::min(h, hmax);
  const MatrixXd y1 = y + h * f0;
  const MatrixXd f1 = f(t + h, y1);
  const double d2 = std::sqrt(((f1 - f0).array() / scale).square().mean()) / h;
  const double dd = std::max(d1, d2);
  const double h1 = dd <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / dd, 1.0 / 5.0);
  return std::min({100 * h, h1, hmax});
}

}  // namespace

OdeResult dormand_prince(const StateRhs& f, const MatrixXd& y0, const IntegratorConfig& cfg,
                         const StepObserver& observer) {
  cfg.validate();
  std::vector<double> stops;
  for (double s : cfg.stop_times)
    if (s > 0 && s < cfg.t_end) stops.push_back(s);
  stops.push_back(cfg.t_end);
  std::sort(stops.begin(), stops.end());
  stops.erase(std::unique(stops.begin(), stops.end()), stops.end());
  std::size_t next_stop = 0;

  const double hmax = cfg.max_step.value_or(cfg.t_end / 10.0);
  OdeResult out;
  double t = 0;
  MatrixXd y = y0;
  if (observer && !observer(t, y, false)) {
    out.state = y;
    out.stopped_early = true;
    return out;
  }

  MatrixXd k1 = f(t, y);
  double h = initial_step(f, t, y, k1, hmax, cfg);
  double err_old = 1e-4;
  bool last_rejected = false;

  while (true) {
    if (out.accepted + out.rejected >= cfg.max_steps) {
      out.state = y;
      out.t = t;
      out.complete = false;
      return out;
    }
    const double target = stops[next_stop];
    bool hits_stop = false;
    if (t + 1.01 * h >= target) {
      h = target - t;
      hits_stop = true;
    }
    if (!(h > 16 * std::numeric_limits<double>::epsilon() * std::abs(t)) || !(h > 1e-300))
      throw IntegrationFailure("dormand_prince: step size underflow", t);

    const MatrixXd k2 = f(t + c2 * h, y + h * a21 * k1);
    const MatrixXd k3 = f(t + c3 * h, y + h * (a31 * k1 + a32 * k2));
    const MatrixXd k4 = f(t + c4 * h, y + h * (a41 * k1 + a42 * k2 + a43 * k3));
    const MatrixXd k5 = f(t + c5 * h, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const MatrixXd k6 = f(t + h, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    const MatrixXd ynew = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const MatrixXd k7 = f(t + h, ynew);
    const MatrixXd errv = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    double err = scaled_norm(errv, y, ynew, cfg);
    if (!std::isfinite(err) || !ynew.allFinite() || !k7.allFinite()) err = std::numeric_limits<double>::infinity();

    const double expo = 0.2 - kBeta * 0.75;
    if (err <= 1.0) {
      const double fac11 = std::pow(std::max(err, 1e-300), expo);
      double fac = fac11 / std::pow(err_old, kBeta);
      fac = std::clamp(fac / kSafety, 1.0 / kMaxFactor, 1.0 / kMinFactor);
      double hnew = h / fac;
      if (last_rejected) hnew = std::min(hnew, h);
      err_old = std::max(err, 1e-4);
      t = hits_stop ? target : t + h;
      y = ynew;
      k1 = k7;
      ++out.accepted;
      last_rejected = false;
      const bool final_step = hits_stop && next_stop + 1 == stops.size();
      const bool keep_going = observer ? observer(t, y, hits_stop) : true;
      if (final_step || !keep_going) {
        out.state = y;
        out.t = t;
        out.complete = final_step;
        out.stopped_early = !final_step;
        return out;
      }
      if (hits_stop) {
        ++next_stop;
        k1 = f(t, y);
      }
      h = std::min(hnew, hmax);
    } else {
      ++out.rejected;
      last_rejected = true;
      if (std::isfinite(err)) {
        const double fac11 = std::pow(err, expo);
        h = h / std::min(1.0 / kMinFactor, fac11 / kSafety);
      } else {
        h *= kMinFactor;
      }
    }
  }
}

KernelSchedule::KernelSchedule(KernelSpec<double> fixed) : base_(std::move(fixed)) {}

KernelSchedule::KernelSchedule(KernelSpec<double> base, BandwidthPolicy policy, MatrixXd reference)
    : base_(std::move(base)), policy_(policy), reference_(std::move(reference)) {
  policy.validate();
}

std::optional<double> KernelSchedule::freeze_time() const {
  if (!adaptive()) return std::nullopt;
  return policy_->freeze_time;
}

KernelSpec<double> KernelSchedule::at(const Ensemble<double>& ens) const {
  if (frozen_) return *frozen_;
  if (!policy_) return base_;
  const MatrixXd current = adaptive() ? covariance(ens) : reference_;
  return base_.with_bandwidth(bandwidth<double>(*policy_, reference_, current, ens.size(), ens.dim()));
}

void KernelSchedule::freeze(const Ensemble<double>& ens) { frozen_ = at(ens); }

namespace {

DiagnosticRow make_row(double t, double potential_value, const Ensemble<double>& ens) {
  const EnsembleDiagnostics<double> d = diagnostics(ens);
  return {t, potential_value, d.spread, d.cov_trace, std::nullopt};
}

}  // namespace

FlowTrajectory integrate(const FlowVariant<double>& variant, const Ensemble<double>& ens0, KernelSchedule kernel,
                         const InverseProblem<double>& problem, const IntegratorConfig& cfg) {
  variant.validate();
  cfg.validate();
  IntegratorConfig run_cfg = cfg;
  const std::optional<double> freeze_at = kernel.freeze_time();
  if (freeze_at) {
    if (*freeze_at <= 0)
      kernel.freeze(ens0);
    else
      run_cfg.stop_times.push_back(*freeze_at);
  }

  FlowTrajectory traj;
  long steps_since_record = 0;
  const auto record = [&](double t, const Ensemble<double>& ens) {
    const KernelSpec<double> k = kernel.at(ens);
    traj.diagnostics.push_back(make_row(t, potential(ens, k, problem), ens));
    traj.means.push_back(mean(ens));
  };

  // Non-finite trial states yield a NaN velocity so the stepper rejects the step.
  const StateRhs f = [&](double, const MatrixXd& y) -> MatrixXd {
    if (!y.allFinite()) return MatrixXd::Constant(y.rows(), y.cols(), std::numeric_limits<double>::quiet_NaN());
    const Ensemble<double> ens(y);
    return rhs(variant, ens, kernel.at(ens), problem);
  };

  const auto is_user_stop = [&](double t) {
    return std::find(cfg.stop_times.begin(), cfg.stop_times.end(), t) != cfg.stop_times.end();
  };

  const StepObserver observer = [&](double t, const MatrixXd& y, bool at_stop) {
    const Ensemble<double> ens(y);
    if (t == 0) {
      record(t, ens);
      return true;
    }
    ++steps_since_record;
    if (at_stop && freeze_at && t == *freeze_at && !kernel.frozen()) kernel.freeze(ens);
    if (at_stop && is_user_stop(t)) traj.snapshots.push_back({t, y});
    if (steps_since_record >= cfg.record_stride || (at_stop && t == cfg.t_end) || (at_stop && is_user_stop(t))) {
      record(t, ens);
      steps_since_record = 0;
      if (cfg.plateau_rel_tol && t >= cfg.plateau_window) {
        // Compare against the last record at or before t - window.
        const double v_now = traj.diagnostics.back().potential;
        for (auto it = traj.diagnostics.rbegin(); it != traj.diagnostics.rend(); ++it) {
          if (it->t <= t - cfg.plateau_window) {
            if (std::abs(v_now - it->potential) <= *cfg.plateau_rel_tol * std::max(1.0, std::abs(v_now))) {
              traj.plateau_stop = true;
              return false;
            }
            break;
          }
        }
      }
    }
    return true;
  };

  OdeResult res;
  try {
    res = dormand_prince(f, ens0.particles(), run_cfg, observer);
  } catch (const ContractViolation&) {
    // Ensemble construction rejects non-finite stage states; report as a failed integration.
    const double last = traj.diagnostics.empty() ? 0.0 : traj.diagnostics.back().t;
    throw IntegrationFailure("integrate: non-finite ensemble state", last);
  }
  traj.final_ensemble = Ensemble<double>(res.state);
  if (traj.diagnostics.back().t != res.t) record(res.t, traj.final_ensemble);
  traj.final_kernel = kernel.at(traj.final_ensemble);
  traj.t_final = res.t;
  traj.complete = res.complete || traj.plateau_stop;
  traj.accepted = res.accepted;
  traj.rejected = res.rejected;
  return traj;
}

FlowTrajectory integrate_linear_gaussian(const Ensemble<double>& ens0, const InverseProblem<double>& problem,
                                         const IntegratorConfig& cfg) {
  FlowTrajectory traj;
  long steps_since_record = 0;
  const auto record = [&](double t, const Ensemble<double>& ens) {
    double v = -0.5 * static_cast<double>(ens.size()) * std::log(covariance(ens).determinant());
    for (Eigen::Index i = 0; i < ens.size(); ++i) v += regularized_misfit(VectorXd(ens.particle(i)), problem);
    traj.diagnostics.push_back(make_row(t, v, ens));
    traj.means.push_back(mean(ens));
  };
  const StateRhs f = [&](double, const MatrixXd& y) -> MatrixXd {
    if (!y.allFinite()) return MatrixXd::Constant(y.rows(), y.cols(), std::numeric_limits<double>::quiet_NaN());
    return linear_gaussian_rhs(Ensemble<double>(y), problem);
  };
  const StepObserver observer = [&](double t, const MatrixXd& y, bool at_stop) {
    const Ensemble<double> ens(y);
    if (t == 0) {
      record(t, ens);
      return true;
    }
    if (at_stop && t != cfg.t_end) traj.snapshots.push_back({t, y});
    if (++steps_since_record >= cfg.record_stride || at_stop) {
      record(t, ens);
      steps_since_record = 0;
    }
    return true;
  };
  const OdeResult res = dormand_prince(f, ens0.particles(), cfg, observer);
  traj.final_ensemble = Ensemble<double>(res.state);
  traj.t_final = res.t;
  traj.complete = res.complete;
  traj.accepted = res.accepted;
  traj.rejected = res.rejected;
  return traj;
}

}  // namespace fpps
