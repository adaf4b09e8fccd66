#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "fpps/ensemble.hpp"
#include "fpps/flow.hpp"
#include "fpps/kernels.hpp"

namespace fpps {

struct IntegratorConfig {
  double rel_tol = 1e-3;
  double abs_tol = 1e-6;
  double t_end = 1.0;
  long max_steps = 1'000'000;
  long record_stride = 1;
  /// Upper bound on the step size; defaults to t_end / 10.
  std::optional<double> max_step;
  /// Times the integrator lands on exactly; a snapshot is stored at each.
  std::vector<double> stop_times;
  /// Flow runs only: stop once the potential changes by at most
  /// plateau_rel_tol * max(1, |V|) over the trailing plateau_window.
  std::optional<double> plateau_rel_tol;
  double plateau_window = 10.0;

  void validate() const;
};

/// One row of the diagnostics time series.
struct DiagnosticRow {
  double t = 0;
  double potential = 0;
  double spread = 0;
  double cov_trace = 0;
  std::optional<double> ess;
};

struct Snapshot {
  double t;
  MatrixXd particles;
};

/// Accepted-step observer for the generic stepper; returning false ends the run early.
using StepObserver = std::function<bool(double t, const MatrixXd& y, bool at_stop_time)>;
using StateRhs = std::function<MatrixXd(double t, const MatrixXd& y)>;

struct OdeResult {
  MatrixXd state;
  double t = 0;
  bool complete = false;
  bool stopped_early = false;
  long accepted = 0;
  long rejected = 0;
};

/// Embedded Dormand-Prince 4(5) with PI step-size control (FSAL, local
/// extrapolation). The observer sees the initial state and every accepted step;
/// it is called with at_stop_time = true on the steps that land on cfg.stop_times,
/// after which the first stage is re-evaluated so the observer may change the rhs.
OdeResult dormand_prince(const StateRhs& f, const MatrixXd& y0, const IntegratorConfig& cfg,
                         const StepObserver& observer = {});

/// Bandwidth source for a flow: either a fixed kernel or an adaptive policy
/// re-evaluated from the current ensemble covariance until freeze_time.
class KernelSchedule {
 public:
  explicit KernelSchedule(KernelSpec<double> fixed);
  /// `base` supplies family and anchors; `reference` is the fixed covariance
  /// used by the fixed_prior / amise_fixed modes.
  KernelSchedule(KernelSpec<double> base, BandwidthPolicy policy, MatrixXd reference);

  KernelSpec<double> at(const Ensemble<double>& ens) const;
  bool adaptive() const { return policy_.has_value() && policy_->adaptive(); }
  bool frozen() const { return frozen_.has_value(); }
  std::optional<double> freeze_time() const;
  /// Holds the bandwidth computed from `ens` for all later evaluations.
  void freeze(const Ensemble<double>& ens);

 private:
  KernelSpec<double> base_;
  std::optional<BandwidthPolicy> policy_;
  MatrixXd reference_;
  std::optional<KernelSpec<double>> frozen_;
};

struct FlowTrajectory {
  std::vector<DiagnosticRow> diagnostics;
  std::vector<VectorXd> means;
  std::vector<Snapshot> snapshots;
  Ensemble<double> final_ensemble;
  std::optional<KernelSpec<double>> final_kernel;
  double t_final = 0;
  bool complete = false;
  bool plateau_stop = false;
  long accepted = 0;
  long rejected = 0;
};

/// Integrates dX/dt = rhs(variant, X) from ens0 over [0, cfg.t_end].
/// Diagnostics (potential, spread, covariance trace) are recorded at t = 0,
/// every record_stride accepted steps, at stop times and at the final time.
FlowTrajectory integrate(const FlowVariant<double>& variant, const Ensemble<double>& ens0, KernelSchedule kernel,
                         const InverseProblem<double>& problem, const IntegratorConfig& cfg);

/// Integrates linear_gaussian_rhs; the potential column holds
/// sum_i Phi_R(X_i) - (M/2) ln det P^{xx}.
FlowTrajectory integrate_linear_gaussian(const Ensemble<double>& ens0, const InverseProblem<double>& problem,
                                         const IntegratorConfig& cfg);

}  // namespace fpps
