#include "semavg/estimators.hpp"

#include "semavg/model_averaging.hpp"
#include "semavg/saturated.hpp"

namespace semavg {

EstimatorKind parse_estimator(const std::string& token) {
  if (token == "saturated") return EstimatorKind::Saturated;
  if (token == "sem") return EstimatorKind::Sem;
  if (token == "bic" || token == "bic-ma") return EstimatorKind::BicMa;
  if (token == "sl" || token == "sl-ma") return EstimatorKind::SlMa;
  throw ValidationError("unknown estimator '" + token +
                        "' (expected saturated, sem, bic, or sl)");
}

std::string estimator_label(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::Saturated: return "Saturated";
    case EstimatorKind::Sem: return "SEM";
    case EstimatorKind::BicMa: return "BIC-MA";
    case EstimatorKind::SlMa: return "SL-MA";
  }
  return "?";
}

double tau_saturated(const TrialDataset& ds) {
  double sum[2] = {0.0, 0.0};
  for (int i = 0; i < ds.n(); ++i) sum[ds.arm(i)] += ds.y(i, 0);
  return sum[1] / ds.n_arm(1) - sum[0] / ds.n_arm(0);
}

double tau_sem_from_fit(const SemFit& fit) {
  switch (fit.categorical ? (fit.K == 2 ? EndpointKind::Binary : EndpointKind::Ordinal)
                          : EndpointKind::Continuous) {
    case EndpointKind::Continuous: return sem_ate_continuous(fit.params);
    case EndpointKind::Binary: return sem_ate_binary(fit.params);
    case EndpointKind::Ordinal:
      throw ValidationError("the ATE is not defined for an ordinal primary");
  }
  return 0.0;
}

double point_estimate(const TrialDataset& ds, EstimatorKind kind,
                      const EstimatorConfig& cfg, uint64_t seed) {
  if (kind == EstimatorKind::Saturated) return tau_saturated(ds);

  SemOptions sem_opts = cfg.sem;
  sem_opts.compute_param_cov = false;
  SemFit fit = fit_sem(ds, sem_opts);
  if (fit.status == SemStatus::Failed) throw FitError("SEM fit failed");
  const double t_sem = tau_sem_from_fit(fit);
  if (kind == EstimatorKind::Sem) return t_sem;

  const double t_sat = tau_saturated(ds);
  if (kind == EstimatorKind::BicMa) {
    const double omega = omega_bic(bic_sem(fit, ds.n()), saturated_bic(ds));
    return combine(omega, t_sem, t_sat).tau_ma;
  }
  // Super learner: fold refits warm-start from the full-data solution.
  SemOptions fold_opts = sem_opts;
  fold_opts.warm_start = fit.params;
  const SuperLearnerResult sl =
      omega_super_learner(ds, cfg.folds, cfg.grid_step, seed, fold_opts);
  return combine(sl.omega, t_sem, t_sat).tau_ma;
}

}  // namespace semavg
