#pragma once

#include "semavg/rng.hpp"
#include "semavg/sem.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

/// BIC weight on the SEM: [exp{(bic_sem - bic_sat)/2} + 1]^{-1}, evaluated as
/// a logistic so extreme differences saturate to 0/1 without overflow.
double omega_bic(double bic_sem, double bic_sat);

/// Arm-stratified V-fold assignment. Every fold gets at least 2 subjects per
/// arm; fold sizes within an arm differ by at most one.
struct FoldAssignment {
  int V = 0;
  std::vector<int> fold_of;  // per subject

  static FoldAssignment stratified(const TrialDataset& ds, int V, RngStream rng);
};

struct SuperLearnerResult {
  double omega = 0.0;
  int n_degraded_folds = 0;  // folds whose SEM fit failed (saturated used)
  bool degraded() const { return n_degraded_folds > 0; }
};

/// Cross-validated weight on the SEM: out-of-fold predictions of the primary
/// endpoint from both models, then the grid point in {0, grid_step, ..., 1}
/// minimizing the squared prediction error. Ties break toward the smaller
/// weight. Binary primaries are predicted on the probability scale.
SuperLearnerResult omega_super_learner(const TrialDataset& ds, int V,
                                       double grid_step, uint64_t seed,
                                       const SemOptions& sem_opts = {});
SuperLearnerResult omega_super_learner(const TrialDataset& ds,
                                       const FoldAssignment& folds,
                                       double grid_step,
                                       const SemOptions& sem_opts = {});

struct WeightedEstimate {
  double omega = 0.0;
  double tau_sem = 0.0;
  double tau_sat = 0.0;
  double tau_ma = 0.0;  // omega*tau_sem + (1-omega)*tau_sat, exactly
};

WeightedEstimate combine(double omega, double tau_sem, double tau_sat);

}  // namespace semavg
