#pragma once

#include "semavg/sem.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

enum class EstimatorKind { Saturated, Sem, BicMa, SlMa };

EstimatorKind parse_estimator(const std::string& token);
std::string estimator_label(EstimatorKind kind);  // Saturated/SEM/BIC-MA/SL-MA

struct EstimatorConfig {
  int folds = 10;
  double grid_step = 0.01;
  SemOptions sem;
};

/// Difference in sample means (proportions when binary) on the primary.
double tau_saturated(const TrialDataset& ds);

/// ATE implied by a fitted SEM, dispatching on the primary endpoint kind.
double tau_sem_from_fit(const SemFit& fit);

/// Point estimate of the primary-endpoint ATE under one estimator. Throws
/// FitError when a required model fit fails; `seed` drives randomized
/// internals (super-learner folds).
double point_estimate(const TrialDataset& ds, EstimatorKind kind,
                      const EstimatorConfig& cfg, uint64_t seed);

}  // namespace semavg
