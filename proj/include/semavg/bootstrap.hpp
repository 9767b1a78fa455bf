#pragma once

#include <functional>

#include "semavg/rng.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

struct BootstrapResult {
  std::vector<double> estimates;  // successful replicates, replicate order
  double point = 0.0;             // full-data estimate
  double se = 0.0;                // sample SD of successful replicates
  double ci_low = 0.0, ci_high = 0.0;  // percentile bounds (type-7 quantiles)
  double alpha = 0.05;
  int n_failed = 0;
  bool unreliable = false;  // n_failed/B exceeded 5%

  /// Wald statistic: point estimate over bootstrap standard error.
  double wald() const { return point / se; }
};

/// Estimator applied to a (re)sampled dataset; `seed` feeds any randomized
/// internals (e.g. cross-validation folds) so runs are reproducible. A thrown
/// exception marks the replicate as failed.
using Estimator = std::function<double(const TrialDataset& ds, uint64_t seed)>;

/// Nonparametric bootstrap with whole-subject resampling stratified by arm,
/// so every replicate preserves the arm sizes. Replicates are deterministic
/// functions of (seed, replicate index) regardless of thread count. A failed
/// full-data estimate is a hard error; failed replicates are dropped and
/// counted.
BootstrapResult bootstrap(const TrialDataset& ds, const Estimator& estimator,
                          int B, double alpha, uint64_t seed, int n_threads = 1);

/// Indices of one arm-stratified resample of the dataset.
std::vector<int> stratified_resample(const TrialDataset& ds, RngStream rng);

/// n scaled by the precision of a candidate estimator relative to the
/// saturated one.
double effective_sample_size(double var_candidate, double var_saturated, int n);

/// Type-7 (linear interpolation) empirical quantile of sorted values.
double quantile_type7(const std::vector<double>& sorted, double q);

}  // namespace semavg
