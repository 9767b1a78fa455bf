// Internal sufficient-statistics interfaces shared by the model-averaging and
// simulation hot loops. The all-continuous likelihood depends on the data
// only through per-arm means and the pooled scatter, so refits on resamples
// and training folds never need to materialize a dataset.
#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "semavg/sem.hpp"

namespace semavg::detail {

struct GaussianBlockStats {
  int n0 = 0, n1 = 0;
  Eigen::VectorXd mean0, mean1;
  Eigen::MatrixXd m2pool;  // combined within-arm scatter (not normalized)

  int n() const { return n0 + n1; }
  int dim() const { return static_cast<int>(mean0.size()); }
};

/// Continuous one-factor fit from sufficient statistics.
SemFit fit_sem_stats(const GaussianBlockStats& stats, const SemOptions& opts);

/// Saturated Gaussian log likelihood at the MLE implied by the statistics.
double saturated_loglik_stats(const GaussianBlockStats& stats);

inline double saturated_bic_stats(const GaussianBlockStats& stats) {
  const int p = stats.dim();
  const double k = 2.0 * p + 0.5 * p * (p + 1);
  return -2.0 * saturated_loglik_stats(stats) +
         k * std::log(static_cast<double>(stats.n()));
}

}  // namespace semavg::detail
