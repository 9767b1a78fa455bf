#pragma once

#include <array>

#include "semavg/dist.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

/// MLE of the saturated joint Gaussian model: arm-specific mean vectors and a
/// common covariance. The treatment-effect component reduces to the
/// difference in sample means.
struct SaturatedFit {
  Eigen::VectorXd alpha;  // arm-0 means
  Eigen::VectorXd beta;   // arm-1 minus arm-0 means
  dist::CovMatrix sigma;  // pooled within-arm MLE covariance (denominator n)
  double loglik = 0.0;
  int n_params = 0;  // 2P + P(P+1)/2
};

SaturatedFit fit_saturated(const TrialDataset& ds);

/// Difference in means on the primary endpoint with the two-sample standard
/// error from unbiased within-arm variances; 95% Wald interval.
EstimateResult ate_saturated(const SaturatedFit& fit, const TrialDataset& ds);

/// Difference in sample proportions for a binary primary endpoint.
EstimateResult ate_saturated_binary(const TrialDataset& ds);

double bic_saturated(const SaturatedFit& fit, double n);

/// Exact saturated likelihood when the primary is binary: Bernoulli rates per
/// arm joined to the secondaries through per-(arm, outcome) Gaussian means
/// with a common covariance. Used so BIC weighting compares full-data
/// likelihoods of the same data under both candidate models.
struct BinarySaturatedFit {
  double p0 = 0.0, p1 = 0.0;            // primary success rates per arm
  Eigen::MatrixXd cell_means;           // 4 x (P-1), rows (a=0,y=0),(0,1),(1,0),(1,1)
  Eigen::MatrixXd secondary_cov;        // pooled within-cell MLE covariance
  std::array<int, 4> cell_counts{};
  double loglik = 0.0;
  int n_params = 0;
};

BinarySaturatedFit fit_saturated_binary(const TrialDataset& ds);
double bic_saturated_binary(const BinarySaturatedFit& fit, double n);

/// BIC of the saturated model for the dataset, dispatching on the primary
/// endpoint kind.
double saturated_bic(const TrialDataset& ds);

}  // namespace semavg
