#include "semavg/saturated.hpp"

#include <cmath>
#include <vector>

#include "exact_sum.hpp"

namespace semavg {

SaturatedFit fit_saturated(const TrialDataset& ds) {
  const ArmMoments m = arm_split(ds);
  const int p = ds.n_endpoints();
  const int n = ds.n();

  SaturatedFit fit;
  fit.alpha = m.mean0;
  fit.beta = m.mean1 - m.mean0;

  // Pooled within-arm MLE covariance, denominator n.
  Eigen::MatrixXd sigma =
      ((m.n0 - 1) * m.cov0 + (m.n1 - 1) * m.cov1) / static_cast<double>(n);

  // Gaussian log likelihood at the MLE: the quadratic form collapses to n*P/2.
  Eigen::MatrixXd l;
  try {
    l = dist::cholesky_lower(sigma);
  } catch (const dist::SingularMatrixError& e) {
    throw dist::SingularMatrixError(
        std::string("fit_saturated: degenerate pooled covariance (") + e.what() + ")",
        e.pivot());
  }
  double logdet = 0.0;
  for (int i = 0; i < p; ++i) logdet += 2.0 * std::log(l(i, i));
  fit.loglik = -0.5 * n * (p * dist::kLog2Pi + logdet + p);
  fit.sigma = dist::CovMatrix::unchecked(std::move(sigma));
  fit.n_params = 2 * p + p * (p + 1) / 2;
  return fit;
}

EstimateResult ate_saturated(const SaturatedFit& fit, const TrialDataset& ds) {
  const ArmMoments m = arm_split(ds);
  EstimateResult r;
  r.method = "Saturated";
  r.estimand = "ATE";
  r.estimate = fit.beta(0);
  r.std_error = std::sqrt(m.cov1(0, 0) / m.n1 + m.cov0(0, 0) / m.n0);
  r.ci_low = r.estimate - kWald95 * r.std_error;
  r.ci_high = r.estimate + kWald95 * r.std_error;
  return r;
}

EstimateResult ate_saturated_binary(const TrialDataset& ds) {
  if (ds.primary().kind != EndpointKind::Binary)
    throw ValidationError("ate_saturated_binary requires a binary primary endpoint");
  double s0 = 0.0, s1 = 0.0;
  for (int i = 0; i < ds.n(); ++i) (ds.arm(i) == 0 ? s0 : s1) += ds.y(i, 0);
  const double n0 = ds.n_arm(0), n1 = ds.n_arm(1);
  const double p0 = s0 / n0, p1 = s1 / n1;

  EstimateResult r;
  r.method = "Saturated";
  r.estimand = "ATE";
  r.estimate = p1 - p0;
  r.std_error = std::sqrt(p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0);
  r.ci_low = r.estimate - kWald95 * r.std_error;
  r.ci_high = r.estimate + kWald95 * r.std_error;
  if (p0 == 0.0 || p0 == 1.0 || p1 == 0.0 || p1 == 1.0)
    r.flags.push_back("degenerate-arm");
  return r;
}

double bic_saturated(const SaturatedFit& fit, double n) {
  return -2.0 * fit.loglik + fit.n_params * std::log(n);
}

BinarySaturatedFit fit_saturated_binary(const TrialDataset& ds) {
  if (ds.primary().kind != EndpointKind::Binary)
    throw ValidationError("fit_saturated_binary requires a binary primary endpoint");
  const int p = ds.n_endpoints();
  const int q = p - 1;
  const int n = ds.n();

  BinarySaturatedFit fit;
  fit.cell_means = Eigen::MatrixXd::Zero(4, q);
  auto cell_of = [](int a, int y) { return 2 * a + y; };

  // Order-independent accumulation, matching the permutation contract of the
  // continuous fit.
  std::vector<detail::ExactSum> mean_acc(static_cast<size_t>(4 * q));
  for (int i = 0; i < ds.n(); ++i) {
    const int c = cell_of(ds.arm(i), static_cast<int>(ds.y(i, 0)));
    fit.cell_counts[static_cast<size_t>(c)]++;
    for (int j = 0; j < q; ++j)
      mean_acc[static_cast<size_t>(c * q + j)].add(ds.y(i, 1 + j));
  }
  int nonempty = 0;
  for (int c = 0; c < 4; ++c) {
    if (fit.cell_counts[static_cast<size_t>(c)] > 0) {
      for (int j = 0; j < q; ++j)
        fit.cell_means(c, j) = mean_acc[static_cast<size_t>(c * q + j)].value() /
                               fit.cell_counts[static_cast<size_t>(c)];
      ++nonempty;
    }
  }
  fit.p1 = static_cast<double>(fit.cell_counts[3]) / ds.n_arm(1);
  fit.p0 = static_cast<double>(fit.cell_counts[1]) / ds.n_arm(0);

  std::vector<detail::ExactSum> m2_acc(static_cast<size_t>(q * q));
  for (int i = 0; i < ds.n(); ++i) {
    const int c = cell_of(ds.arm(i), static_cast<int>(ds.y(i, 0)));
    for (int j = 0; j < q; ++j) {
      const double dj = ds.y(i, 1 + j) - fit.cell_means(c, j);
      for (int k = j; k < q; ++k)
        m2_acc[static_cast<size_t>(j * q + k)].add(dj *
                                                   (ds.y(i, 1 + k) - fit.cell_means(c, k)));
    }
  }
  Eigen::MatrixXd m2(q, q);
  for (int j = 0; j < q; ++j)
    for (int k = j; k < q; ++k)
      m2(j, k) = m2(k, j) = m2_acc[static_cast<size_t>(j * q + k)].value();
  fit.secondary_cov = m2 / n;

  Eigen::MatrixXd l;
  try {
    l = dist::cholesky_lower(fit.secondary_cov);
  } catch (const dist::SingularMatrixError& e) {
    throw dist::SingularMatrixError(
        std::string("fit_saturated_binary: degenerate within-cell covariance (") +
            e.what() + ")",
        e.pivot());
  }
  double logdet = 0.0;
  for (int i = 0; i < q; ++i) logdet += 2.0 * std::log(l(i, i));

  // Bernoulli part at the MLE plus the Gaussian part, whose quadratic form
  // collapses to n*q/2 at the cell means.
  double bern = 0.0;
  auto add_bern = [&](int count, int total) {
    if (count > 0 && count < total) {
      const double pr = static_cast<double>(count) / total;
      bern += count * std::log(pr) + (total - count) * std::log1p(-pr);
    }
    // count == 0 or count == total contributes exactly 0.
  };
  add_bern(fit.cell_counts[1], ds.n_arm(0));
  add_bern(fit.cell_counts[3], ds.n_arm(1));

  fit.loglik = bern - 0.5 * n * (q * dist::kLog2Pi + logdet + q);
  fit.n_params = 2 + nonempty * q + q * (q + 1) / 2;
  return fit;
}

double bic_saturated_binary(const BinarySaturatedFit& fit, double n) {
  return -2.0 * fit.loglik + fit.n_params * std::log(n);
}

double saturated_bic(const TrialDataset& ds) {
  if (ds.primary().kind == EndpointKind::Binary)
    return bic_saturated_binary(fit_saturated_binary(ds), ds.n());
  if (ds.primary().kind == EndpointKind::Ordinal)
    throw ValidationError("saturated BIC is not defined for an ordinal primary");
  return bic_saturated(fit_saturated(ds), ds.n());
}

}  // namespace semavg
