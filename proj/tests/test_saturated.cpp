#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "semavg/dist.hpp"
#include "semavg/saturated.hpp"
#include "semavg/sim.hpp"

using namespace semavg;

namespace {

// Reorders subjects with a fixed permutation.
TrialDataset permuted(const TrialDataset& ds, RngStream rng) {
  std::vector<int> order(static_cast<size_t>(ds.n()));
  for (int i = 0; i < ds.n(); ++i) order[static_cast<size_t>(i)] = i;
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_below(i))]);
  return ds.subset(order);
}

TrialDataset arms_flipped(const TrialDataset& ds) {
  std::vector<int> arm = ds.arms();
  for (auto& a : arm) a = 1 - a;
  return TrialDataset::unchecked(std::move(arm), ds.endpoints(), ds.specs());
}

}  // namespace

TEST_SUITE_BEGIN("saturated");

TEST_CASE("constant shift across arms is recovered exactly") {
  RngStream rng = RngStream::from_seed(52);
  std::vector<int> arm = {0, 0, 0, 0, 1, 1, 1, 1};
  Eigen::MatrixXd y(8, 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) y(i, j) = rng.normal();
  for (int i = 0; i < 4; ++i)
    y.row(4 + i) = y.row(i).array() + 1.0;
  const TrialDataset ds(arm, y,
                        {EndpointSpec::continuous("y1"), EndpointSpec::continuous("y2"),
                         EndpointSpec::continuous("y3")});
  const SaturatedFit fit = fit_saturated(ds);
  for (int j = 0; j < 3; ++j)
    CHECK(fit.beta(j) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.n_params == 12);  // 2*3 + 3*4/2
}

TEST_CASE("saturated MLE equals the closed-form difference in means") {
  RngStream rng = RngStream::from_seed(53);
  for (int t = 0; t < 100; ++t) {
    const TrialDataset ds = oracles::random_dataset(20 + 2 * t, 3, rng);
    const SaturatedFit fit = fit_saturated(ds);
    double s1 = 0.0, s0 = 0.0;
    int n1 = 0, n0 = 0;
    for (int i = 0; i < ds.n(); ++i) {
      if (ds.arm(i) == 1) {
        s1 += ds.y(i, 0);
        ++n1;
      } else {
        s0 += ds.y(i, 0);
        ++n0;
      }
    }
    CHECK(std::abs(fit.beta(0) - (s1 / n1 - s0 / n0)) <= 1e-12);
  }
}

TEST_CASE("loglik matches per-subject mvn_logpdf re-evaluation") {
  RngStream rng = RngStream::from_seed(59);
  const TrialDataset ds = oracles::random_dataset(50, 3, rng);
  const SaturatedFit fit = fit_saturated(ds);
  double ll = 0.0;
  for (int i = 0; i < ds.n(); ++i) {
    const Eigen::VectorXd mean = fit.alpha + fit.beta * static_cast<double>(ds.arm(i));
    ll += dist::mvn_logpdf(ds.endpoints().row(i).transpose(), mean, fit.sigma);
  }
  CHECK(fit.loglik == doctest::Approx(ll).epsilon(1e-8));
}

TEST_CASE("subject permutation leaves the fit unchanged; arm flip negates beta") {
  RngStream rng = RngStream::from_seed(61);
  const TrialDataset ds = oracles::random_dataset(40, 3, rng);
  const SaturatedFit fit = fit_saturated(ds);

  const SaturatedFit fp = fit_saturated(permuted(ds, rng.derive(1)));
  CHECK((fp.beta - fit.beta).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((fp.sigma.mat() - fit.sigma.mat()).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(fp.loglik == fit.loglik);

  const SaturatedFit ff = fit_saturated(arms_flipped(ds));
  CHECK((ff.beta + fit.beta).lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK((ff.sigma.mat() - fit.sigma.mat()).lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("ate_saturated standard error") {
  // Equal arms of 50 with unit within-arm variance: SE = sqrt(2/50) = 0.2.
  RngStream rng = RngStream::from_seed(67);
  const int n = 100;
  std::vector<int> arm(n);
  Eigen::MatrixXd y(n, 3);
  for (int i = 0; i < n; ++i) {
    arm[static_cast<size_t>(i)] = (i < 50) ? 0 : 1;
    for (int j = 0; j < 3; ++j) y(i, j) = rng.normal();
  }
  // Rescale the primary so each within-arm unbiased variance is exactly 1.
  const TrialDataset tmp(arm, y,
                         {EndpointSpec::continuous("a"), EndpointSpec::continuous("b"),
                          EndpointSpec::continuous("c")});
  const ArmMoments m = arm_split(tmp);
  for (int i = 0; i < n; ++i) {
    if (arm[static_cast<size_t>(i)] == 0)
      y(i, 0) = (y(i, 0) - m.mean0(0)) / std::sqrt(m.cov0(0, 0));
    else
      y(i, 0) = (y(i, 0) - m.mean1(0)) / std::sqrt(m.cov1(0, 0));
  }
  const TrialDataset ds(arm, y,
                        {EndpointSpec::continuous("a"), EndpointSpec::continuous("b"),
                         EndpointSpec::continuous("c")});
  const SaturatedFit fit = fit_saturated(ds);
  const EstimateResult r = ate_saturated(fit, ds);
  CHECK(r.std_error == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(r.estimate == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.ci_low == doctest::Approx(-r.ci_high).epsilon(1e-9));
}

TEST_CASE("ate_saturated SE is near the design value on simulated data") {
  RngStream rng = RngStream::from_seed(71);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 250, rng);
  const EstimateResult r = ate_saturated(fit_saturated(ds), ds);
  // Theoretical two-sample SE with unit variances: 2/sqrt(250).
  CHECK(std::abs(r.std_error - 0.1265) / 0.1265 < 0.20);
}

TEST_CASE("binary ATE: proportions, SE, and boundary cases") {
  auto make = [](int n0, int k0, int n1, int k1) {
    std::vector<int> arm;
    std::vector<double> y1;
    for (int i = 0; i < n0; ++i) {
      arm.push_back(0);
      y1.push_back(i < k0 ? 1.0 : 0.0);
    }
    for (int i = 0; i < n1; ++i) {
      arm.push_back(1);
      y1.push_back(i < k1 ? 1.0 : 0.0);
    }
    const int n = n0 + n1;
    Eigen::MatrixXd y(n, 3);
    RngStream rng = RngStream::from_seed(404);
    for (int i = 0; i < n; ++i) {
      y(i, 0) = y1[static_cast<size_t>(i)];
      y(i, 1) = rng.normal();
      y(i, 2) = rng.normal();
    }
    return TrialDataset(arm, y,
                        {EndpointSpec::binary("y1"), EndpointSpec::continuous("y2"),
                         EndpointSpec::continuous("y3")});
  };

  // Equal rates: estimate 0.
  CHECK(ate_saturated_binary(make(40, 10, 40, 10)).estimate == doctest::Approx(0.0));

  // Plug-in SE at p0=0.15, p1=0.25, 125 per arm.
  const EstimateResult r = ate_saturated_binary(make(125, 19, 125, 31));
  const double p0 = 19.0 / 125.0, p1 = 31.0 / 125.0;
  const double se = std::sqrt(p1 * (1 - p1) / 125.0 + p0 * (1 - p0) / 125.0);
  CHECK(r.estimate == doctest::Approx(p1 - p0).epsilon(1e-12));
  CHECK(r.std_error == doctest::Approx(se).epsilon(1e-12));

  // All successes vs all failures: estimate 1, SE 0, flagged.
  const EstimateResult b = ate_saturated_binary(make(30, 0, 30, 30));
  CHECK(b.estimate == doctest::Approx(1.0));
  CHECK(b.std_error == 0.0);
  CHECK(!b.flags.empty());
}

TEST_CASE("ate_saturated_binary plug-in value at the design rates") {
  // p0 = 0.15 and p1 = 0.25 with 125 per arm, frozen from the plug-in
  // formula evaluated directly.
  const double se =
      std::sqrt(0.25 * 0.75 / 125.0 + 0.15 * 0.85 / 125.0);
  CHECK(se == doctest::Approx(0.0501996).epsilon(1e-5));
}

TEST_CASE("bic_saturated arithmetic") {
  RngStream rng = RngStream::from_seed(73);
  const TrialDataset ds = oracles::random_dataset(30, 3, rng);
  SaturatedFit fit = fit_saturated(ds);

  SaturatedFit zero = fit;
  zero.loglik = 0.0;
  CHECK(bic_saturated(zero, std::exp(1.0)) == doctest::Approx(12.0).epsilon(1e-12));

  const double n1x = bic_saturated(fit, 500.0);
  const double n2x = bic_saturated(fit, 1000.0);
  CHECK(n2x - n1x == doctest::Approx(fit.n_params * std::log(2.0)).epsilon(1e-10));

  CHECK(bic_saturated(fit, ds.n()) ==
        doctest::Approx(-2.0 * fit.loglik + 12.0 * std::log(30.0)).epsilon(1e-10));
}

TEST_CASE("binary saturated joint likelihood") {
  RngStream rng = RngStream::from_seed(79);
  const TrialDataset ds = gen_sim_c(1.0, Hypothesis::Alternative, 300, rng);
  const BinarySaturatedFit fit = fit_saturated_binary(ds);
  CHECK(fit.p0 == doctest::Approx(static_cast<double>(fit.cell_counts[1]) /
                                  ds.n_arm(0)));
  CHECK(fit.p1 == doctest::Approx(static_cast<double>(fit.cell_counts[3]) /
                                  ds.n_arm(1)));
  // 2 rates + 4 cells * 2 means + 3 covariance entries.
  CHECK(fit.n_params == 13);

  // Direct re-evaluation: Bernoulli plus conditional Gaussian per subject.
  double ll = 0.0;
  const auto cov = dist::CovMatrix::unchecked(fit.secondary_cov);
  for (int i = 0; i < ds.n(); ++i) {
    const int a = ds.arm(i);
    const int yy = static_cast<int>(ds.y(i, 0));
    const double pr = (a == 0) ? fit.p0 : fit.p1;
    ll += yy == 1 ? std::log(pr) : std::log1p(-pr);
    const Eigen::VectorXd mean = fit.cell_means.row(2 * a + yy).transpose();
    ll += dist::mvn_logpdf(ds.endpoints().row(i).tail(2).transpose(), mean, cov);
  }
  CHECK(fit.loglik == doctest::Approx(ll).epsilon(1e-8));
  CHECK(saturated_bic(ds) ==
        doctest::Approx(-2.0 * fit.loglik + 13.0 * std::log(300.0)).epsilon(1e-8));
}

TEST_SUITE_END();
