#include <doctest.h>

#include <atomic>
#include <cmath>

#include "oracles.hpp"
#include "semavg/bootstrap.hpp"
#include "semavg/estimators.hpp"
#include "semavg/sim.hpp"

using namespace semavg;

namespace {

double diff_in_means(const TrialDataset& ds) {
  double s[2] = {0.0, 0.0};
  for (int i = 0; i < ds.n(); ++i) s[ds.arm(i)] += ds.y(i, 0);
  return s[1] / ds.n_arm(1) - s[0] / ds.n_arm(0);
}

}  // namespace

TEST_SUITE_BEGIN("bootstrap");

TEST_CASE("quantile_type7 matches hand calculations") {
  const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  CHECK(quantile_type7(v, 0.0) == 1.0);
  CHECK(quantile_type7(v, 1.0) == 4.0);
  CHECK(quantile_type7(v, 0.5) == doctest::Approx(2.5));
  CHECK(quantile_type7(v, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("constant estimator gives a degenerate interval") {
  RngStream rng = RngStream::from_seed(239);
  const TrialDataset ds = oracles::random_dataset(40, 3, rng);
  const BootstrapResult r = bootstrap(
      ds, [](const TrialDataset&, uint64_t) { return 3.25; }, 200, 0.05, 11);
  CHECK(r.point == 3.25);
  CHECK(r.se == 0.0);
  CHECK(r.ci_low == 3.25);
  CHECK(r.ci_high == 3.25);
  CHECK(r.n_failed == 0);
  CHECK(!r.unreliable);
}

TEST_CASE("preconditions") {
  RngStream rng = RngStream::from_seed(241);
  const TrialDataset ds = oracles::random_dataset(40, 3, rng);
  auto est = [](const TrialDataset&, uint64_t) { return 0.0; };
  CHECK_THROWS_AS(bootstrap(ds, est, 99, 0.05, 1), std::domain_error);
  CHECK_NOTHROW(bootstrap(ds, est, 100, 0.05, 1));
  CHECK_THROWS_AS(bootstrap(ds, est, 200, 0.0, 1), std::domain_error);
  CHECK_THROWS_AS(bootstrap(ds, est, 200, 1.0, 1), std::domain_error);
}

TEST_CASE("fixed seed gives a bit-identical estimates vector") {
  RngStream rng = RngStream::from_seed(251);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 100, rng);
  auto est = [](const TrialDataset& d, uint64_t) { return diff_in_means(d); };
  const BootstrapResult a = bootstrap(ds, est, 300, 0.05, 77, 1);
  const BootstrapResult b = bootstrap(ds, est, 300, 0.05, 77, 2);
  REQUIRE(a.estimates.size() == b.estimates.size());
  for (size_t i = 0; i < a.estimates.size(); ++i)
    CHECK(a.estimates[i] == b.estimates[i]);
  CHECK(a.se == b.se);
  CHECK(a.ci_low == b.ci_low);

  const BootstrapResult c = bootstrap(ds, est, 300, 0.05, 78, 1);
  CHECK(c.estimates != a.estimates);
}

TEST_CASE("resampling is stratified: arm sizes preserved in every replicate") {
  RngStream rng = RngStream::from_seed(257);
  std::vector<int> arm;
  Eigen::MatrixXd y(90, 3);
  for (int i = 0; i < 90; ++i) {
    arm.push_back(i < 30 ? 0 : 1);  // unbalanced 30/60
    for (int j = 0; j < 3; ++j) y(i, j) = rng.normal();
  }
  const TrialDataset ds(arm, y,
                        {EndpointSpec::continuous("a"), EndpointSpec::continuous("b"),
                         EndpointSpec::continuous("c")});
  std::atomic<bool> all_ok{true};
  bootstrap(
      ds,
      [&](const TrialDataset& d, uint64_t) {
        if (d.n_arm(0) != 30 || d.n_arm(1) != 60) all_ok = false;
        return 0.0;
      },
      150, 0.05, 5, 2);
  CHECK(all_ok.load());
}

TEST_CASE("bootstrap SE tracks the analytic two-sample SE within 15%") {
  RngStream rng = RngStream::from_seed(263);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 250, rng);
  const ArmMoments m = arm_split(ds);
  const double analytic =
      std::sqrt(m.cov1(0, 0) / m.n1 + m.cov0(0, 0) / m.n0);
  const BootstrapResult r = bootstrap(
      ds, [](const TrialDataset& d, uint64_t) { return diff_in_means(d); }, 1000,
      0.05, 31, 2);
  CHECK(std::abs(r.se - analytic) / analytic < 0.15);
}

TEST_CASE("median of replicates lies inside the percentile interval") {
  RngStream rng = RngStream::from_seed(269);
  const TrialDataset ds = gen_sim_a(0.5, Hypothesis::Alternative, 120, rng);
  for (double alpha : {0.05, 0.2, 0.5}) {
    const BootstrapResult r = bootstrap(
        ds, [](const TrialDataset& d, uint64_t) { return diff_in_means(d); }, 400,
        alpha, 13);
    std::vector<double> sorted = r.estimates;
    std::sort(sorted.begin(), sorted.end());
    const double med = quantile_type7(sorted, 0.5);
    CHECK(r.ci_low <= med);
    CHECK(med <= r.ci_high);
  }
}

TEST_CASE("failed replicates are dropped, counted, and flagged past 5%") {
  RngStream rng = RngStream::from_seed(271);
  const TrialDataset ds = oracles::random_dataset(60, 3, rng);
  int calls = 0;
  const BootstrapResult r = bootstrap(
      ds,
      [&](const TrialDataset& d, uint64_t) {
        if (calls++ % 10 == 3) throw FitError("synthetic failure");
        return diff_in_means(d);
      },
      200, 0.05, 3, 1);
  CHECK(r.n_failed == 20);
  CHECK(static_cast<int>(r.estimates.size()) == 180);
  CHECK(r.unreliable);

  // Failure on the full dataset is a hard error.
  CHECK_THROWS_AS(bootstrap(
                      ds,
                      [](const TrialDataset&, uint64_t) -> double {
                        throw FitError("always");
                      },
                      200, 0.05, 3, 1),
                  FitError);
}

TEST_CASE("percentile CI coverage on null data is near nominal") {
  // Saturated difference in means on null Gaussian data: coverage of 0 over
  // Monte Carlo trials should sit close to 95%.
  RngStream rng = RngStream::from_seed(277);
  const int trials = 500;
  int covered = 0;
  for (int t = 0; t < trials; ++t) {
    const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Null, 200, rng.derive(t));
    const BootstrapResult r = bootstrap(
        ds, [](const TrialDataset& d, uint64_t) { return diff_in_means(d); }, 500,
        0.05, 1000 + t, 2);
    if (r.ci_low <= 0.0 && 0.0 <= r.ci_high) ++covered;
  }
  const double coverage = static_cast<double>(covered) / trials;
  CHECK(coverage >= 0.92);
  CHECK(coverage <= 0.98);
}

TEST_CASE("effective sample size") {
  CHECK(effective_sample_size(2.0, 2.0, 99) == doctest::Approx(99.0));
  CHECK(effective_sample_size(1.0, 2.0, 99) == doctest::Approx(198.0));
  CHECK(effective_sample_size(0.5, 2.0, 100) == doctest::Approx(400.0));
  CHECK_THROWS_AS(effective_sample_size(0.0, 1.0, 10), std::domain_error);
  CHECK_THROWS_AS(effective_sample_size(1.0, -1.0, 10), std::domain_error);
}

TEST_SUITE_END();
