#include <doctest.h>

#include <cmath>

#include "../src/ma_internal.hpp"
#include "oracles.hpp"
#include "semavg/model_averaging.hpp"
#include "semavg/sim.hpp"

using namespace semavg;

TEST_SUITE_BEGIN("model-averaging");

TEST_CASE("omega_bic closed forms and saturation") {
  CHECK(omega_bic(100.0, 100.0) == doctest::Approx(0.5));
  CHECK(omega_bic(-2.0 * std::log(9.0), 0.0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(omega_bic(2000.0, 0.0) == 0.0);
  CHECK(omega_bic(0.0, 2000.0) == doctest::Approx(1.0));
  CHECK(std::isfinite(omega_bic(1e308 / 2, 0.0)));
  CHECK_THROWS_AS(omega_bic(std::numeric_limits<double>::infinity(), 0.0),
                  std::domain_error);
}

TEST_CASE("omega_bic is strictly decreasing in the BIC difference") {
  double prev = 1.0;
  for (double delta = -60.0; delta <= 60.0; delta += 0.5) {
    const double w = omega_bic(delta, 0.0);
    CHECK(w < prev);
    prev = w;
  }
}

TEST_CASE("combine is the exact convex combination") {
  CHECK(combine(1.0, 0.2, 0.4).tau_ma == 0.2);
  CHECK(combine(0.0, 0.2, 0.4).tau_ma == 0.4);
  CHECK(combine(0.25, 0.2, 0.4).tau_ma == doctest::Approx(0.35).epsilon(1e-15));
  CHECK_THROWS_AS(combine(-0.01, 0.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(combine(1.01, 0.0, 0.0), std::domain_error);

  RngStream rng = RngStream::from_seed(197);
  for (int t = 0; t < 200; ++t) {
    const double w = rng.uniform01();
    const double a = rng.normal(), b = rng.normal();
    const double m = combine(w, a, b).tau_ma;
    CHECK(m >= std::min(a, b) - 1e-15);
    CHECK(m <= std::max(a, b) + 1e-15);
  }
}

TEST_CASE("stratified folds: balance and arm counts") {
  RngStream rng = RngStream::from_seed(199);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 250, rng);
  const FoldAssignment fa =
      FoldAssignment::stratified(ds, 10, RngStream::from_seed(7));
  std::vector<int> per_fold_arm0(10, 0), per_fold_arm1(10, 0);
  for (int i = 0; i < ds.n(); ++i) {
    REQUIRE(fa.fold_of[static_cast<size_t>(i)] >= 0);
    REQUIRE(fa.fold_of[static_cast<size_t>(i)] < 10);
    (ds.arm(i) == 0 ? per_fold_arm0 : per_fold_arm1)
        [static_cast<size_t>(fa.fold_of[static_cast<size_t>(i)])]++;
  }
  for (int a = 0; a < 2; ++a) {
    const auto& counts = (a == 0) ? per_fold_arm0 : per_fold_arm1;
    const int mn = *std::min_element(counts.begin(), counts.end());
    const int mx = *std::max_element(counts.begin(), counts.end());
    CHECK(mn >= 2);
    CHECK(mx - mn <= 1);
  }
  CHECK_THROWS_AS(FoldAssignment::stratified(ds, 1, RngStream::from_seed(1)),
                  ValidationError);
  CHECK_THROWS_AS(FoldAssignment::stratified(ds, 80, RngStream::from_seed(1)),
                  ValidationError);
}

TEST_CASE("weight grid: ties break toward zero, dominance reaches one") {
  // Identical predictions: the curve is flat, so the tie rule keeps 0.
  CHECK(detail::sl_grid_argmin(0.0, 0.0, 0.01) == 0.0);
  // SSE strictly decreasing toward w=1.
  CHECK(detail::sl_grid_argmin(10.0, 5.0, 0.01) == 1.0);
  // Interior minimum at w = qb/qc, snapped to the grid.
  CHECK(detail::sl_grid_argmin(0.3, 1.0, 0.01) == doctest::Approx(0.3));
  // Negative qb: never leaves zero.
  CHECK(detail::sl_grid_argmin(-2.0, 1.0, 0.01) == 0.0);
}

TEST_CASE("degraded mode: failed training fits fall back to the saturated model") {
  RngStream rng = RngStream::from_seed(211);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 120, rng);
  SemOptions opts;
  opts.max_evals = 2;  // make every training fit fail
  opts.extra_starts = 0;
  const SuperLearnerResult r = omega_super_learner(ds, 5, 0.01, 99, opts);
  CHECK(r.n_degraded_folds == 5);
  CHECK(r.degraded());
  CHECK(r.omega == 0.0);  // identical predictions, tie rule
}

TEST_CASE("weight stays on the grid with clean folds") {
  RngStream rng = RngStream::from_seed(223);
  const TrialDataset ds = gen_sim_a(0.35, Hypothesis::Alternative, 2000, rng);
  const SuperLearnerResult r = omega_super_learner(ds, 10, 0.01, 4242);
  CHECK(r.omega >= 0.0);
  CHECK(r.omega <= 1.0);
  CHECK(std::abs(r.omega * 100.0 - std::round(r.omega * 100.0)) <= 1e-9);
  CHECK(r.n_degraded_folds == 0);
}

TEST_CASE("BIC weight ladder: toward 1 when the factor model is right, toward 0 when wrong") {
  McOptions opts;
  opts.bootstrap_B = 0;
  opts.n_threads = 2;
  auto mean_w = [&](Scenario sc, double shape, int n, uint64_t cell) {
    const MonteCarloSummary s =
        run_monte_carlo({sc, Hypothesis::Alternative, shape, n}, 80,
                        {EstimatorKind::BicMa}, opts, 0x1adde5, cell);
    return s.estimators[0].mean_omega;
  };
  const double a250 = mean_w(Scenario::A, 0.35, 250, 1);
  const double a1000 = mean_w(Scenario::A, 0.35, 1000, 2);
  const double a4000 = mean_w(Scenario::A, 0.35, 4000, 3);
  CHECK(a250 > 0.9);
  CHECK(a1000 > a250);
  CHECK(a4000 > a1000);

  const double b250 = mean_w(Scenario::B1, 2.0, 250, 4);
  const double b1000 = mean_w(Scenario::B1, 2.0, 1000, 5);
  const double b4000 = mean_w(Scenario::B1, 2.0, 4000, 6);
  CHECK(b1000 < b250);
  CHECK(b4000 < b1000);
  CHECK(b4000 < 0.01);
}

TEST_CASE("mean super-learner weight exceeds one half when the SEM is right") {
  RngStream rng = RngStream::from_seed(227);
  double total = 0.0;
  const int reps = 200;
  for (int t = 0; t < reps; ++t) {
    const TrialDataset ds =
        gen_sim_a(0.35, Hypothesis::Alternative, 250, rng.derive(t));
    total += omega_super_learner(ds, 10, 0.01, 1000 + t).omega;
  }
  CHECK(total / reps > 0.5);
}

TEST_CASE("permutation invariance given the same fold assignment") {
  RngStream rng = RngStream::from_seed(229);
  const TrialDataset ds = gen_sim_a(0.5, Hypothesis::Alternative, 200, rng);
  const FoldAssignment fa =
      FoldAssignment::stratified(ds, 8, RngStream::from_seed(31));
  const double w = omega_super_learner(ds, fa, 0.01).omega;

  // Reverse the subject order, carrying fold labels along.
  std::vector<int> order(static_cast<size_t>(ds.n()));
  for (int i = 0; i < ds.n(); ++i) order[static_cast<size_t>(i)] = ds.n() - 1 - i;
  const TrialDataset rds = ds.subset(order);
  FoldAssignment rfa;
  rfa.V = fa.V;
  rfa.fold_of.resize(fa.fold_of.size());
  for (int i = 0; i < ds.n(); ++i)
    rfa.fold_of[static_cast<size_t>(i)] =
        fa.fold_of[static_cast<size_t>(order[static_cast<size_t>(i)])];
  const double wr = omega_super_learner(rds, rfa, 0.01).omega;
  CHECK(w == wr);
}

TEST_CASE("binary-primary super learner uses probability predictions") {
  RngStream rng = RngStream::from_seed(233);
  const TrialDataset ds = gen_sim_c(1.0, Hypothesis::Alternative, 400, rng);
  const SuperLearnerResult r = omega_super_learner(ds, 10, 0.01, 7);
  CHECK(r.omega >= 0.0);
  CHECK(r.omega <= 1.0);

  const TrialDataset ord = [&] {
    std::vector<int> arm = ds.arms();
    Eigen::MatrixXd y = ds.endpoints();
    std::vector<EndpointSpec> specs = {EndpointSpec::ordinal("y1", 3),
                                       EndpointSpec::continuous("y2"),
                                       EndpointSpec::continuous("y3")};
    for (int i = 0; i < y.rows(); ++i) y(i, 0) = std::min(y(i, 0), 2.0);
    return TrialDataset(arm, y, specs);
  }();
  CHECK_THROWS_AS(omega_super_learner(ord, 5, 0.01, 7), ValidationError);
}

TEST_SUITE_END();
