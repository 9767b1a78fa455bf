#pragma once

#include <iosfwd>

#include "semavg/estimators.hpp"
#include "semavg/rng.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario { A, B1, B2, C };
enum class Hypothesis { Null, Alternative };

Scenario parse_scenario(const std::string& token);
std::string scenario_label(Scenario s);

/// One cell of a simulation study: scenario A sweeps the (Y1,Y2) covariance
/// c12, scenarios B and C sweep the misspecification factor s. B1 under the
/// Null keeps the secondary-endpoint effects (primary-only null); B2 is
/// always the global null.
struct SimScenario {
  Scenario label = Scenario::A;
  Hypothesis hyp = Hypothesis::Alternative;
  double shape = 0.35;  // c12 for A, s for B1/B2/C
  int n = 250;
};

/// Three Gaussian endpoints compatible with the one-factor model: unit
/// variances, Cov(Y1,Y2)=c12, effects (0.25,0.35,0.30) under the alternative.
TrialDataset gen_sim_a(double c12, Hypothesis hyp, int n, RngStream rng);

enum class BVariant { B1Alt, B1NullPrimary, B2GlobalNull };

/// Three Gaussian endpoints with the factor structure broken away from one
/// point of the s grid.
TrialDataset gen_sim_b(BVariant variant, double s, int n, RngStream rng);

/// Binary primary thresholded from a latent Gaussian with arm rates
/// 0.15/0.25 (alternative), plus two Gaussian secondaries.
TrialDataset gen_sim_c(double s, Hypothesis hyp, int n, RngStream rng);

TrialDataset generate(const SimScenario& scn, RngStream rng);

/// The scenario's exact ATE on the primary endpoint.
double true_ate(const SimScenario& scn);

struct EstimatorSummary {
  std::string label;
  double bias = 0.0;
  double se = 0.0;    // population SD over replicates, so rmse^2 = bias^2 + se^2
  double rmse = 0.0;
  double coverage = 0.0;
  double rejection = 0.0;
  double mean_omega = std::numeric_limits<double>::quiet_NaN();
  int n_used = 0;
  int n_failed = 0;
};

struct ReplicateRow {
  int rep = 0;
  std::string estimator;
  double estimate = 0.0, se = 0.0, omega = 0.0;
  bool ok = false, covered = false, rejected = false;
};

struct MonteCarloSummary {
  SimScenario scenario;
  int reps = 0;
  uint64_t seed = 0;
  int bootstrap_B = 0;
  double true_tau = 0.0;
  std::vector<EstimatorSummary> estimators;
  std::vector<ReplicateRow> replicates;  // filled when keep_replicates
};

struct McOptions {
  int bootstrap_B = 500;  // within-replicate bootstrap for the MA estimators
  int folds = 10;
  double grid_step = 0.01;
  double alpha = 0.05;
  int n_threads = 1;
  bool keep_replicates = false;
  SemOptions sem;
};

/// Monte Carlo evaluation: per replicate, generate a dataset, run each
/// estimator, and record estimate/CI/rejection. Saturated and SEM use
/// analytic and delta-method standard errors; the model-averaging estimators
/// use bootstrap-SE Wald inference. Output is a deterministic function of
/// (seed, cell_id) regardless of thread count.
MonteCarloSummary run_monte_carlo(const SimScenario& scn, int reps,
                                  const std::vector<EstimatorKind>& estimators,
                                  const McOptions& opts, uint64_t seed,
                                  uint64_t cell_id = 0);

/// Sweep configuration matching the `simulate` subcommand's JSON input.
struct SweepConfig {
  Scenario scenario = Scenario::A;
  std::string hypothesis = "alternative";  // alternative | null | null-primary
  std::vector<double> grid;
  int n = 250;
  int reps = 1000;
  std::vector<EstimatorKind> estimators;
  int bootstrap_B = 500;
  int folds = 10;
  double grid_step = 0.01;
  double alpha = 0.05;
  uint64_t seed = 1;
  int threads = 0;  // 0: all available
};

SweepConfig parse_sweep_config(const std::string& json_text);

/// One summary CSV row per (cell x estimator); byte-identical for a fixed
/// seed.
void write_summary_csv(std::ostream& out,
                       const std::vector<MonteCarloSummary>& cells);
void write_replicates_csv(std::ostream& out,
                          const std::vector<MonteCarloSummary>& cells);

}  // namespace semavg
