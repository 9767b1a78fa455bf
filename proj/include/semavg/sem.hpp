#pragma once

#include <memory>
#include <optional>

#include "semavg/dist.hpp"
#include "semavg/trial_data.hpp"

namespace semavg {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters of the one-factor model: endpoints load on a single latent
/// variable with unit residual variance, and treatment acts on the latent
/// mean only. A categorical primary is the thresholded version of a latent
/// Gaussian coordinate whose residual variance is fixed at 1; its first
/// threshold is fixed at 0 and `thresholds` holds the K-2 free cuts above it.
struct SemParams {
  Eigen::VectorXd nu;      // endpoint intercepts
  Eigen::VectorXd lambda;  // loadings
  double gamma = 0.0;      // latent treatment effect
  Eigen::VectorXd theta;   // residual variances; 1.0 at a categorical coordinate
  std::vector<double> thresholds;

  int P() const { return static_cast<int>(nu.size()); }
};

struct ImpliedMoments {
  Eigen::VectorXd mean;
  dist::CovMatrix cov;
};

/// Model-implied endpoint moments for one arm: mean = nu + gamma*lambda*arm,
/// cov = diag(theta) + lambda*lambda^T.
ImpliedMoments implied_moments(const SemParams& p, int arm);

/// Observed-data log likelihood. All-continuous data use the closed Gaussian
/// form; with a categorical primary the likelihood factors into the Gaussian
/// marginal of the secondaries times the interval probability of the latent
/// primary given them. Evaluates to -infinity (not an exception) when the
/// implied covariance is not positive definite.
double sem_loglik(const SemParams& p, const TrialDataset& ds);

enum class SemStatus { Converged, Boundary, Failed };

struct SemFit {
  SemParams params;
  double loglik = 0.0;
  Eigen::MatrixXd param_cov;  // sampling covariance of the free parameters
  int n_params = 0;
  SemStatus status = SemStatus::Failed;
  int n_evals = 0;
  std::vector<double> trace;  // log likelihood at accepted optimizer steps
  std::vector<std::string> flags;

  int P = 0;
  bool categorical = false;
  int K = 0;  // levels of the categorical primary (0 if continuous)

  bool converged() const { return status != SemStatus::Failed; }
  bool boundary() const { return status == SemStatus::Boundary; }

  // Free-parameter indices into param_cov (natural scale). Order: nu(0..P-1),
  // lambda(P..2P-1), gamma, residual variances of non-categorical endpoints,
  // free thresholds. idx_theta returns -1 for the fixed categorical theta.
  int idx_nu(int p) const { return p; }
  int idx_lambda(int p) const { return P + p; }
  int idx_gamma() const { return 2 * P; }
  int idx_theta(int p) const {
    if (categorical && p == 0) return -1;
    return 2 * P + 1 + (categorical ? p - 1 : p);
  }
  int idx_threshold(int j) const { return 2 * P + 1 + (categorical ? P - 1 : P) + j; }
};

struct SemOptions {
  double grad_tol = 1e-6;  // per-observation max-norm, transformed scale
  int max_evals = 40000;
  int extra_starts = 4;
  bool analytic_gradient = true;  // false: central finite differences
  bool compute_param_cov = true;
  std::optional<SemParams> warm_start;
  uint64_t jitter_seed = 0x5eedb00f;
};

/// Maximum likelihood fit. Never throws on numerical failure: a fit that does
/// not reach the gradient tolerance comes back with status Failed carrying the
/// best parameters found. A residual variance pinned at the 1e-6 floor yields
/// status Boundary.
SemFit fit_sem(const TrialDataset& ds, const SemOptions& opts = {});

// Estimands as pure functions of the parameters.
double sem_ate_continuous(const SemParams& p);  // gamma * lambda_1
double sem_ate_binary(const SemParams& p);      // Phi difference of arm rates
double sem_probit_coefficient(const SemParams& p);
double sem_concordance(const SemParams& p, int n_levels);

/// Marginal mean (continuous) or success probability (binary) of the primary
/// endpoint under the model for a given arm; the prediction used by the
/// cross-validated weight selection.
double sem_primary_prediction(const SemParams& p, EndpointKind kind, int arm);

EstimateResult ate_sem_continuous(const SemFit& fit);
EstimateResult ate_sem_binary(const SemFit& fit);
EstimateResult probit_coefficient(const SemFit& fit);
EstimateResult concordance(const SemFit& fit);

double bic_sem(const SemFit& fit, double n);

/// Objective used by fit_sem on the unconstrained scale (log residual
/// variances, log threshold gaps): exposed so tests can check gradients and
/// optimizer wiring directly. Returns the negative log likelihood.
class SemObjective {
 public:
  explicit SemObjective(const TrialDataset& ds, bool analytic_gradient = true);
  ~SemObjective();
  SemObjective(SemObjective&&) noexcept;

  int dim() const;
  /// Negative log likelihood; fills the gradient when grad is non-null.
  /// Not thread-safe: one instance per concurrent fit.
  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd* grad);

  Eigen::VectorXd pack(const SemParams& p) const;
  SemParams unpack(const Eigen::VectorXd& x) const;

  struct Impl;

 private:
  friend SemFit fit_sem(const TrialDataset&, const SemOptions&);
  std::unique_ptr<Impl> impl_;
};

}  // namespace semavg
