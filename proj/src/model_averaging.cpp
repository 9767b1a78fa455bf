#include "semavg/model_averaging.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "ma_internal.hpp"

namespace semavg {

double omega_bic(double bic_sem, double bic_sat) {
  if (!std::isfinite(bic_sem) || !std::isfinite(bic_sat))
    throw std::domain_error("omega_bic: BIC values must be finite");
  const double half_delta = 0.5 * (bic_sem - bic_sat);
  if (half_delta >= 0.0) {
    const double e = std::exp(-half_delta);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(half_delta));
}

FoldAssignment FoldAssignment::stratified(const TrialDataset& ds, int V,
                                          RngStream rng) {
  const int min_arm = std::min(ds.n_arm(0), ds.n_arm(1));
  if (V < 2 || V > min_arm / 2)
    throw ValidationError("V must lie between 2 and half the smaller arm size (" +
                          std::to_string(min_arm / 2) + "), got " +
                          std::to_string(V));
  FoldAssignment fa;
  fa.V = V;
  fa.fold_of.assign(static_cast<size_t>(ds.n()), -1);
  for (int a = 0; a < 2; ++a) {
    std::vector<int> idx;
    for (int i = 0; i < ds.n(); ++i)
      if (ds.arm(i) == a) idx.push_back(i);
    // Fisher-Yates, then deal round-robin.
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_below(i))]);
    for (size_t pos = 0; pos < idx.size(); ++pos)
      fa.fold_of[static_cast<size_t>(idx[pos])] = static_cast<int>(pos % V);
  }
  return fa;
}

namespace detail {

GaussianBlockStats SlFoldStats::totals() const {
  GaussianBlockStats t;
  t.mean0 = Eigen::VectorXd::Zero(P_);
  t.mean1 = Eigen::VectorXd::Zero(P_);
  Eigen::MatrixXd cross0 = Eigen::MatrixXd::Zero(P_, P_);
  Eigen::MatrixXd cross1 = Eigen::MatrixXd::Zero(P_, P_);
  for (int v = 0; v < V_; ++v) {
    t.n0 += count_[static_cast<size_t>(2 * v)];
    t.n1 += count_[static_cast<size_t>(2 * v + 1)];
    t.mean0 += sum_[static_cast<size_t>(2 * v)];
    t.mean1 += sum_[static_cast<size_t>(2 * v + 1)];
    cross0 += cross_[static_cast<size_t>(2 * v)];
    cross1 += cross_[static_cast<size_t>(2 * v + 1)];
  }
  t.mean0 /= t.n0;
  t.mean1 /= t.n1;
  t.m2pool = cross0 - t.n0 * (t.mean0 * t.mean0.transpose()) + cross1 -
             t.n1 * (t.mean1 * t.mean1.transpose());
  return t;
}

GaussianBlockStats SlFoldStats::training(int fold) const {
  GaussianBlockStats t;
  t.mean0 = Eigen::VectorXd::Zero(P_);
  t.mean1 = Eigen::VectorXd::Zero(P_);
  Eigen::MatrixXd cross0 = Eigen::MatrixXd::Zero(P_, P_);
  Eigen::MatrixXd cross1 = Eigen::MatrixXd::Zero(P_, P_);
  for (int v = 0; v < V_; ++v) {
    if (v == fold) continue;
    t.n0 += count_[static_cast<size_t>(2 * v)];
    t.n1 += count_[static_cast<size_t>(2 * v + 1)];
    t.mean0 += sum_[static_cast<size_t>(2 * v)];
    t.mean1 += sum_[static_cast<size_t>(2 * v + 1)];
    cross0 += cross_[static_cast<size_t>(2 * v)];
    cross1 += cross_[static_cast<size_t>(2 * v + 1)];
  }
  t.mean0 /= t.n0;
  t.mean1 /= t.n1;
  t.m2pool = cross0 - t.n0 * (t.mean0 * t.mean0.transpose()) + cross1 -
             t.n1 * (t.mean1 * t.mean1.transpose());
  return t;
}

double sl_grid_argmin(double qb, double qc, double grid_step) {
  double best_w = 0.0;
  double best_sse = 0.0;  // SSE(w) - SSE(0) = -2*qb*w + qc*w^2
  for (int m = 1;; ++m) {
    double w = m * grid_step;
    if (w >= 1.0 - 1e-12) w = 1.0;
    const double sse = -2.0 * qb * w + qc * w * w;
    if (sse < best_sse) {
      best_sse = sse;
      best_w = w;
    }
    if (w == 1.0) break;
  }
  return best_w;
}

SuperLearnerResult SlFoldStats::solve(double grid_step,
                                      const SemOptions& sem_opts) const {
  SuperLearnerResult result;
  double qb = 0.0, qc = 0.0;
  for (int v = 0; v < V_; ++v) {
    const GaussianBlockStats train = training(v);
    double psat[2] = {train.mean0(0), train.mean1(0)};
    double psem[2];
    const SemFit fit = fit_sem_stats(train, sem_opts);
    if (fit.status == SemStatus::Failed) {
      ++result.n_degraded_folds;
      psem[0] = psat[0];
      psem[1] = psat[1];
    } else {
      psem[0] = fit.params.nu(0);
      psem[1] = fit.params.nu(0) + fit.params.gamma * fit.params.lambda(0);
    }
    // Held-out residual coefficients, by (fold, arm) group.
    for (int a = 0; a < 2; ++a) {
      const size_t g = static_cast<size_t>(2 * v + a);
      const double cnt = count_[g];
      if (cnt == 0) continue;
      const double s1 = sum_[g](0);
      const double diff = psem[a] - psat[a];
      qb += diff * (s1 - cnt * psat[a]);
      qc += cnt * diff * diff;
    }
  }
  result.omega = sl_grid_argmin(qb, qc, grid_step);
  return result;
}

}  // namespace detail

SuperLearnerResult omega_super_learner(const TrialDataset& ds, int V,
                                       double grid_step, uint64_t seed,
                                       const SemOptions& sem_opts) {
  return omega_super_learner(
      ds, FoldAssignment::stratified(ds, V, RngStream::from_seed(seed)),
      grid_step, sem_opts);
}

SuperLearnerResult omega_super_learner(const TrialDataset& ds,
                                       const FoldAssignment& folds,
                                       double grid_step,
                                       const SemOptions& sem_opts) {
  const EndpointKind kind = ds.primary().kind;
  if (kind == EndpointKind::Ordinal)
    throw ValidationError(
        "super-learner weights are defined for continuous or binary primaries");
  if (!(grid_step > 0.0 && grid_step <= 1.0))
    throw std::domain_error("grid_step must lie in (0, 1]");

  const int n = ds.n();
  const int V = folds.V;
  SemOptions fold_opts = sem_opts;
  fold_opts.compute_param_cov = false;

  if (kind == EndpointKind::Continuous) {
    detail::SlFoldStats stats(V, ds.n_endpoints());
    for (int i = 0; i < n; ++i)
      stats.add(folds.fold_of[static_cast<size_t>(i)], ds.arm(i),
                ds.endpoints().row(i).transpose());
    return stats.solve(grid_step, fold_opts);
  }

  // Binary primary: training fits need per-subject interval terms, so fold
  // complements are materialized.
  SuperLearnerResult result;
  double qb = 0.0, qc = 0.0;
  std::vector<int> train_rows;
  train_rows.reserve(static_cast<size_t>(n));
  for (int v = 0; v < V; ++v) {
    train_rows.clear();
    for (int i = 0; i < n; ++i)
      if (folds.fold_of[static_cast<size_t>(i)] != v) train_rows.push_back(i);
    const TrialDataset train = ds.subset(train_rows);

    double sum[2] = {0.0, 0.0};
    double cnt[2] = {0.0, 0.0};
    for (int i = 0; i < train.n(); ++i) {
      sum[train.arm(i)] += train.y(i, 0);
      cnt[train.arm(i)] += 1.0;
    }
    double psat[2] = {sum[0] / cnt[0], sum[1] / cnt[1]};
    double psem[2];
    const SemFit fit = fit_sem(train, fold_opts);
    if (fit.status == SemStatus::Failed) {
      ++result.n_degraded_folds;
      psem[0] = psat[0];
      psem[1] = psat[1];
    } else {
      for (int a = 0; a < 2; ++a)
        psem[a] = sem_primary_prediction(fit.params, kind, a);
    }

    double held_sum[2] = {0.0, 0.0};
    double held_cnt[2] = {0.0, 0.0};
    for (int i = 0; i < n; ++i) {
      if (folds.fold_of[static_cast<size_t>(i)] != v) continue;
      held_sum[ds.arm(i)] += ds.y(i, 0);
      held_cnt[ds.arm(i)] += 1.0;
    }
    for (int a = 0; a < 2; ++a) {
      const double diff = psem[a] - psat[a];
      qb += diff * (held_sum[a] - held_cnt[a] * psat[a]);
      qc += held_cnt[a] * diff * diff;
    }
  }
  result.omega = detail::sl_grid_argmin(qb, qc, grid_step);
  return result;
}

WeightedEstimate combine(double omega, double tau_sem, double tau_sat) {
  if (!(omega >= 0.0 && omega <= 1.0))
    throw std::domain_error("combine: omega must lie in [0, 1]");
  return {omega, tau_sem, tau_sat, omega * tau_sem + (1.0 - omega) * tau_sat};
}

}  // namespace semavg
