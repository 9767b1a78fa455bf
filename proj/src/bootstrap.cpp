#include "semavg/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "semavg/parallel.hpp"

namespace semavg {

std::vector<int> stratified_resample(const TrialDataset& ds, RngStream rng) {
  std::vector<int> arm_idx[2];
  for (int i = 0; i < ds.n(); ++i)
    arm_idx[ds.arm(i)].push_back(i);
  std::vector<int> rows;
  rows.reserve(static_cast<size_t>(ds.n()));
  for (int a = 0; a < 2; ++a) {
    const auto& pool = arm_idx[a];
    for (size_t k = 0; k < pool.size(); ++k)
      rows.push_back(pool[static_cast<size_t>(rng.uniform_below(pool.size()))]);
  }
  return rows;
}

double quantile_type7(const std::vector<double>& sorted, double q) {
  const size_t m = sorted.size();
  if (m == 0) return std::numeric_limits<double>::quiet_NaN();
  if (m == 1) return sorted[0];
  const double h = (static_cast<double>(m) - 1.0) * q;
  const size_t lo = static_cast<size_t>(std::floor(h));
  if (lo + 1 >= m) return sorted[m - 1];
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

BootstrapResult bootstrap(const TrialDataset& ds, const Estimator& estimator,
                          int B, double alpha, uint64_t seed, int n_threads) {
  if (B < 100) throw std::domain_error("bootstrap: B must be at least 100");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::domain_error("bootstrap: alpha must lie in (0, 1)");

  const RngStream root = RngStream::from_seed(seed);
  BootstrapResult res;
  res.alpha = alpha;
  res.point = estimator(ds, root.derive(0).key());  // failure here propagates

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> raw(static_cast<size_t>(B), nan);
  parallel_for(B, n_threads, [&](int b) {
    RngStream rep = root.derive(static_cast<uint64_t>(b) + 1);
    const std::vector<int> rows = stratified_resample(ds, rep.derive(0));
    const TrialDataset rds = ds.subset(rows);
    try {
      raw[static_cast<size_t>(b)] = estimator(rds, rep.derive(1).key());
    } catch (...) {
      // dropped and counted below
    }
  });

  res.estimates.reserve(static_cast<size_t>(B));
  for (double v : raw) {
    if (std::isnan(v))
      ++res.n_failed;
    else
      res.estimates.push_back(v);
  }
  res.unreliable = res.n_failed > 0.05 * B;

  const size_t m = res.estimates.size();
  if (m >= 2) {
    double mean = 0.0;
    for (double v : res.estimates) mean += v;
    mean /= static_cast<double>(m);
    double ss = 0.0;
    for (double v : res.estimates) ss += (v - mean) * (v - mean);
    res.se = std::sqrt(ss / static_cast<double>(m - 1));
  }
  std::vector<double> sorted = res.estimates;
  std::sort(sorted.begin(), sorted.end());
  res.ci_low = quantile_type7(sorted, alpha / 2.0);
  res.ci_high = quantile_type7(sorted, 1.0 - alpha / 2.0);
  return res;
}

double effective_sample_size(double var_candidate, double var_saturated, int n) {
  if (!(var_candidate > 0.0) || !(var_saturated > 0.0))
    throw std::domain_error("effective_sample_size: variances must be positive");
  return static_cast<double>(n) * var_saturated / var_candidate;
}

}  // namespace semavg
