#include "semavg/optim.hpp"

#include <cmath>
#include <limits>

namespace semavg::optim {

namespace {
constexpr double kArmijoC1 = 1e-4;
constexpr double kBacktrack = 0.5;
constexpr int kMaxBacktracks = 50;
}  // namespace

BfgsResult bfgs_minimize(const ValueAndGrad& fn, const Eigen::VectorXd& x0,
                         const BfgsOptions& opts) {
  const int k = static_cast<int>(x0.size());
  BfgsResult res;
  res.x = x0;
  res.grad.resize(k);

  int n_evals = 1;
  res.f = fn(res.x, &res.grad);
  res.trace.push_back(res.f);
  if (!std::isfinite(res.f)) return res;

  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(k, k);
  const double g0 = res.grad.template lpNorm<Eigen::Infinity>();
  if (g0 > 1.0) h *= 1.0 / g0;

  Eigen::VectorXd x_new(k), g_new(k), d(k), s(k), yv(k);
  int stall_count = 0;
  bool restarted = false;

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    if (res.grad.template lpNorm<Eigen::Infinity>() <= opts.grad_tol) {
      res.grad_converged = true;
      break;
    }
    if (n_evals >= opts.max_evals) break;

    d.noalias() = -(h * res.grad);
    double slope = d.dot(res.grad);
    if (!(slope < 0.0)) {  // not a descent direction: reset to steepest descent
      h.setIdentity();
      const double gs = res.grad.template lpNorm<Eigen::Infinity>();
      if (gs > 1.0) h *= 1.0 / gs;
      d.noalias() = -(h * res.grad);
      slope = d.dot(res.grad);
      if (!(slope < 0.0)) break;
    }

    // Backtracking Armijo search from the natural step.
    double alpha = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int bt = 0; bt < kMaxBacktracks; ++bt) {
      x_new = res.x + alpha * d;
      f_new = fn(x_new, nullptr);
      ++n_evals;
      if (std::isfinite(f_new) && f_new <= res.f + kArmijoC1 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= kBacktrack;
      if (n_evals >= opts.max_evals) break;
    }
    if (!accepted) {
      // Try once more from a fresh steepest-descent scaling before giving up.
      if (h.isIdentity(0.0)) {
        res.stalled = true;
        break;
      }
      h.setIdentity();
      continue;
    }

    const double f_eval = fn(x_new, &g_new);
    ++n_evals;
    (void)f_eval;

    s = x_new - res.x;
    yv = g_new - res.grad;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      // Standard BFGS inverse-Hessian update.
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = h * yv;
      const double yhy = yv.dot(hy);
      h.noalias() += (rho * rho * yhy + rho) * (s * s.transpose());
      h.noalias() -= rho * (hy * s.transpose() + s * hy.transpose());
    }

    const double improvement = res.f - f_new;
    res.x = x_new;
    res.f = f_new;
    res.grad = g_new;
    res.trace.push_back(res.f);
    res.n_iters = iter + 1;

    if (improvement <= opts.f_tol * (std::abs(res.f) + 1.0)) {
      if (++stall_count >= 3) {
        // One fresh start from the current point before giving up; helps in
        // the ill-conditioned valleys near a variance floor.
        if (restarted) {
          res.stalled = true;
          break;
        }
        restarted = true;
        stall_count = 0;
        h.setIdentity();
        const double gs = res.grad.template lpNorm<Eigen::Infinity>();
        if (gs > 1.0) h *= 1.0 / gs;
      }
    } else {
      stall_count = 0;
    }
  }

  if (!res.grad_converged &&
      res.grad.template lpNorm<Eigen::Infinity>() <= opts.grad_tol)
    res.grad_converged = true;
  return res;
}

}  // namespace semavg::optim
