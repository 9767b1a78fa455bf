#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace semavg::optim {

/// Objective callback: returns f(x); when grad is non-null it must also fill
/// the gradient at x.
using ValueAndGrad =
    std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct BfgsOptions {
  double grad_tol = 1e-8;     // max-norm gradient threshold (absolute)
  int max_iters = 500;
  int max_evals = 100000;     // budget on objective evaluations
  double f_tol = 1e-13;       // relative improvement stall threshold
};

struct BfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  int n_iters = 0;
  bool grad_converged = false;       // met grad_tol
  bool stalled = false;              // stopped with no exploitable improvement
  std::vector<double> trace;         // f at accepted iterates, decreasing
};

/// Dense BFGS with backtracking Armijo line search. Suited to the small
/// (< ~30 parameter) smooth problems in this project.
BfgsResult bfgs_minimize(const ValueAndGrad& fn, const Eigen::VectorXd& x0,
                         const BfgsOptions& opts);

}  // namespace semavg::optim
