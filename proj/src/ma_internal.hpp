// Internal machinery for the continuous-primary super learner: per-(fold,arm)
// raw moment accumulators from which every training-complement fit and the
// cross-validated squared-error curve are assembled without materializing
// fold datasets. Shared between the public weight selection and the
// simulation harness's bootstrap loops.
#pragma once

#include <vector>

#include "semavg/model_averaging.hpp"
#include "sem_internal.hpp"

namespace semavg::detail {

class SlFoldStats {
 public:
  SlFoldStats(int V, int P)
      : V_(V),
        P_(P),
        count_(static_cast<size_t>(2 * V), 0),
        sum_(static_cast<size_t>(2 * V), Eigen::VectorXd::Zero(P)),
        cross_(static_cast<size_t>(2 * V), Eigen::MatrixXd::Zero(P, P)) {}

  template <class Derived>
  void add(int fold, int arm, const Eigen::MatrixBase<Derived>& y) {
    const size_t g = static_cast<size_t>(2 * fold + arm);
    count_[g] += 1;
    sum_[g] += y;
    cross_[g].noalias() += y * y.transpose();
  }

  int V() const { return V_; }

  /// Sufficient statistics of the whole accumulated sample.
  GaussianBlockStats totals() const;

  /// Sufficient statistics of the complement of one fold.
  GaussianBlockStats training(int fold) const;

  /// Cross-validated weight on the SEM over {0, grid_step, ..., 1}, ties
  /// toward the smaller weight. Fold fits run from sufficient statistics.
  SuperLearnerResult solve(double grid_step, const SemOptions& sem_opts) const;

 private:
  int V_, P_;
  std::vector<int> count_;
  std::vector<Eigen::VectorXd> sum_;
  std::vector<Eigen::MatrixXd> cross_;
};

/// Grid argmin of A - 2Bw + Cw^2 with ties toward the smaller weight.
double sl_grid_argmin(double qb, double qc, double grid_step);

}  // namespace semavg::detail
