#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace semavg::dist {

inline constexpr double kInvSqrt2Pi = 0.39894228040143268;
inline constexpr double kLog2Pi = 1.8378770664093455;

/// Standard normal density phi(x) = exp(-x^2/2)/sqrt(2*pi).
double norm_pdf(double x);

/// Standard normal CDF, absolute error below 1e-12 over the real line.
double norm_cdf(double x);

/// log(Phi(x)), stable in the far left tail where Phi underflows.
double norm_logcdf(double x);

/// Inverse of norm_cdf on (0,1). Throws std::domain_error outside (0,1).
double norm_quantile(double p);

/// log{Phi(hi) - Phi(lo)} for lo < hi, stable when the interval sits in a
/// far tail. Bounds may be -+infinity.
double norm_interval_logprob(double lo, double hi);

class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, int pivot)
      : std::runtime_error(what), pivot_(pivot) {}
  /// Zero-based index of the first non-positive Cholesky pivot.
  int pivot() const noexcept { return pivot_; }

 private:
  int pivot_;
};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Throws SingularMatrixError naming the offending pivot otherwise.
Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& a);

/// Symmetric positive semi-definite covariance matrix. Construction through
/// from_matrix() checks symmetry (1e-12 relative) and that all eigenvalues
/// are >= -1e-10 after scaling; unchecked() skips the checks for matrices
/// produced by code that guarantees them.
class CovMatrix {
 public:
  CovMatrix() : m_(0, 0) {}  // empty until assigned

  static CovMatrix from_matrix(Eigen::MatrixXd m);
  static CovMatrix unchecked(Eigen::MatrixXd m);

  const Eigen::MatrixXd& mat() const noexcept { return m_; }
  int dim() const noexcept { return static_cast<int>(m_.rows()); }
  double operator()(int i, int j) const { return m_(i, j); }

 private:
  explicit CovMatrix(Eigen::MatrixXd m) : m_(std::move(m)) {}
  Eigen::MatrixXd m_;
};

/// Multivariate normal log density evaluated via Cholesky factorization.
double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                  const CovMatrix& cov);

struct ConditionalGaussian {
  double mean = 0.0;
  double variance = 0.0;  // >= 0
};

/// Distribution of coordinate `target_index` given the remaining coordinates
/// of a joint Gaussian. `observed` holds the non-target coordinates in
/// original order with the target removed.
ConditionalGaussian conditional_gaussian(const Eigen::VectorXd& full_mean,
                                         const CovMatrix& full_cov,
                                         int target_index,
                                         const Eigen::VectorXd& observed);

}  // namespace semavg::dist
