#include "semavg/dist.hpp"

#include <cmath>
#include <limits>

namespace semavg::dist {

namespace {

constexpr double kSqrt1_2 = 0.70710678118654752;

// Wichura's algorithm AS 241 (PPND16), accurate to ~1e-15 over (0,1).
double ppnd16(double p) {
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    const double num =
        q * (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                   6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                 1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
               1.3314166789178437745e+2) * r + 3.3871328727963666080e+0);
    const double den =
        (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
              3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
            5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
          4.2313330701600911252e+1) * r + 1.0);
    return num / den;
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    const double num =
        (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
            3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
          4.63033784615654529590e+0) * r + 1.42343711074968357734e+0);
    const double den =
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
          2.05319162663775882187e+0) * r + 1.0);
    x = num / den;
  } else {
    r -= 5.0;
    const double num =
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
          5.46378491116411436990e+0) * r + 6.65790464350110377720e+0);
    const double den =
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
    x = num / den;
  }
  return (q < 0.0) ? -x : x;
}

// log Phi(z) for z << 0 via the asymptotic expansion
// Phi(z) = phi(z)/(-z) * [1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 - ...].
double logcdf_tail(double z) {
  const double z2 = z * z;
  const double series =
      1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2) +
      105.0 / (z2 * z2 * z2 * z2);
  return -0.5 * z2 - 0.5 * kLog2Pi - std::log(-z) + std::log(series);
}

}  // namespace

double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kSqrt1_2); }

double norm_logcdf(double x) {
  if (x < -30.0) return logcdf_tail(x);
  return std::log(norm_cdf(x));
}

double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::domain_error("norm_quantile: p must lie in (0,1)");
  return ppnd16(p);
}

double norm_interval_logprob(double lo, double hi) {
  if (!(lo < hi)) throw std::domain_error("norm_interval_logprob: lo < hi required");
  const bool lo_inf = std::isinf(lo) && lo < 0;
  const bool hi_inf = std::isinf(hi) && hi > 0;
  if (lo_inf && hi_inf) return 0.0;
  if (lo_inf) return norm_logcdf(hi);
  if (hi_inf) return norm_logcdf(-lo);
  if (hi <= 0.0) {
    const double la = norm_logcdf(lo);
    const double lb = norm_logcdf(hi);
    return lb + std::log1p(-std::exp(la - lb));
  }
  if (lo >= 0.0) {
    const double la = norm_logcdf(-hi);
    const double lb = norm_logcdf(-lo);
    return lb + std::log1p(-std::exp(la - lb));
  }
  // Interval straddles zero; the erf difference has no cancellation here.
  const double p = 0.5 * (std::erf(hi * kSqrt1_2) - std::erf(lo * kSqrt1_2));
  return std::log(p);
}

Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& a) {
  const int p = static_cast<int>(a.rows());
  if (a.cols() != p) throw std::invalid_argument("cholesky_lower: square matrix required");
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(p, p);
  for (int j = 0; j < p; ++j) {
    double d = a(j, j);
    for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw SingularMatrixError(
          "cholesky_lower: non-positive pivot at index " + std::to_string(j), j);
    l(j, j) = std::sqrt(d);
    for (int i = j + 1; i < p; ++i) {
      double s = a(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

CovMatrix CovMatrix::from_matrix(Eigen::MatrixXd m) {
  const int p = static_cast<int>(m.rows());
  if (m.cols() != p || p == 0)
    throw std::invalid_argument("CovMatrix: square nonempty matrix required");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  for (int i = 0; i < p; ++i)
    for (int j = i + 1; j < p; ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-12 * scale)
        throw std::invalid_argument("CovMatrix: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double emax = std::max(1.0, es.eigenvalues().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * emax)
    throw std::invalid_argument("CovMatrix: matrix is not positive semi-definite");
  return CovMatrix(std::move(m));
}

CovMatrix CovMatrix::unchecked(Eigen::MatrixXd m) { return CovMatrix(std::move(m)); }

double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                  const CovMatrix& cov) {
  const int p = cov.dim();
  if (x.size() != p || mean.size() != p)
    throw std::invalid_argument("mvn_logpdf: dimension mismatch");
  const Eigen::MatrixXd l = cholesky_lower(cov.mat());
  Eigen::VectorXd z = l.triangularView<Eigen::Lower>().solve(x - mean);
  double logdet = 0.0;
  for (int i = 0; i < p; ++i) logdet += std::log(l(i, i));
  return -0.5 * p * kLog2Pi - logdet - 0.5 * z.squaredNorm();
}

ConditionalGaussian conditional_gaussian(const Eigen::VectorXd& full_mean,
                                         const CovMatrix& full_cov,
                                         int target_index,
                                         const Eigen::VectorXd& observed) {
  const int p = full_cov.dim();
  if (full_mean.size() != p)
    throw std::invalid_argument("conditional_gaussian: mean dimension mismatch");
  if (target_index < 0 || target_index >= p)
    throw std::invalid_argument("conditional_gaussian: target index out of range");
  if (observed.size() != p - 1)
    throw std::invalid_argument("conditional_gaussian: observed dimension mismatch");

  if (p == 1)
    return {full_mean(0), full_cov(0, 0)};

  Eigen::VectorXd m_obs(p - 1), v_to(p - 1), resid(p - 1);
  Eigen::MatrixXd v_oo(p - 1, p - 1);
  int r = 0;
  for (int i = 0; i < p; ++i) {
    if (i == target_index) continue;
    m_obs(r) = full_mean(i);
    v_to(r) = full_cov(target_index, i);
    int c = 0;
    for (int j = 0; j < p; ++j) {
      if (j == target_index) continue;
      v_oo(r, c) = full_cov(i, j);
      ++c;
    }
    ++r;
  }
  resid = observed - m_obs;

  const Eigen::MatrixXd l = cholesky_lower(v_oo);
  // w = V_oo^{-1} v_to via two triangular solves.
  Eigen::VectorXd w = l.triangularView<Eigen::Lower>().solve(v_to);
  Eigen::VectorXd z = l.triangularView<Eigen::Lower>().solve(resid);
  const double mean = full_mean(target_index) + w.dot(z);
  const double var = full_cov(target_index, target_index) - w.squaredNorm();
  return {mean, std::max(var, 0.0)};
}

}  // namespace semavg::dist
