#include "semavg/sem.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>

#include "semavg/optim.hpp"
#include "semavg/rng.hpp"
#include "sem_internal.hpp"

namespace semavg {

namespace {

// Residual variances are parameterized as theta = floor + exp(t), a smooth
// unconstrained map that enforces the 1e-6 lower bound; a fit whose excess
// exp(t) collapses below kBoundaryExcess is flagged as a boundary (Heywood)
// solution.
constexpr double kThetaFloor = 1e-6;
constexpr double kLogBoundaryExcess = -18.420680743952367;  // log(1e-8)
constexpr double kExpCap = 300.0;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Layout {
  int P = 0;
  bool cat = false;
  int K = 0;

  int n_theta() const { return cat ? P - 1 : P; }
  int n_cuts() const { return cat ? std::max(K - 2, 0) : 0; }
  int n_free() const { return 2 * P + 1 + n_theta() + n_cuts(); }
  int i_gamma() const { return 2 * P; }
  int i_theta(int j) const { return 2 * P + 1 + j; }        // j-th free theta
  int i_cut(int j) const { return 2 * P + 1 + n_theta() + j; }
  int theta_coord(int j) const { return cat ? j + 1 : j; }  // endpoint of free theta j
};

Layout layout_for(const TrialDataset& ds) {
  Layout lay;
  lay.P = ds.n_endpoints();
  lay.cat = ds.primary().categorical();
  lay.K = lay.cat ? ds.primary().n_levels : 0;
  return lay;
}

// Log-likelihood engine over one dataset. The Gaussian block (all endpoints
// when continuous, the secondaries when the primary is categorical) enters
// only through per-arm sufficient statistics, so evaluation cost does not
// grow with n there; the categorical part loops over subjects.
class Engine {
 public:
  explicit Engine(const detail::GaussianBlockStats& stats) {
    lay_.P = stats.dim();
    lay_.cat = false;
    lay_.K = 0;
    q_ = lay_.P;
    n0_ = stats.n0;
    n1_ = stats.n1;
    n_ = stats.n();
    mean0_ = stats.mean0;
    mean1_ = stats.mean1;
    m2pool_ = stats.m2pool;
    init_workspace();
  }

  Engine(const TrialDataset& ds) : lay_(layout_for(ds)) {
    const int P = lay_.P;
    const int b0 = lay_.cat ? 1 : 0;  // first Gaussian-block coordinate
    q_ = P - b0;
    n0_ = ds.n_arm(0);
    n1_ = ds.n_arm(1);
    n_ = ds.n();

    mean0_ = Eigen::VectorXd::Zero(q_);
    mean1_ = Eigen::VectorXd::Zero(q_);
    for (int i = 0; i < n_; ++i)
      (ds.arm(i) == 0 ? mean0_ : mean1_) +=
          ds.endpoints().row(i).segment(b0, q_).transpose();
    mean0_ /= n0_;
    mean1_ /= n1_;

    m2pool_ = Eigen::MatrixXd::Zero(q_, q_);
    Eigen::VectorXd d(q_);
    for (int i = 0; i < n_; ++i) {
      d = ds.endpoints().row(i).segment(b0, q_).transpose() -
          (ds.arm(i) == 0 ? mean0_ : mean1_);
      m2pool_ += d * d.transpose();
    }

    if (lay_.cat) {
      sec_ = Eigen::MatrixXd(q_, n_);
      arm_.resize(static_cast<size_t>(n_));
      level_.resize(static_cast<size_t>(n_));
      for (int i = 0; i < n_; ++i) {
        sec_.col(i) = ds.endpoints().row(i).tail(q_).transpose();
        arm_[static_cast<size_t>(i)] = static_cast<int8_t>(ds.arm(i));
        level_[static_cast<size_t>(i)] = static_cast<int>(ds.y(i, 0));
      }
    }
    init_workspace();
  }

  const Layout& layout() const { return lay_; }
  int n() const { return n_; }
  int n0() const { return n0_; }
  int n1() const { return n1_; }
  const Eigen::VectorXd& block_mean0() const { return mean0_; }
  const Eigen::VectorXd& block_mean1() const { return mean1_; }
  const Eigen::MatrixXd& block_scatter() const { return m2pool_; }
  const std::vector<int8_t>& arms() const { return arm_; }
  const std::vector<int>& levels() const { return level_; }

  /// Log likelihood; natural-scale gradient (layout order) when gn != null.
  double eval(const SemParams& p, Eigen::VectorXd* gn) {
    if (gn) gn->setZero(lay_.n_free());
    double ll = lay_.cat ? eval_categorical(p, gn) : eval_gaussian_block(p, gn, 0);
    return ll;
  }

 private:
  // In-place Cholesky of the workspace matrix v_ into l_; false if not PD.
  bool cholesky_ws() {
    for (int j = 0; j < q_; ++j) {
      double d = v_(j, j);
      for (int k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
      if (!(d > 0.0) || !std::isfinite(d)) return false;
      l_(j, j) = std::sqrt(d);
      for (int i = j + 1; i < q_; ++i) {
        double s = v_(i, j);
        for (int k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / l_(j, j);
      }
    }
    return true;
  }

  void init_workspace() {
    v_.setZero(q_, q_);
    l_.setZero(q_, q_);
    w_.resize(q_, q_);
    m_.resize(q_, q_);
    g_.resize(q_, q_);
    d0_.resize(q_);
    d1_.resize(q_);
    wd0_.resize(q_);
    wd1_.resize(q_);
    kappa_.resize(q_);
    rbase_[0].resize(q_);
    rbase_[1].resize(q_);
    sdy_.resize(q_);
    sdr_.resize(q_);
    wsdr_.resize(q_);
    bounds_.assign(static_cast<size_t>(lay_.K + 1), 0.0);
    gcut_.assign(static_cast<size_t>(std::max(lay_.K, 1)), 0.0);
  }

  // Gaussian block likelihood/gradient. `b0` is the offset of the block in
  // the full parameter vectors (1 when the primary is categorical).
  double eval_gaussian_block(const SemParams& p, Eigen::VectorXd* gn, int b0) {
    const auto nu = p.nu.segment(b0, q_);
    const auto lambda = p.lambda.segment(b0, q_);
    const auto theta = p.theta.segment(b0, q_);

    v_.noalias() = lambda * lambda.transpose();
    v_.diagonal() += theta;
    if (!cholesky_ws()) return -kInf;
    double logdet = 0.0;
    for (int i = 0; i < q_; ++i) logdet += 2.0 * std::log(l_(i, i));
    // W = V^{-1} from the Cholesky factor.
    w_.setIdentity(q_, q_);
    l_.triangularView<Eigen::Lower>().solveInPlace(w_);
    m_.noalias() = w_.transpose() * w_;
    w_.swap(m_);

    d0_ = mean0_ - nu;
    d1_ = mean1_ - nu - p.gamma * lambda;
    wd0_.noalias() = w_ * d0_;
    wd1_.noalias() = w_ * d1_;

    const double quad = n0_ * d0_.dot(wd0_) + n1_ * d1_.dot(wd1_);
    const double trterm = (w_.cwiseProduct(m2pool_)).sum();
    const double ll =
        -0.5 * (n_ * q_ * dist::kLog2Pi + n_ * logdet + trterm + quad);
    if (!gn) return ll;

    m_ = m2pool_;
    m_.noalias() += n0_ * (d0_ * d0_.transpose());
    m_.noalias() += n1_ * (d1_ * d1_.transpose());
    g_.noalias() = w_ * m_;
    m_.noalias() = g_ * w_;  // m_ now holds W M W
    g_ = 0.5 * m_ - (0.5 * n_) * w_;

    for (int j = 0; j < q_; ++j) {
      (*gn)(b0 + j) += n0_ * wd0_(j) + n1_ * wd1_(j);
      (*gn)(lay_.P + b0 + j) +=
          p.gamma * n1_ * wd1_(j) + 2.0 * g_.row(j).dot(lambda);
    }
    (*gn)(lay_.i_gamma()) += n1_ * lambda.dot(wd1_);
    for (int j = 0; j < lay_.n_theta(); ++j) {
      const int coord = lay_.theta_coord(j);
      (*gn)(lay_.i_theta(j)) += g_(coord - b0, coord - b0);
    }
    return ll;
  }

  double eval_categorical(const SemParams& p, Eigen::VectorXd* gn) {
    double ll = eval_gaussian_block(p, gn, 1);
    if (ll == -kInf) return ll;

    const auto lsec = p.lambda.tail(q_);
    const double lam1 = p.lambda(0);

    // eval_gaussian_block left w_ = Vss^{-1} for exactly this block.
    kappa_.noalias() = w_ * lsec;
    const double c = lsec.dot(kappa_);
    const double sigma2 = 1.0 + lam1 * lam1 * (1.0 - c);
    if (!(sigma2 > 0.0)) return -kInf;
    const double sigma = std::sqrt(sigma2);

    // Interval boundaries: level k lies in (b[k], b[k+1]].
    const int K = lay_.K;
    bounds_[0] = -kInf;
    bounds_[1] = 0.0;
    for (int j = 0; j < lay_.n_cuts(); ++j)
      bounds_[static_cast<size_t>(j + 2)] = p.thresholds[static_cast<size_t>(j)];
    bounds_[static_cast<size_t>(K)] = kInf;

    double base[2], kb[2];
    for (int a = 0; a < 2; ++a) {
      base[a] = p.nu(0) + lam1 * p.gamma * a;
      rbase_[a] = -p.nu.tail(q_) - p.gamma * a * lsec;
      kb[a] = kappa_.dot(rbase_[a]);
    }

    double sd = 0.0, sda = 0.0, se = 0.0;
    double sd_arm[2] = {0.0, 0.0};
    sdy_.setZero();
    std::fill(gcut_.begin(), gcut_.end(), 0.0);

    const double log_inv_sqrt2pi = std::log(dist::kInvSqrt2Pi);
    for (int i = 0; i < n_; ++i) {
      const int a = arm_[static_cast<size_t>(i)];
      const int k = level_[static_cast<size_t>(i)];
      const double ky = kappa_.dot(sec_.col(i));
      const double mu = base[a] + lam1 * (ky + kb[a]);
      const double alpha =
          (k == 0) ? -kInf : (bounds_[static_cast<size_t>(k)] - mu) / sigma;
      const double beta =
          (k == K - 1) ? kInf : (bounds_[static_cast<size_t>(k + 1)] - mu) / sigma;
      const double logp = dist::norm_interval_logprob(alpha, beta);
      ll += logp;
      if (!gn) continue;

      const double ratio_u =
          (k == K - 1) ? 0.0
                       : std::exp(log_inv_sqrt2pi - 0.5 * beta * beta - logp);
      const double ratio_l =
          (k == 0) ? 0.0
                   : std::exp(log_inv_sqrt2pi - 0.5 * alpha * alpha - logp);
      const double di = (ratio_u - ratio_l) / sigma;
      sd += di;
      sd_arm[a] += di;
      if (a == 1) sda += di;
      sdy_.noalias() += di * sec_.col(i);
      se += (k == K - 1 ? 0.0 : ratio_u * beta) - (k == 0 ? 0.0 : ratio_l * alpha);
      if (k >= 2) gcut_[static_cast<size_t>(k)] -= ratio_l / sigma;
      if (k + 1 >= 2 && k + 1 <= K - 1)
        gcut_[static_cast<size_t>(k + 1)] += ratio_u / sigma;
    }
    if (!std::isfinite(ll)) return -kInf;
    if (!gn) return ll;

    sdr_ = sdy_ + sd_arm[0] * rbase_[0] + sd_arm[1] * rbase_[1];
    wsdr_.noalias() = w_ * sdr_;
    const double ksdr = kappa_.dot(sdr_);
    const double one_c = 1.0 - c;

    (*gn)(0) += -sd;                                        // nu_1
    (*gn)(lay_.P) += -(p.gamma * sda + ksdr) -              // lambda_1
                     se * lam1 * one_c / sigma2;
    (*gn)(lay_.i_gamma()) += -lam1 * one_c * sda;
    for (int j = 0; j < q_; ++j) {
      (*gn)(1 + j) += lam1 * sd * kappa_(j);                // nu of secondaries
      (*gn)(lay_.P + 1 + j) +=                              // lambda of secondaries
          -lam1 * (one_c * wsdr_(j) - kappa_(j) * ksdr - kappa_(j) * p.gamma * sda) +
          se * lam1 * lam1 * kappa_(j) * one_c / sigma2;
      (*gn)(lay_.i_theta(j)) +=                             // theta of secondaries
          lam1 * kappa_(j) * wsdr_(j) -
          se * lam1 * lam1 * kappa_(j) * kappa_(j) / (2.0 * sigma2);
    }
    for (int j = 0; j < lay_.n_cuts(); ++j)
      (*gn)(lay_.i_cut(j)) += gcut_[static_cast<size_t>(j + 2)];
    return ll;
  }

  Layout lay_;
  int q_ = 0;
  int n_ = 0, n0_ = 0, n1_ = 0;
  Eigen::VectorXd mean0_, mean1_;
  Eigen::MatrixXd m2pool_;
  Eigen::MatrixXd sec_;  // q x n, one column per subject (categorical only)
  std::vector<int8_t> arm_;
  std::vector<int> level_;

  // Evaluation workspace; one Engine per concurrent fit.
  Eigen::MatrixXd v_, l_, w_, m_, g_;
  Eigen::VectorXd d0_, d1_, wd0_, wd1_;
  Eigen::VectorXd kappa_, rbase_[2], sdy_, sdr_, wsdr_;
  std::vector<double> bounds_, gcut_;
};

void unpack_into(const Layout& lay, const Eigen::VectorXd& x, SemParams& p) {
  p.nu = x.head(lay.P);
  p.lambda = x.segment(lay.P, lay.P);
  p.gamma = x(lay.i_gamma());
  p.theta.setOnes(lay.P);
  for (int j = 0; j < lay.n_theta(); ++j)
    p.theta(lay.theta_coord(j)) =
        kThetaFloor + std::exp(std::min(x(lay.i_theta(j)), kExpCap));
  p.thresholds.resize(static_cast<size_t>(lay.n_cuts()));
  double cut = 0.0;
  for (int j = 0; j < lay.n_cuts(); ++j) {
    cut += std::exp(std::min(x(lay.i_cut(j)), kExpCap));
    p.thresholds[static_cast<size_t>(j)] = cut;
  }
}

SemParams unpack_x(const Layout& lay, const Eigen::VectorXd& x) {
  SemParams p;
  unpack_into(lay, x, p);
  return p;
}

Eigen::VectorXd pack_params(const Layout& lay, const SemParams& p) {
  if (p.P() != lay.P || p.lambda.size() != lay.P || p.theta.size() != lay.P)
    throw std::invalid_argument("SemParams dimensions do not match the dataset");
  if (static_cast<int>(p.thresholds.size()) != lay.n_cuts())
    throw std::invalid_argument("SemParams has the wrong number of thresholds");
  Eigen::VectorXd x(lay.n_free());
  x.head(lay.P) = p.nu;
  x.segment(lay.P, lay.P) = p.lambda;
  x(lay.i_gamma()) = p.gamma;
  for (int j = 0; j < lay.n_theta(); ++j) {
    const double t = p.theta(lay.theta_coord(j));
    if (!(t > 0.0))
      throw std::invalid_argument("residual variances must be positive");
    x(lay.i_theta(j)) = std::log(std::max(t - kThetaFloor, 1e-300));
  }
  double prev = 0.0;
  for (int j = 0; j < lay.n_cuts(); ++j) {
    const double cut = p.thresholds[static_cast<size_t>(j)];
    if (!(cut > prev))
      throw std::invalid_argument("thresholds must be strictly increasing above 0");
    x(lay.i_cut(j)) = std::log(cut - prev);
    prev = cut;
  }
  return x;
}

// Chain rule from the natural gradient to the transformed scale.
void chain_to_transformed(const Layout& lay, const Eigen::VectorXd& x,
                          Eigen::VectorXd& g) {
  for (int j = 0; j < lay.n_theta(); ++j)
    g(lay.i_theta(j)) *= std::exp(std::min(x(lay.i_theta(j)), kExpCap));
  // cut_j = sum of gaps up to j: suffix-sum then scale by each gap.
  double suffix = 0.0;
  for (int j = lay.n_cuts() - 1; j >= 0; --j) {
    suffix += g(lay.i_cut(j));
    g(lay.i_cut(j)) = suffix * std::exp(std::min(x(lay.i_cut(j)), kExpCap));
  }
}

}  // namespace

struct SemObjective::Impl {
  Impl(const TrialDataset& ds, bool analytic)
      : engine(ds), analytic_gradient(analytic) {}
  Impl(const detail::GaussianBlockStats& stats, bool analytic)
      : engine(stats), analytic_gradient(analytic) {}

  double value(const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    ++n_evals;
    unpack_into(engine.layout(), x, scratch_);
    const SemParams& p = scratch_;
    if (!grad) {
      const double ll = engine.eval(p, nullptr);
      return -ll;
    }
    if (analytic_gradient) {
      const double ll = engine.eval(p, &gn_);
      if (!std::isfinite(ll)) {
        grad->setZero(engine.layout().n_free());
        return kInf;
      }
      chain_to_transformed(engine.layout(), x, gn_);
      *grad = -gn_;
      return -ll;
    }
    // Central finite differences of the exact log likelihood.
    const double f = -engine.eval(p, nullptr);
    const int k = engine.layout().n_free();
    grad->resize(k);
    Eigen::VectorXd xp = x;
    for (int j = 0; j < k; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
      xp(j) = x(j) + h;
      const double fp = -engine.eval(unpack_x(engine.layout(), xp), nullptr);
      xp(j) = x(j) - h;
      const double fm = -engine.eval(unpack_x(engine.layout(), xp), nullptr);
      xp(j) = x(j);
      (*grad)(j) = (fp - fm) / (2.0 * h);
      n_evals += 2;
    }
    return f;
  }

  Engine engine;
  bool analytic_gradient;
  int n_evals = 0;
  SemParams scratch_;
  Eigen::VectorXd gn_;
};

SemObjective::SemObjective(const TrialDataset& ds, bool analytic_gradient)
    : impl_(std::make_unique<Impl>(ds, analytic_gradient)) {}
SemObjective::~SemObjective() = default;
SemObjective::SemObjective(SemObjective&&) noexcept = default;

int SemObjective::dim() const { return impl_->engine.layout().n_free(); }

double SemObjective::operator()(const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
  return impl_->value(x, grad);
}

Eigen::VectorXd SemObjective::pack(const SemParams& p) const {
  return pack_params(impl_->engine.layout(), p);
}

SemParams SemObjective::unpack(const Eigen::VectorXd& x) const {
  return unpack_x(impl_->engine.layout(), x);
}

ImpliedMoments implied_moments(const SemParams& p, int arm) {
  if (arm != 0 && arm != 1) throw std::invalid_argument("arm must be 0 or 1");
  ImpliedMoments m;
  m.mean = p.nu + p.gamma * static_cast<double>(arm) * p.lambda;
  Eigen::MatrixXd v = p.lambda * p.lambda.transpose();
  v.diagonal() += p.theta;
  m.cov = dist::CovMatrix::unchecked(std::move(v));
  return m;
}

double sem_loglik(const SemParams& p, const TrialDataset& ds) {
  if (p.P() != ds.n_endpoints())
    throw std::invalid_argument("sem_loglik: parameter dimension mismatch");
  Engine engine(ds);
  return engine.eval(p, nullptr);
}

namespace {

// Leading eigenpair by power iteration; enough for starting values.
std::pair<double, Eigen::VectorXd> leading_eigpair(const Eigen::MatrixXd& m) {
  const int p = static_cast<int>(m.rows());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(p).normalized();
  double eval = 0.0;
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd w = m * v;
    const double norm = w.norm();
    if (norm < 1e-300) break;
    w /= norm;
    if ((w - v).norm() < 1e-13) {
      v = w;
      break;
    }
    v = w;
  }
  eval = v.dot(m * v);
  return {std::max(eval, 1e-6), v};
}

double clamp_prob(double p, double lo = 0.02) {
  return std::min(std::max(p, lo), 1.0 - lo);
}

SemParams default_start(const Engine& engine) {
  const Layout& lay = engine.layout();
  const int P = lay.P;
  const int q = lay.cat ? P - 1 : P;
  // Unbiased pooled covariance of the Gaussian block.
  const Eigen::MatrixXd pooled =
      engine.block_scatter() / std::max(engine.n() - 2, 1);
  const Eigen::VectorXd d = engine.block_mean1() - engine.block_mean0();

  SemParams s;
  s.nu = Eigen::VectorXd::Zero(P);
  s.lambda = Eigen::VectorXd::Zero(P);
  s.theta = Eigen::VectorXd::Ones(P);
  s.nu.tail(q) = engine.block_mean0();

  auto [eval, evec] = leading_eigpair(pooled);
  Eigen::VectorXd lam = std::sqrt(eval) * evec;
  if (lam(0) < 0.0) lam = -lam;
  s.lambda.tail(q) = lam;
  s.gamma = lam.dot(d) / std::max(lam.squaredNorm(), 1e-12);
  for (int j = 0; j < q; ++j)
    s.theta(P - q + j) = std::max(pooled(j, j) - lam(j) * lam(j), 0.05);

  if (!lay.cat) return s;

  // Categorical primary: latent-scale intercept and cuts from arm-0 level
  // rates, neutral unit loading on the latent coordinate.
  s.lambda(0) = 1.0;
  s.theta(0) = 1.0;
  const int K = lay.K;
  std::vector<double> counts(static_cast<size_t>(K), 0.0);
  double n0 = 0.0;
  for (size_t i = 0; i < engine.arms().size(); ++i) {
    if (engine.arms()[i] != 0) continue;
    counts[static_cast<size_t>(engine.levels()[i])] += 1.0;
    n0 += 1.0;
  }
  const double scale = std::sqrt(1.0 + s.lambda(0) * s.lambda(0));
  const double f0 = clamp_prob(counts[0] / n0);
  // Pr(Y* > 0 | A=0) = Phi(nu_1 / scale) = 1 - F(0).
  s.nu(0) = scale * dist::norm_quantile(1.0 - f0);
  s.thresholds.resize(static_cast<size_t>(lay.n_cuts()));
  double cum = counts[0];
  double prev = 0.0;
  for (int j = 0; j < lay.n_cuts(); ++j) {
    cum += counts[static_cast<size_t>(j + 1)];
    const double fk = clamp_prob(cum / n0);
    double cut = s.nu(0) + scale * dist::norm_quantile(fk);
    cut = std::max(cut, prev + 1e-3);
    s.thresholds[static_cast<size_t>(j)] = cut;
    prev = cut;
  }
  return s;
}

SemParams jitter_start(const SemParams& base, RngStream rng) {
  SemParams s = base;
  for (int p = 0; p < s.P(); ++p) {
    s.nu(p) += 0.2 * rng.normal();
    s.lambda(p) *= (1.0 + 0.4 * rng.normal());
    s.theta(p) = std::max(s.theta(p) * std::exp(0.5 * rng.normal()), 0.01);
  }
  s.gamma = s.gamma * (1.0 + 0.4 * rng.normal()) + 0.1 * rng.normal();
  double prev = 0.0;
  for (auto& cut : s.thresholds) {
    const double gap = (cut - prev) * std::exp(0.3 * rng.normal());
    cut = prev + std::max(gap, 1e-4);
    prev = cut;
  }
  return s;
}

struct Attempt {
  optim::BfgsResult opt;
  bool boundary = false;

  // A fit pinned at the variance floor sits in a valley whose curvature
  // (~1/theta^2) makes the gradient criterion unattainable in double
  // precision; a stall there is the constrained optimum.
  bool accepted() const {
    return opt.grad_converged || (boundary && opt.stalled);
  }
};

bool theta_at_floor(const Layout& lay, const Eigen::VectorXd& x) {
  for (int j = 0; j < lay.n_theta(); ++j)
    if (x(lay.i_theta(j)) <= kLogBoundaryExcess) return true;
  return false;
}

// Observed-information covariance of the free parameters: central differences
// of the gradient at the optimum (step 1e-4 on the transformed scale), mapped
// to the natural scale through the transformation Jacobian.
Eigen::MatrixXd observed_info_cov(SemObjective::Impl& obj, const Layout& lay,
                                  const Eigen::VectorXd& x,
                                  std::vector<std::string>& flags) {
  const int k = lay.n_free();
  const double h = 1e-4;
  Eigen::MatrixXd hess(k, k);
  Eigen::VectorXd xp = x, gp(k), gm(k);
  for (int j = 0; j < k; ++j) {
    xp(j) = x(j) + h;
    obj.value(xp, &gp);
    xp(j) = x(j) - h;
    obj.value(xp, &gm);
    xp(j) = x(j);
    hess.col(j) = (gp - gm) / (2.0 * h);
  }
  hess = 0.5 * (hess + hess.transpose()).eval();

  Eigen::MatrixXd cov_t;
  double ridge = 0.0;
  const double diag_scale =
      std::max(hess.diagonal().cwiseAbs().maxCoeff(), 1e-8);
  for (int attempt = 0; attempt < 6; ++attempt) {
    Eigen::MatrixXd h_r = hess;
    if (ridge > 0.0) h_r.diagonal().array() += ridge * diag_scale;
    Eigen::LLT<Eigen::MatrixXd> llt(h_r);
    if (llt.info() == Eigen::Success) {
      cov_t = llt.solve(Eigen::MatrixXd::Identity(k, k));
      if (ridge > 0.0) flags.push_back("information-ridge");
      break;
    }
    ridge = (ridge == 0.0) ? 1e-10 : ridge * 100.0;
  }
  if (cov_t.size() == 0) {
    flags.push_back("information-singular");
    cov_t = Eigen::MatrixXd::Zero(k, k);
  }

  // Natural-scale Jacobian: identity apart from theta rows (d theta/d log
  // theta = theta) and the threshold block (cut_j = cumulative gaps).
  Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(k, k);
  for (int j = 0; j < lay.n_theta(); ++j)
    jac(lay.i_theta(j), lay.i_theta(j)) =
        std::exp(std::min(x(lay.i_theta(j)), kExpCap));
  for (int j = 0; j < lay.n_cuts(); ++j)
    for (int mcol = 0; mcol <= j; ++mcol)
      jac(lay.i_cut(j), lay.i_cut(mcol)) =
          std::exp(std::min(x(lay.i_cut(mcol)), kExpCap));
  return jac * cov_t * jac.transpose();
}

SemFit fit_core(SemObjective::Impl& impl, const SemOptions& opts) {
  const Layout lay = impl.engine.layout();

  optim::BfgsOptions bopts;
  bopts.grad_tol = opts.grad_tol * impl.engine.n();
  bopts.max_evals = opts.max_evals;

  auto run = [&](const SemParams& start) {
    Attempt a;
    a.opt = optim::bfgs_minimize(
        [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
          return impl.value(x, g);
        },
        pack_params(lay, start), bopts);
    a.boundary = theta_at_floor(lay, a.opt.x);
    return a;
  };

  std::optional<SemParams> det;
  auto det_start = [&]() -> const SemParams& {
    if (!det) det = default_start(impl.engine);
    return *det;
  };

  std::vector<Attempt> attempts;
  attempts.push_back(run(opts.warm_start ? *opts.warm_start : det_start()));

  const bool first_clean =
      attempts[0].opt.grad_converged && !attempts[0].boundary;
  if (!first_clean) {
    if (opts.warm_start) attempts.push_back(run(det_start()));
    RngStream jrng = RngStream::from_seed(opts.jitter_seed);
    for (int j = 0; j < opts.extra_starts; ++j)
      attempts.push_back(
          run(jitter_start(det_start(), jrng.derive(static_cast<uint64_t>(j)))));
  }

  // Best log likelihood wins; converged attempts take precedence.
  int best = -1;
  for (size_t i = 0; i < attempts.size(); ++i) {
    const auto& a = attempts[i];
    if (!std::isfinite(a.opt.f)) continue;
    if (best < 0) {
      best = static_cast<int>(i);
      continue;
    }
    const auto& b = attempts[static_cast<size_t>(best)];
    if (a.accepted() != b.accepted()) {
      if (a.accepted()) best = static_cast<int>(i);
    } else if (a.opt.f < b.opt.f) {
      best = static_cast<int>(i);
    }
  }

  SemFit fit;
  fit.P = lay.P;
  fit.categorical = lay.cat;
  fit.K = lay.K;
  fit.n_params = lay.n_free();
  fit.n_evals = impl.n_evals;
  if (best < 0) {
    fit.params = det_start();
    fit.loglik = -kInf;
    fit.status = SemStatus::Failed;
    fit.flags.push_back("no-finite-evaluation");
    return fit;
  }

  Attempt& chosen = attempts[static_cast<size_t>(best)];
  Eigen::VectorXd x = chosen.opt.x;
  SemParams p = unpack_x(lay, x);

  // Sign convention: loading of the first continuous endpoint nonnegative,
  // applied as a joint sign flip of (gamma, lambda) which leaves the
  // likelihood unchanged.
  const int first_cont = lay.cat ? 1 : 0;
  if (p.lambda(first_cont) < 0.0) {
    p.lambda = -p.lambda;
    p.gamma = -p.gamma;
    x = pack_params(lay, p);
  }

  fit.params = p;
  fit.loglik = -chosen.opt.f;
  fit.trace.reserve(chosen.opt.trace.size());
  for (double f : chosen.opt.trace) fit.trace.push_back(-f);
  if (!chosen.accepted()) {
    fit.status = SemStatus::Failed;
    fit.flags.push_back("no-convergence");
  } else {
    fit.status = chosen.boundary ? SemStatus::Boundary : SemStatus::Converged;
    if (chosen.boundary) fit.flags.push_back("boundary");
  }

  if (opts.compute_param_cov && fit.status != SemStatus::Failed)
    fit.param_cov = observed_info_cov(impl, lay, x, fit.flags);
  fit.n_evals = impl.n_evals;
  return fit;
}

}  // namespace

SemFit fit_sem(const TrialDataset& ds, const SemOptions& opts) {
  SemObjective::Impl impl(ds, opts.analytic_gradient);
  return fit_core(impl, opts);
}

namespace detail {

SemFit fit_sem_stats(const GaussianBlockStats& stats, const SemOptions& opts) {
  SemObjective::Impl impl(stats, opts.analytic_gradient);
  return fit_core(impl, opts);
}

double saturated_loglik_stats(const GaussianBlockStats& stats) {
  const int p = stats.dim();
  const int n = stats.n();
  const Eigen::MatrixXd sigma = stats.m2pool / n;
  const Eigen::MatrixXd l = dist::cholesky_lower(sigma);
  double logdet = 0.0;
  for (int i = 0; i < p; ++i) logdet += 2.0 * std::log(l(i, i));
  return -0.5 * n * (p * dist::kLog2Pi + logdet + p);
}

}  // namespace detail

double sem_ate_continuous(const SemParams& p) { return p.gamma * p.lambda(0); }

double sem_ate_binary(const SemParams& p) {
  const double s = std::sqrt(1.0 + p.lambda(0) * p.lambda(0));
  return dist::norm_cdf((p.nu(0) + p.gamma * p.lambda(0)) / s) -
         dist::norm_cdf(p.nu(0) / s);
}

double sem_probit_coefficient(const SemParams& p) {
  return p.gamma * p.lambda(0) / std::sqrt(1.0 + p.lambda(0) * p.lambda(0));
}

namespace {

std::vector<double> level_probs(const SemParams& p, int n_levels, int arm) {
  const double s = std::sqrt(1.0 + p.lambda(0) * p.lambda(0));
  const double m = p.nu(0) + p.gamma * p.lambda(0) * arm;
  std::vector<double> probs(static_cast<size_t>(n_levels));
  double prev_cdf = 0.0;
  for (int k = 0; k < n_levels; ++k) {
    double upper_cdf;
    if (k == n_levels - 1)
      upper_cdf = 1.0;
    else {
      const double cut = (k == 0) ? 0.0 : p.thresholds[static_cast<size_t>(k - 1)];
      upper_cdf = dist::norm_cdf((cut - m) / s);
    }
    probs[static_cast<size_t>(k)] = upper_cdf - prev_cdf;
    prev_cdf = upper_cdf;
  }
  return probs;
}

}  // namespace

double sem_concordance(const SemParams& p, int n_levels) {
  const std::vector<double> p1 = level_probs(p, n_levels, 1);
  const std::vector<double> p0 = level_probs(p, n_levels, 0);
  double conc = 0.0;
  for (int k = 0; k < n_levels; ++k) {
    for (int j = 0; j < k; ++j)
      conc += p1[static_cast<size_t>(k)] * p0[static_cast<size_t>(j)];
    conc += 0.5 * p1[static_cast<size_t>(k)] * p0[static_cast<size_t>(k)];
  }
  return conc;
}

double sem_primary_prediction(const SemParams& p, EndpointKind kind, int arm) {
  switch (kind) {
    case EndpointKind::Continuous:
      return p.nu(0) + p.gamma * p.lambda(0) * arm;
    case EndpointKind::Binary: {
      const double s = std::sqrt(1.0 + p.lambda(0) * p.lambda(0));
      return dist::norm_cdf((p.nu(0) + p.gamma * p.lambda(0) * arm) / s);
    }
    case EndpointKind::Ordinal:
      throw ValidationError("no scalar prediction for an ordinal primary");
  }
  return 0.0;
}

namespace {

void require_converged(const SemFit& fit) {
  if (fit.status == SemStatus::Failed)
    throw FitError("SEM fit did not converge");
}

EstimateResult make_result(const SemFit& fit, const std::string& estimand,
                           double est, double var) {
  EstimateResult r;
  r.method = "SEM";
  r.estimand = estimand;
  r.estimate = est;
  r.std_error = std::sqrt(std::max(var, 0.0));
  r.ci_low = est - kWald95 * r.std_error;
  r.ci_high = est + kWald95 * r.std_error;
  r.flags = fit.flags;
  return r;
}

double cov2_quad(const SemFit& fit, int i, int j, double gi, double gj) {
  const auto& c = fit.param_cov;
  return gi * gi * c(i, i) + 2.0 * gi * gj * c(i, j) + gj * gj * c(j, j);
}

}  // namespace

EstimateResult ate_sem_continuous(const SemFit& fit) {
  require_converged(fit);
  if (fit.categorical)
    throw ValidationError("ate_sem_continuous requires a continuous primary");
  const double gamma = fit.params.gamma, lam1 = fit.params.lambda(0);
  const double var =
      cov2_quad(fit, fit.idx_gamma(), fit.idx_lambda(0), lam1, gamma);
  return make_result(fit, "ATE", sem_ate_continuous(fit.params), var);
}

EstimateResult ate_sem_binary(const SemFit& fit) {
  require_converged(fit);
  if (fit.K != 2)
    throw ValidationError("ate_sem_binary requires a binary primary");
  const double gamma = fit.params.gamma, nu1 = fit.params.nu(0),
               lam1 = fit.params.lambda(0);
  const double s = std::sqrt(1.0 + lam1 * lam1);
  const double z1 = (nu1 + gamma * lam1) / s;
  const double z0 = nu1 / s;
  const double phi1 = dist::norm_pdf(z1), phi0 = dist::norm_pdf(z0);
  const double s3 = s * s * s;
  // Jacobian over (gamma, nu_1, lambda_1).
  Eigen::Vector3d j;
  j(0) = phi1 * lam1 / s;
  j(1) = phi1 / s - phi0 / s;
  j(2) = phi1 * (gamma - nu1 * lam1) / s3 - phi0 * (-nu1 * lam1) / s3;
  const int idx[3] = {fit.idx_gamma(), fit.idx_nu(0), fit.idx_lambda(0)};
  double var = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) var += j(a) * j(b) * fit.param_cov(idx[a], idx[b]);
  return make_result(fit, "ATE", sem_ate_binary(fit.params), var);
}

EstimateResult probit_coefficient(const SemFit& fit) {
  require_converged(fit);
  if (!fit.categorical)
    throw ValidationError("probit_coefficient requires a categorical primary");
  const double gamma = fit.params.gamma, lam1 = fit.params.lambda(0);
  const double s = std::sqrt(1.0 + lam1 * lam1);
  const double dg = lam1 / s;
  const double dl = gamma / (s * s * s);
  const double var = cov2_quad(fit, fit.idx_gamma(), fit.idx_lambda(0), dg, dl);
  return make_result(fit, "probit-coefficient", sem_probit_coefficient(fit.params),
                     var);
}

namespace {

// Numerical delta method over all free parameters for estimands without a
// closed-form Jacobian.
double numeric_delta_var(const SemFit& fit,
                         const std::function<double(const SemParams&)>& f) {
  const int k = fit.n_params;
  Eigen::VectorXd grad(k);
  for (int i = 0; i < k; ++i) {
    SemParams hi = fit.params, lo = fit.params;
    double step = 1e-6;
    auto bump = [&](SemParams& p, double sgn) {
      if (i < fit.P) {
        p.nu(i) += sgn * step;
      } else if (i < 2 * fit.P) {
        p.lambda(i - fit.P) += sgn * step;
      } else if (i == fit.idx_gamma()) {
        p.gamma += sgn * step;
      } else {
        const int base = 2 * fit.P + 1;
        const int n_theta = fit.categorical ? fit.P - 1 : fit.P;
        if (i < base + n_theta) {
          const int coord = fit.categorical ? i - base + 1 : i - base;
          p.theta(coord) += sgn * step;
        } else {
          p.thresholds[static_cast<size_t>(i - base - n_theta)] += sgn * step;
        }
      }
    };
    bump(hi, 1.0);
    bump(lo, -1.0);
    grad(i) = (f(hi) - f(lo)) / (2.0 * step);
  }
  return grad.dot(fit.param_cov * grad);
}

}  // namespace

EstimateResult concordance(const SemFit& fit) {
  require_converged(fit);
  if (!fit.categorical)
    throw ValidationError("concordance requires a categorical primary");
  const int K = fit.K;
  const double est = sem_concordance(fit.params, K);
  const double var = numeric_delta_var(
      fit, [K](const SemParams& p) { return sem_concordance(p, K); });
  return make_result(fit, "concordance", est, var);
}

double bic_sem(const SemFit& fit, double n) {
  require_converged(fit);
  return -2.0 * fit.loglik + fit.n_params * std::log(n);
}

}  // namespace semavg
