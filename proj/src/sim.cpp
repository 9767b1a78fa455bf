#include "semavg/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "semavg/bootstrap.hpp"
#include "semavg/model_averaging.hpp"
#include "semavg/parallel.hpp"
#include "semavg/saturated.hpp"
#include "ma_internal.hpp"
#include "sem_internal.hpp"

namespace semavg {

namespace {

constexpr uint64_t kDataTag = 1;
constexpr uint64_t kSlTag = 2;
constexpr uint64_t kBootTag = 3;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

TrialDataset draw_mvn(const Eigen::Vector3d& mean0, const Eigen::Vector3d& mean1,
                      const Eigen::Matrix3d& cov, int n, RngStream& rng,
                      std::vector<EndpointSpec> specs, bool dichotomize_first,
                      const std::string& where) {
  Eigen::MatrixXd l;
  try {
    l = dist::cholesky_lower(cov);
  } catch (const dist::SingularMatrixError&) {
    throw ScenarioError(where + ": covariance matrix is not positive definite");
  }
  const int n0 = n / 2;
  std::vector<int> arm(static_cast<size_t>(n));
  Eigen::MatrixXd y(n, 3);
  Eigen::Vector3d z;
  for (int i = 0; i < n; ++i) {
    const int a = (i < n0) ? 0 : 1;
    arm[static_cast<size_t>(i)] = a;
    z << rng.normal(), rng.normal(), rng.normal();
    Eigen::Vector3d row = (a == 0 ? mean0 : mean1) + l * z;
    if (dichotomize_first) row(0) = row(0) > 0.0 ? 1.0 : 0.0;
    y.row(i) = row.transpose();
  }
  return TrialDataset::unchecked(std::move(arm), std::move(y), std::move(specs));
}

std::vector<EndpointSpec> continuous_specs() {
  return {EndpointSpec::continuous("y1"), EndpointSpec::continuous("y2"),
          EndpointSpec::continuous("y3")};
}

}  // namespace

Scenario parse_scenario(const std::string& token) {
  if (token == "A") return Scenario::A;
  if (token == "B1") return Scenario::B1;
  if (token == "B2") return Scenario::B2;
  if (token == "C") return Scenario::C;
  throw ValidationError("unknown scenario '" + token + "' (expected A, B1, B2, C)");
}

std::string scenario_label(Scenario s) {
  switch (s) {
    case Scenario::A: return "A";
    case Scenario::B1: return "B1";
    case Scenario::B2: return "B2";
    case Scenario::C: return "C";
  }
  return "?";
}

TrialDataset gen_sim_a(double c12, Hypothesis hyp, int n, RngStream rng) {
  const Eigen::Vector3d beta(0.25, 0.35, 0.30);
  const double gamma = std::sqrt(0.25 * 0.35 / c12);
  const Eigen::Vector3d lambda = beta / gamma;
  for (int p = 0; p < 3; ++p)
    if (!(lambda(p) < 1.0))
      throw ScenarioError("sim A: c12=" + std::to_string(c12) +
                          " implies a loading >= 1 (no valid factor model)");
  Eigen::Matrix3d cov = lambda * lambda.transpose();
  for (int p = 0; p < 3; ++p) cov(p, p) = 1.0;
  const Eigen::Vector3d mean1 =
      (hyp == Hypothesis::Alternative) ? beta : Eigen::Vector3d::Zero();
  return draw_mvn(Eigen::Vector3d::Zero(), mean1, cov, n, rng, continuous_specs(),
                  false, "sim A");
}

TrialDataset gen_sim_b(BVariant variant, double s, int n, RngStream rng) {
  Eigen::Matrix3d cov;
  if (variant == BVariant::B2GlobalNull) {
    cov << 1.0, 0.35 * s, 0.30,
           0.35 * s, 1.0, 0.42,
           0.30, 0.42, 1.0;
  } else {
    cov << 1.0, 0.35 * s, 0.30 * s,
           0.35 * s, 1.0, 0.42,
           0.30 * s, 0.42, 1.0;
  }
  Eigen::Vector3d mean1;
  switch (variant) {
    case BVariant::B1Alt: mean1 << 0.25, 0.35, 0.30; break;
    case BVariant::B1NullPrimary: mean1 << 0.0, 0.35, 0.30; break;
    case BVariant::B2GlobalNull: mean1.setZero(); break;
  }
  return draw_mvn(Eigen::Vector3d::Zero(), mean1, cov, n, rng, continuous_specs(),
                  false, "sim B (s=" + std::to_string(s) + ")");
}

TrialDataset gen_sim_c(double s, Hypothesis hyp, int n, RngStream rng) {
  Eigen::Matrix3d cov;
  cov << 1.0, 0.51 * s, 0.43 * s,
         0.51 * s, 1.0, 0.42,
         0.43 * s, 0.42, 1.0;
  const double nu1 = dist::norm_quantile(0.15);
  const double beta1 = (hyp == Hypothesis::Alternative)
                           ? dist::norm_quantile(0.25) - nu1
                           : 0.0;
  const Eigen::Vector3d mean0(nu1, 0.0, 0.0);
  const Eigen::Vector3d mean1(nu1 + beta1, 0.35, 0.30);
  std::vector<EndpointSpec> specs = {EndpointSpec::binary("y1"),
                                     EndpointSpec::continuous("y2"),
                                     EndpointSpec::continuous("y3")};
  return draw_mvn(mean0, mean1, cov, n, rng, std::move(specs), true,
                  "sim C (s=" + std::to_string(s) + ")");
}

TrialDataset generate(const SimScenario& scn, RngStream rng) {
  switch (scn.label) {
    case Scenario::A: return gen_sim_a(scn.shape, scn.hyp, scn.n, rng);
    case Scenario::B1:
      return gen_sim_b(scn.hyp == Hypothesis::Alternative ? BVariant::B1Alt
                                                          : BVariant::B1NullPrimary,
                       scn.shape, scn.n, rng);
    case Scenario::B2: return gen_sim_b(BVariant::B2GlobalNull, scn.shape, scn.n, rng);
    case Scenario::C: return gen_sim_c(scn.shape, scn.hyp, scn.n, rng);
  }
  throw ScenarioError("unreachable scenario");
}

double true_ate(const SimScenario& scn) {
  switch (scn.label) {
    case Scenario::A:
      return scn.hyp == Hypothesis::Alternative ? 0.25 : 0.0;
    case Scenario::B1:
      return scn.hyp == Hypothesis::Alternative ? 0.25 : 0.0;
    case Scenario::B2:
      return 0.0;
    case Scenario::C: {
      if (scn.hyp != Hypothesis::Alternative) return 0.0;
      const double nu1 = dist::norm_quantile(0.15);
      const double b1 = dist::norm_quantile(0.25) - nu1;
      return dist::norm_cdf(nu1 + b1) - dist::norm_cdf(nu1);
    }
  }
  return 0.0;
}

namespace {

struct RepCell {
  double est = kNan, se = kNan, omega = kNan;
  bool ok = false, covered = false, rejected = false;
};

struct RepResult {
  RepCell cell[4];  // indexed by EstimatorKind order
};

int kind_index(EstimatorKind k) { return static_cast<int>(k); }

void wald_decide(RepCell& c, double tau0) {
  c.covered = std::abs(c.est - tau0) <= kWald95 * c.se;
  c.rejected = std::abs(c.est) > kWald95 * c.se;
}

RepResult run_replicate(const TrialDataset& ds,
                        double tau0, const std::vector<EstimatorKind>& kinds,
                        const McOptions& opts, RngStream rep_rng) {
  RepResult out;
  const bool binary = ds.primary().kind == EndpointKind::Binary;
  auto wants = [&](EstimatorKind k) {
    return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
  };

  if (wants(EstimatorKind::Saturated)) {
    RepCell& c = out.cell[kind_index(EstimatorKind::Saturated)];
    EstimateResult r;
    if (binary) {
      r = ate_saturated_binary(ds);
    } else {
      const SaturatedFit f = fit_saturated(ds);
      r = ate_saturated(f, ds);
    }
    c.est = r.estimate;
    c.se = r.std_error;
    c.ok = true;
    wald_decide(c, tau0);
  }

  const bool want_sem = wants(EstimatorKind::Sem);
  const bool want_bic = wants(EstimatorKind::BicMa);
  const bool want_sl = wants(EstimatorKind::SlMa);
  if (!(want_sem || want_bic || want_sl)) return out;

  SemOptions sem_opts = opts.sem;
  sem_opts.compute_param_cov = want_sem;
  const SemFit fit = fit_sem(ds, sem_opts);
  if (fit.status == SemStatus::Failed) return out;  // sem/bic/sl all failed

  const double t_sem = tau_sem_from_fit(fit);
  if (want_sem) {
    RepCell& c = out.cell[kind_index(EstimatorKind::Sem)];
    const EstimateResult r = binary ? ate_sem_binary(fit) : ate_sem_continuous(fit);
    c.est = r.estimate;
    c.se = r.std_error;
    c.ok = true;
    wald_decide(c, tau0);
  }
  if (!(want_bic || want_sl)) return out;

  const double t_sat = tau_saturated(ds);
  SemOptions warm_opts = opts.sem;
  warm_opts.compute_param_cov = false;
  warm_opts.warm_start = fit.params;
  warm_opts.extra_starts = 2;

  RepCell& cb = out.cell[kind_index(EstimatorKind::BicMa)];
  RepCell& cs = out.cell[kind_index(EstimatorKind::SlMa)];
  if (want_bic) {
    cb.omega = omega_bic(bic_sem(fit, ds.n()), saturated_bic(ds));
    cb.est = combine(cb.omega, t_sem, t_sat).tau_ma;
  }
  if (want_sl) {
    cs.omega = omega_super_learner(ds, opts.folds, opts.grid_step,
                                   rep_rng.derive(kSlTag).key(), warm_opts)
                   .omega;
    cs.est = combine(cs.omega, t_sem, t_sat).tau_ma;
  }

  // bootstrap_B == 0: point estimates and weights only (no MA inference).
  if (opts.bootstrap_B <= 0) {
    if (want_bic) cb.ok = true;
    if (want_sl) cs.ok = true;
    return out;
  }

  // One shared bootstrap pass gives both MA estimators their Wald SEs. For a
  // continuous primary the whole resample lives as per-(fold, arm) moments;
  // no per-resample dataset is materialized.
  const RngStream boot = rep_rng.derive(kBootTag);
  std::vector<double> bic_draws, sl_draws;
  bic_draws.reserve(static_cast<size_t>(opts.bootstrap_B));
  sl_draws.reserve(static_cast<size_t>(opts.bootstrap_B));

  if (!binary) {
    std::vector<int> pool[2];
    for (int i = 0; i < ds.n(); ++i) pool[ds.arm(i)].push_back(i);
    std::vector<int> fold_ids[2];
    for (int b = 0; b < opts.bootstrap_B; ++b) {
      RngStream rs = boot.derive(static_cast<uint64_t>(b));
      RngStream draw = rs.derive(0);
      RngStream fold_rng = rs.derive(1);
      detail::SlFoldStats stats(opts.folds, ds.n_endpoints());
      for (int a = 0; a < 2; ++a) {
        const size_t na = pool[a].size();
        auto& ids = fold_ids[a];
        ids.resize(na);
        for (size_t k = 0; k < na; ++k) ids[k] = static_cast<int>(k % opts.folds);
        for (size_t k = na; k > 1; --k)
          std::swap(ids[k - 1], ids[static_cast<size_t>(fold_rng.uniform_below(k))]);
        for (size_t k = 0; k < na; ++k) {
          const int row =
              pool[a][static_cast<size_t>(draw.uniform_below(na))];
          stats.add(ids[k], a, ds.endpoints().row(row).transpose());
        }
      }
      const detail::GaussianBlockStats full = stats.totals();
      const SemFit fb = detail::fit_sem_stats(full, warm_opts);
      if (fb.status == SemStatus::Failed) continue;
      const double tb_sem = sem_ate_continuous(fb.params);
      const double tb_sat = full.mean1(0) - full.mean0(0);
      if (want_bic) {
        const double w = omega_bic(bic_sem(fb, full.n()),
                                   detail::saturated_bic_stats(full));
        bic_draws.push_back(combine(w, tb_sem, tb_sat).tau_ma);
      }
      if (want_sl) {
        SemOptions fold_opts = warm_opts;
        fold_opts.warm_start = fb.params;
        const double w = stats.solve(opts.grid_step, fold_opts).omega;
        sl_draws.push_back(combine(w, tb_sem, tb_sat).tau_ma);
      }
    }
  } else {
    for (int b = 0; b < opts.bootstrap_B; ++b) {
      RngStream rs = boot.derive(static_cast<uint64_t>(b));
      const TrialDataset rds = ds.subset(stratified_resample(ds, rs.derive(0)));
      const SemFit fb = fit_sem(rds, warm_opts);
      if (fb.status == SemStatus::Failed) continue;
      const double tb_sem = tau_sem_from_fit(fb);
      const double tb_sat = tau_saturated(rds);
      if (want_bic) {
        const double w = omega_bic(bic_sem(fb, rds.n()), saturated_bic(rds));
        bic_draws.push_back(combine(w, tb_sem, tb_sat).tau_ma);
      }
      if (want_sl) {
        SemOptions fold_opts = warm_opts;
        fold_opts.warm_start = fb.params;
        const double w = omega_super_learner(rds, opts.folds, opts.grid_step,
                                             rs.derive(1).key(), fold_opts)
                             .omega;
        sl_draws.push_back(combine(w, tb_sem, tb_sat).tau_ma);
      }
    }
  }

  auto finish_ma = [&](RepCell& c, std::vector<double>& draws, bool wanted) {
    if (!wanted) return;
    const int min_ok = std::max(10, opts.bootstrap_B / 2);
    if (static_cast<int>(draws.size()) < min_ok) return;  // left as failed
    double mean = 0.0;
    for (double v : draws) mean += v;
    mean /= static_cast<double>(draws.size());
    double ss = 0.0;
    for (double v : draws) ss += (v - mean) * (v - mean);
    c.se = std::sqrt(ss / static_cast<double>(draws.size() - 1));
    c.ok = true;
    wald_decide(c, tau0);
  };
  finish_ma(cb, bic_draws, want_bic);
  finish_ma(cs, sl_draws, want_sl);
  return out;
}

}  // namespace

MonteCarloSummary run_monte_carlo(const SimScenario& scn, int reps,
                                  const std::vector<EstimatorKind>& estimators,
                                  const McOptions& opts, uint64_t seed,
                                  uint64_t cell_id) {
  if (reps < 1) throw std::domain_error("run_monte_carlo: reps must be >= 1");
  const RngStream cell_rng = RngStream::from_seed(seed).derive(cell_id);
  const double tau0 = true_ate(scn);

  std::vector<RepResult> records(static_cast<size_t>(reps));
  parallel_for(reps, opts.n_threads, [&](int rep) {
    RngStream rep_rng = cell_rng.derive(static_cast<uint64_t>(rep));
    const TrialDataset ds = generate(scn, rep_rng.derive(kDataTag));
    records[static_cast<size_t>(rep)] =
        run_replicate(ds, tau0, estimators, opts, rep_rng);
  });

  MonteCarloSummary summary;
  summary.scenario = scn;
  summary.reps = reps;
  summary.seed = seed;
  summary.bootstrap_B = opts.bootstrap_B;
  summary.true_tau = tau0;

  for (EstimatorKind kind : estimators) {
    EstimatorSummary es;
    es.label = estimator_label(kind);
    const int ki = kind_index(kind);
    double sum = 0.0, sum_omega = 0.0;
    int used = 0;
    for (const auto& rec : records) {
      if (!rec.cell[ki].ok) continue;
      ++used;
      sum += rec.cell[ki].est;
      if (!std::isnan(rec.cell[ki].omega)) sum_omega += rec.cell[ki].omega;
    }
    es.n_used = used;
    es.n_failed = reps - used;
    if (used > 0) {
      const double mean = sum / used;
      es.bias = mean - tau0;
      double ss = 0.0, mse = 0.0, ncov = 0.0, nrej = 0.0;
      for (const auto& rec : records) {
        if (!rec.cell[ki].ok) continue;
        const double e = rec.cell[ki].est;
        ss += (e - mean) * (e - mean);
        mse += (e - tau0) * (e - tau0);
        ncov += rec.cell[ki].covered ? 1.0 : 0.0;
        nrej += rec.cell[ki].rejected ? 1.0 : 0.0;
      }
      es.se = std::sqrt(ss / used);
      es.rmse = std::sqrt(mse / used);
      es.coverage = ncov / used;
      es.rejection = nrej / used;
      if (kind == EstimatorKind::BicMa || kind == EstimatorKind::SlMa)
        es.mean_omega = sum_omega / used;
    }
    summary.estimators.push_back(std::move(es));
  }

  if (opts.keep_replicates) {
    for (int rep = 0; rep < reps; ++rep) {
      for (EstimatorKind kind : estimators) {
        const RepCell& c = records[static_cast<size_t>(rep)].cell[kind_index(kind)];
        ReplicateRow row;
        row.rep = rep;
        row.estimator = estimator_label(kind);
        row.estimate = c.est;
        row.se = c.se;
        row.omega = c.omega;
        row.ok = c.ok;
        row.covered = c.covered;
        row.rejected = c.rejected;
        summary.replicates.push_back(std::move(row));
      }
    }
  }
  return summary;
}

SweepConfig parse_sweep_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("sweep config is not valid JSON: ") + e.what());
  }
  SweepConfig cfg;
  try {
    cfg.scenario = parse_scenario(j.at("scenario").get<std::string>());
    cfg.grid = j.at("grid").get<std::vector<double>>();
    if (j.contains("hypothesis")) cfg.hypothesis = j["hypothesis"].get<std::string>();
    if (j.contains("n")) cfg.n = j["n"].get<int>();
    if (j.contains("reps")) cfg.reps = j["reps"].get<int>();
    if (j.contains("estimators"))
      for (const auto& e : j["estimators"])
        cfg.estimators.push_back(parse_estimator(e.get<std::string>()));
    if (j.contains("bootstrap_B")) cfg.bootstrap_B = j["bootstrap_B"].get<int>();
    if (j.contains("folds")) cfg.folds = j["folds"].get<int>();
    if (j.contains("grid_step")) cfg.grid_step = j["grid_step"].get<double>();
    if (j.contains("alpha")) cfg.alpha = j["alpha"].get<double>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad sweep config: ") + e.what());
  }
  if (cfg.estimators.empty())
    cfg.estimators = {EstimatorKind::Saturated, EstimatorKind::Sem,
                      EstimatorKind::BicMa, EstimatorKind::SlMa};
  if (cfg.grid.empty()) throw ValidationError("sweep config: grid is empty");
  if (cfg.hypothesis != "alternative" && cfg.hypothesis != "null" &&
      cfg.hypothesis != "null-primary")
    throw ValidationError("sweep config: hypothesis must be alternative, null, "
                          "or null-primary");
  return cfg;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_summary_csv(std::ostream& out,
                       const std::vector<MonteCarloSummary>& cells) {
  out << "scenario,hypothesis,shape,n,reps,bootstrap_B,seed,estimator,true_tau,"
         "bias,emp_se,rmse,coverage,rejection,mean_omega,n_used,n_failed\n";
  for (const auto& cell : cells) {
    for (const auto& es : cell.estimators) {
      out << scenario_label(cell.scenario.label) << ','
          << (cell.scenario.hyp == Hypothesis::Alternative ? "alternative" : "null")
          << ',' << fmt(cell.scenario.shape) << ',' << cell.scenario.n << ','
          << cell.reps << ',' << cell.bootstrap_B << ',' << cell.seed << ','
          << es.label << ',' << fmt(cell.true_tau) << ',' << fmt(es.bias) << ','
          << fmt(es.se) << ',' << fmt(es.rmse) << ',' << fmt(es.coverage) << ','
          << fmt(es.rejection) << ',' << fmt(es.mean_omega) << ',' << es.n_used
          << ',' << es.n_failed << '\n';
    }
  }
}

void write_replicates_csv(std::ostream& out,
                          const std::vector<MonteCarloSummary>& cells) {
  out << "scenario,hypothesis,shape,n,rep,estimator,ok,estimate,se,omega,"
         "covered,rejected\n";
  for (const auto& cell : cells) {
    for (const auto& r : cell.replicates) {
      out << scenario_label(cell.scenario.label) << ','
          << (cell.scenario.hyp == Hypothesis::Alternative ? "alternative" : "null")
          << ',' << fmt(cell.scenario.shape) << ',' << cell.scenario.n << ','
          << r.rep << ',' << r.estimator << ',' << (r.ok ? 1 : 0) << ','
          << fmt(r.estimate) << ',' << fmt(r.se) << ',' << fmt(r.omega) << ','
          << (r.covered ? 1 : 0) << ',' << (r.rejected ? 1 : 0) << '\n';
    }
  }
}

}  // namespace semavg
