// semavg: treatment-effect estimation for two-arm trials that borrows
// strength from secondary endpoints through a one-factor joint model, with
// BIC and super-learner model averaging against the saturated estimator.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "semavg/bootstrap.hpp"
#include "semavg/estimators.hpp"
#include "semavg/model_averaging.hpp"
#include "semavg/parallel.hpp"
#include "semavg/saturated.hpp"
#include "semavg/sim.hpp"

namespace {

using nlohmann::json;
using namespace semavg;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitConfig = 4;

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct CommonOpts {
  std::string input;
  std::string primary;
  std::string arm = "arm";
  std::vector<std::string> secondaries;
  std::vector<std::string> kinds;
  std::string output;
  std::string format = "csv";
  uint64_t seed = 1;
  int threads = 0;
  double alpha = 0.05;
};

void add_dataset_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--input", o.input, "input CSV file")->required();
  cmd->add_option("--primary", o.primary, "primary endpoint column")->required();
  cmd->add_option("--arm", o.arm, "treatment arm column (values 0/1)");
  cmd->add_option("--secondaries", o.secondaries,
                  "secondary endpoint columns (comma separated)")
      ->required()
      ->delimiter(',');
  cmd->add_option("--kinds", o.kinds,
                  "endpoint kinds, primary first: continuous|binary|ordinal:K")
      ->delimiter(',');
}

void add_output_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--output", o.output, "output file (default: stdout)");
  cmd->add_option("--format", o.format, "output format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
  cmd->add_option("--seed", o.seed, "random seed (recorded in output)");
  cmd->add_option("--threads", o.threads, "worker threads (0 = all available)");
  cmd->add_option("--alpha", o.alpha, "two-sided level for intervals");
}

TrialDataset load_dataset(const CommonOpts& o) {
  std::vector<EndpointSpec> kinds;
  if (o.kinds.empty()) {
    kinds.assign(1 + o.secondaries.size(), EndpointSpec::continuous(""));
  } else {
    for (const auto& token : o.kinds) kinds.push_back(parse_kind(token));
  }
  return load_csv(o.input, o.primary, o.arm, o.secondaries, kinds);
}

void emit(const CommonOpts& o, const std::string& text) {
  if (o.output.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(o.output);
  if (!out) throw ValidationError("cannot open output file '" + o.output + "'");
  out << text;
}

int thread_count(const CommonOpts& o) {
  return o.threads > 0 ? o.threads : default_thread_count();
}

// ---------------------------------------------------------------- estimate

struct EstimateRow {
  EstimateResult result;
  double ess = std::numeric_limits<double>::quiet_NaN();
};

std::string rows_to_csv(const std::vector<EstimateRow>& rows, uint64_t seed) {
  std::ostringstream out;
  out << "method,estimand,estimate,std_error,ci_low,ci_high,weight_on_sem,ess,"
         "flags,seed\n";
  for (const auto& row : rows) {
    const auto& r = row.result;
    std::string flags;
    for (const auto& f : r.flags) flags += (flags.empty() ? "" : ";") + f;
    out << r.method << ',' << r.estimand << ',' << fmt(r.estimate) << ','
        << fmt(r.std_error) << ',' << fmt(r.ci_low) << ',' << fmt(r.ci_high)
        << ',' << (r.weight_on_sem ? fmt(*r.weight_on_sem) : "") << ','
        << fmt(row.ess) << ',' << flags << ',' << seed << '\n';
  }
  return out.str();
}

json rows_to_json(const std::vector<EstimateRow>& rows) {
  json arr = json::array();
  for (const auto& row : rows) {
    const auto& r = row.result;
    json item = {{"method", r.method},
                 {"estimand", r.estimand},
                 {"estimate", r.estimate},
                 {"std_error", r.std_error},
                 {"ci_low", r.ci_low},
                 {"ci_high", r.ci_high},
                 {"flags", r.flags}};
    item["weight_on_sem"] =
        r.weight_on_sem ? json(*r.weight_on_sem) : json(nullptr);
    item["ess"] = std::isnan(row.ess) ? json(nullptr) : json(row.ess);
    arr.push_back(std::move(item));
  }
  return arr;
}

int cmd_estimate(const CommonOpts& o, int bootstrap_B, int folds,
                 double grid_step, const std::vector<std::string>& which) {
  const TrialDataset ds = load_dataset(o);
  const EndpointKind kind = ds.primary().kind;
  std::vector<EstimateRow> rows;

  std::vector<EstimatorKind> wanted;
  if (which.empty()) {
    wanted = {EstimatorKind::Saturated, EstimatorKind::Sem, EstimatorKind::BicMa,
              EstimatorKind::SlMa};
  } else {
    for (const auto& token : which) wanted.push_back(parse_estimator(token));
  }
  auto want = [&](EstimatorKind k) {
    return std::find(wanted.begin(), wanted.end(), k) != wanted.end();
  };

  if (kind == EndpointKind::Ordinal) {
    // Only the latent-scale estimands are defined for an ordinal primary.
    SemFit fit = fit_sem(ds);
    if (fit.status == SemStatus::Failed)
      throw FitError("SEM fit failed on the full dataset");
    rows.push_back({probit_coefficient(fit), {}});
    rows.push_back({concordance(fit), {}});
  } else {
    const EstimateResult sat = (kind == EndpointKind::Binary)
                                   ? ate_saturated_binary(ds)
                                   : ate_saturated(fit_saturated(ds), ds);
    const bool need_sem = want(EstimatorKind::Sem) || want(EstimatorKind::BicMa) ||
                          want(EstimatorKind::SlMa);
    const bool need_ma = want(EstimatorKind::BicMa) || want(EstimatorKind::SlMa);

    if (want(EstimatorKind::Saturated))
      rows.push_back({sat, static_cast<double>(ds.n())});

    if (need_sem) {
      SemFit fit = fit_sem(ds);
      if (fit.status == SemStatus::Failed)
        throw FitError("SEM fit failed on the full dataset");
      const EstimateResult sem = (kind == EndpointKind::Binary)
                                     ? ate_sem_binary(fit)
                                     : ate_sem_continuous(fit);
      if (want(EstimatorKind::Sem)) rows.push_back({sem, 0.0});

      if (need_ma) {
        const double t_sem = tau_sem_from_fit(fit);
        const double t_sat = sat.estimate;
        SemOptions warm;
        warm.compute_param_cov = false;
        warm.warm_start = fit.params;
        const RngStream root = RngStream::from_seed(o.seed);

        // Percentile bootstrap for the model-averaging estimators.
        EstimatorConfig cfg;
        cfg.folds = folds;
        cfg.grid_step = grid_step;
        cfg.sem = warm;
        auto boot_of = [&](EstimatorKind k, uint64_t tag) {
          return bootstrap(
              ds,
              [&, k](const TrialDataset& d, uint64_t s) {
                return point_estimate(d, k, cfg, s);
              },
              bootstrap_B, o.alpha, root.derive(tag).key(), thread_count(o));
        };
        auto ma_row = [&](const std::string& label, double w, double point,
                          const BootstrapResult& br) {
          EstimateResult r;
          r.method = label;
          r.estimand = "ATE";
          r.estimate = point;
          r.std_error = br.se;
          r.ci_low = br.ci_low;
          r.ci_high = br.ci_high;
          r.weight_on_sem = w;
          r.flags = fit.flags;
          if (br.unreliable) r.flags.push_back("unreliable");
          return r;
        };
        if (want(EstimatorKind::BicMa)) {
          const double w_bic = omega_bic(bic_sem(fit, ds.n()), saturated_bic(ds));
          const BootstrapResult bb = boot_of(EstimatorKind::BicMa, 100);
          rows.push_back(
              {ma_row("BIC-MA", w_bic, combine(w_bic, t_sem, t_sat).tau_ma, bb),
               0.0});
        }
        if (want(EstimatorKind::SlMa)) {
          const double w_sl = omega_super_learner(ds, folds, grid_step,
                                                  root.derive(1).key(), warm)
                                  .omega;
          const BootstrapResult sb = boot_of(EstimatorKind::SlMa, 101);
          rows.push_back(
              {ma_row("SL-MA", w_sl, combine(w_sl, t_sem, t_sat).tau_ma, sb),
               0.0});
        }
      }
    }
    const double var_sat = sat.std_error * sat.std_error;
    for (auto& r : rows) {
      if (r.result.method == "Saturated") continue;
      const double se = r.result.std_error;
      r.ess = (se > 0.0 && var_sat > 0.0)
                  ? effective_sample_size(se * se, var_sat, ds.n())
                  : std::numeric_limits<double>::quiet_NaN();
    }
  }

  if (o.format == "json") {
    json doc = {{"schema_version", 1},
                {"command", "estimate"},
                {"seed", o.seed},
                {"n", ds.n()},
                {"n0", ds.n_arm(0)},
                {"n1", ds.n_arm(1)},
                {"primary_kind", kind_label(ds.primary())},
                {"results", rows_to_json(rows)}};
    emit(o, doc.dump(2) + "\n");
  } else {
    emit(o, rows_to_csv(rows, o.seed));
  }
  return kExitOk;
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const CommonOpts& o, const std::string& config_path,
                 const std::string& replicates_out) {
  std::ifstream in(config_path);
  if (!in) throw ValidationError("cannot open sweep config '" + config_path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  SweepConfig cfg = parse_sweep_config(buffer.str());
  if (o.seed != 1) cfg.seed = o.seed;

  McOptions mc;
  mc.bootstrap_B = cfg.bootstrap_B;
  mc.folds = cfg.folds;
  mc.grid_step = cfg.grid_step;
  mc.alpha = cfg.alpha;
  mc.n_threads = o.threads > 0 ? o.threads
                               : (cfg.threads > 0 ? cfg.threads : default_thread_count());
  mc.keep_replicates = !replicates_out.empty();

  std::vector<MonteCarloSummary> cells;
  int failed_cells = 0;
  for (size_t g = 0; g < cfg.grid.size(); ++g) {
    SimScenario scn;
    scn.label = cfg.scenario;
    scn.hyp = cfg.hypothesis == "alternative" ? Hypothesis::Alternative
                                              : Hypothesis::Null;
    scn.shape = cfg.grid[g];
    scn.n = cfg.n;
    const uint64_t cell_id =
        (static_cast<uint64_t>(cfg.scenario) << 40) |
        (static_cast<uint64_t>(scn.hyp == Hypothesis::Alternative ? 1 : 0) << 32) |
        static_cast<uint64_t>(g);
    try {
      MonteCarloSummary s =
          run_monte_carlo(scn, cfg.reps, cfg.estimators, mc, cfg.seed, cell_id);
      std::cerr << "cell " << scenario_label(scn.label) << " shape=" << scn.shape
                << " n=" << scn.n << ":";
      for (const auto& es : s.estimators)
        std::cerr << " " << es.label << "[bias=" << fmt(es.bias)
                  << ",rmse=" << fmt(es.rmse) << ",cov=" << fmt(es.coverage)
                  << ",rej=" << fmt(es.rejection) << "]";
      std::cerr << "\n";
      cells.push_back(std::move(s));
    } catch (const ScenarioError& e) {
      std::cerr << "warning: skipping infeasible cell shape=" << scn.shape << ": "
                << e.what() << "\n";
      ++failed_cells;
    }
  }
  if (cells.empty()) {
    std::cerr << "error: all scenario cells were infeasible\n";
    return kExitNumerical;
  }

  std::ostringstream out;
  write_summary_csv(out, cells);
  emit(o, out.str());
  if (!replicates_out.empty()) {
    std::ofstream rep_out(replicates_out);
    if (!rep_out)
      throw ValidationError("cannot open replicate file '" + replicates_out + "'");
    write_replicates_csv(rep_out, cells);
  }
  return kExitOk;
}

// ---------------------------------------------------------------- bootstrap

int cmd_bootstrap(const CommonOpts& o, const std::string& estimator, int B,
                  int folds, double grid_step) {
  const TrialDataset ds = load_dataset(o);
  const EstimatorKind kind = parse_estimator(estimator);
  EstimatorConfig cfg;
  cfg.folds = folds;
  cfg.grid_step = grid_step;
  cfg.sem.compute_param_cov = false;

  const BootstrapResult br = bootstrap(
      ds,
      [&](const TrialDataset& d, uint64_t s) {
        return point_estimate(d, kind, cfg, s);
      },
      B, o.alpha, o.seed, thread_count(o));

  if (o.format == "json") {
    json doc = {{"schema_version", 1},
                {"command", "bootstrap"},
                {"estimator", estimator_label(kind)},
                {"seed", o.seed},
                {"B", B},
                {"alpha", o.alpha},
                {"point", br.point},
                {"se", br.se},
                {"ci_low", br.ci_low},
                {"ci_high", br.ci_high},
                {"wald", br.wald()},
                {"n_failed", br.n_failed},
                {"unreliable", br.unreliable}};
    emit(o, doc.dump(2) + "\n");
  } else {
    std::ostringstream out;
    out << "estimator,B,alpha,point,se,ci_low,ci_high,wald,n_failed,unreliable,seed\n"
        << estimator_label(kind) << ',' << B << ',' << fmt(o.alpha) << ','
        << fmt(br.point) << ',' << fmt(br.se) << ',' << fmt(br.ci_low) << ','
        << fmt(br.ci_high) << ',' << fmt(br.wald()) << ',' << br.n_failed << ','
        << (br.unreliable ? 1 : 0) << ',' << o.seed << '\n';
    emit(o, out.str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semavg: joint-model treatment effect estimation for two-arm trials"};
  app.require_subcommand(1);

  CommonOpts est_opts, sim_opts, boot_opts;
  int est_B = 20000, est_folds = 10;
  double est_grid = 0.01;
  std::vector<std::string> est_which;
  std::string sim_config, sim_replicates_out;
  std::string boot_estimator = "saturated";
  int boot_B = 1000, boot_folds = 10;
  double boot_grid = 0.01;

  CLI::App* est = app.add_subcommand(
      "estimate", "analyze one CSV dataset with all four estimators");
  add_dataset_flags(est, est_opts);
  add_output_flags(est, est_opts);
  est->add_option("--bootstrap-B", est_B, "bootstrap replicates for MA intervals");
  est->add_option("--folds", est_folds, "super-learner cross-validation folds");
  est->add_option("--grid-step", est_grid, "super-learner weight grid step");
  est->add_option("--estimators", est_which,
                  "subset to run: saturated,sem,bic,sl (default: all)")
      ->delimiter(',');

  CLI::App* sim = app.add_subcommand("simulate", "run a scenario sweep from JSON");
  sim->add_option("--config", sim_config, "sweep configuration JSON")->required();
  sim->add_option("--replicates-out", sim_replicates_out,
                  "write per-replicate long-format CSV here");
  add_output_flags(sim, sim_opts);

  CLI::App* boot = app.add_subcommand(
      "bootstrap", "bootstrap inference for one estimator on one dataset");
  add_dataset_flags(boot, boot_opts);
  add_output_flags(boot, boot_opts);
  boot->add_option("--estimator", boot_estimator,
                   "saturated | sem | bic | sl");
  boot->add_option("--bootstrap-B", boot_B, "bootstrap replicates");
  boot->add_option("--folds", boot_folds, "super-learner folds");
  boot->add_option("--grid-step", boot_grid, "super-learner weight grid step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (est->parsed())
      return cmd_estimate(est_opts, est_B, est_folds, est_grid, est_which);
    if (sim->parsed()) return cmd_simulate(sim_opts, sim_config, sim_replicates_out);
    if (boot->parsed())
      return cmd_bootstrap(boot_opts, boot_estimator, boot_B, boot_folds, boot_grid);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const FitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const dist::SingularMatrixError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitConfig;
}
