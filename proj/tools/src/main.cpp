#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saemx/errors.hpp"
#include "saemx/inference.hpp"
#include "saemx/io.hpp"
#include "saemx/model.hpp"
#include "saemx/rng.hpp"
#include "saemx/saem.hpp"
#include "saemx/trial.hpp"
#include "saemx/types.hpp"

namespace {

using namespace saemx;

void require_tau_present(const Dataset& data, const ModelSpec& model, const std::string& model_id) {
  if (!model.structural.needs_tau) return;
  for (const SubjectData& subject : data.subjects)
    for (const UnitData& unit : subject.units)
      if (!unit.dose.tau)
        throw ConfigError("model " + model_id + " requires a tau value for every dose record (subject " +
                          subject.id + " unit " + std::to_string(unit.unit) + " has none)");
}

std::string yes_no(bool b) { return b ? "yes" : "no"; }

void print_test(const TestResult& t, double alpha) {
  std::printf("%s %s: statistic=%.6g p=%.6g reject at %g: %s%s\n", t.method.c_str(), t.component.c_str(),
              t.statistic, t.p_value, alpha, yes_no(t.p_value < alpha).c_str(),
              t.mc_caveat ? " (within Monte Carlo error of the threshold)" : "");
}

// ------------------------------------------------------------------ simulate

struct SimulateArgs {
  std::string config, out, params_out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_simulate(const SimulateArgs& args) {
  FitConfig cfg = FitConfig::from_file(args.config);
  if (args.seed_given) cfg.seed = args.seed;
  const ModelSpec model = model_from_config(cfg);
  const TrialDesign design = trial_design_from(cfg);

  const SimResult sim = simulate_trial(design, model, cfg.seed);
  write_dataset(sim.data, args.out);

  if (!args.params_out.empty()) {
    std::string csv = "subject_id,unit";
    for (const std::string& name : model.structural.param_names) csv += "," + name;
    csv += '\n';
    for (int i = 0; i < sim.data.n_subjects(); ++i) {
      const Eigen::MatrixXd& phi = sim.phi.phi[static_cast<size_t>(i)];
      for (Eigen::Index k = 0; k < phi.rows(); ++k) {
        csv += sim.data.subjects[static_cast<size_t>(i)].id;
        csv += ',';
        csv += std::to_string(k + 1);
        for (Eigen::Index c = 0; c < phi.cols(); ++c) {
          csv += ',';
          csv += format_double(phi(k, c));
        }
        csv += '\n';
      }
    }
    atomic_write_text(args.params_out, csv);
  }

  std::printf("simulated %d subjects x %d units, %d observations (seed %llu) -> %s\n",
              sim.data.n_subjects(), sim.data.n_units(), sim.data.total_obs(),
              static_cast<unsigned long long>(cfg.seed), args.out.c_str());
  return 0;
}

// ----------------------------------------------------------------------- fit

struct FitArgs {
  std::string config, data, out, trace, gof;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool no_loglik = false;
};

int cmd_fit(const FitArgs& args) {
  FitConfig cfg = FitConfig::from_file(args.config);
  if (args.seed_given) cfg.seed = args.seed;
  const Dataset data = read_dataset(args.data);
  const ModelSpec model = model_from_config(cfg);
  require_tau_present(data, model, cfg.structural_id);

  const SaemConfig sc = saem_config_from(cfg, data);
  const int K = data.n_units();
  const std::vector<std::string>& params = model.structural.param_names;

  const FitResult fit = run_saem(data, model, sc);

  FitRecord rec;
  rec.structural_id = cfg.structural_id;
  rec.error_name = cfg.error_name;
  rec.structure = cfg.structure;
  rec.data_file = args.data;
  rec.seed = cfg.seed;
  rec.n_iterations = cfg.n_iterations;
  rec.burn_in = cfg.burn_in;
  rec.param_names = params;
  rec.n_subjects = data.n_subjects();
  rec.n_units = K;
  for (int k = 1; k < K; ++k)
    for (size_t j = 0; j < params.size(); ++j)
      if (sc.beta_zero_mask(k, static_cast<int>(j)))
        rec.constraints.push_back(beta_component_name(k, K, params[j]));
  rec.theta_hat = fit.theta_hat;
  rec.kernels = cfg.kernels;
  rec.inference = cfg.inference;
  rec.stabilized = fit.diagnostics.stabilized;
  rec.max_rel_range_last50 =
      fit.diagnostics.rel_range_last50.size() > 0 ? fit.diagnostics.rel_range_last50.maxCoeff() : 0.0;
  rec.floored_iterations = fit.diagnostics.floored_iterations;
  rec.acc_prior = fit.diagnostics.post_burnin_acc_prior;
  rec.acc_rw_full = fit.diagnostics.post_burnin_acc_full;
  rec.acc_rw_component = fit.diagnostics.post_burnin_acc_component;

  const FimResult fim = linearized_fim(data, model, fit.theta_hat, fit.phi_cond_mean, sc.beta_zero_mask);
  rec.fim_condition = std::isfinite(fim.condition) ? fim.condition : 0.0;
  rec.fim_invertible = fim.invertible;
  for (size_t i = 0; i < fim.names.size(); ++i) {
    const double se = fim.se[static_cast<Eigen::Index>(i)];
    if (std::isfinite(se) && se > 0) rec.standard_errors[fim.names[i]] = se;
  }
  rec.se_excluded = fim.excluded;

  if (!args.no_loglik)
    rec.loglik = estimate_loglik(data, model, fit.theta_hat, cfg.kernels, cfg.inference,
                                 derive_seed(cfg.seed, {3}));

  for (const std::string& method : cfg.tests) {
    const auto [bk, bj] = resolve_beta_component(cfg.test_component, K, params);
    const std::string canonical = beta_component_name(bk, K, params[bj]);
    if (method == "wald") {
      const auto it = rec.standard_errors.find(canonical);
      if (it == rec.standard_errors.end())
        throw NumericalError("no usable standard error for " + canonical + "; Wald test unavailable");
      rec.tests.push_back(wald_test(fit.theta_hat.beta(bk, bj), it->second, canonical));
    } else if (method == "lrt") {
      if (args.no_loglik) throw ConfigError("the likelihood-ratio test needs log-likelihoods; drop --no-loglik");
      SaemConfig reduced = sc;
      reduced.beta_zero_mask(bk, bj) = true;
      reduced.theta_init.beta(bk, bj) = 0.0;
      reduced.seed = derive_seed(cfg.seed, {2});
      const FitResult red_fit = run_saem(data, model, reduced);
      const LoglikEstimate ll_red = estimate_loglik(data, model, red_fit.theta_hat, cfg.kernels,
                                                    cfg.inference, derive_seed(cfg.seed, {4}));
      rec.tests.push_back(lrt(*rec.loglik, ll_red, canonical));
    }
  }

  write_fit_json(rec, args.out);

  const std::vector<std::string> names = theta_component_names(K, model.structural.p(), cfg.structure, params);
  if (!args.trace.empty()) write_trace_csv(fit.trace, names, args.trace);
  if (!args.gof.empty()) write_gof_csv(data, model, fit.theta_hat, fit.phi_cond_mean, args.gof);

  std::printf("fit: %d subjects x %d units, %d observations, %d iterations (seed %llu)\n", data.n_subjects(),
              K, data.total_obs(), cfg.n_iterations, static_cast<unsigned long long>(cfg.seed));
  std::printf("stabilized: %s (max rel range over last 50 iterations %.4g)\n", yes_no(rec.stabilized).c_str(),
              rec.max_rel_range_last50);
  std::printf("acceptance: prior %.3f, rw_full %.3f, rw_component %.3f\n", rec.acc_prior, rec.acc_rw_full,
              rec.acc_rw_component);
  const Eigen::VectorXd flat = theta_flatten(fit.theta_hat);
  for (size_t i = 0; i < names.size(); ++i) {
    const auto it = rec.standard_errors.find(names[i]);
    if (it != rec.standard_errors.end())
      std::printf("  %-18s %12.6g  (se %.4g)\n", names[i].c_str(), flat[static_cast<Eigen::Index>(i)],
                  it->second);
    else
      std::printf("  %-18s %12.6g\n", names[i].c_str(), flat[static_cast<Eigen::Index>(i)]);
  }
  if (rec.loglik)
    std::printf("loglik: %.6f (mc se %.4f, %d draws/subject)\n", rec.loglik->value,
                rec.loglik->mc_standard_error, rec.loglik->samples);
  for (const TestResult& t : rec.tests) print_test(t, cfg.alpha);
  std::printf("wrote %s\n", args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------- test

struct TestArgs {
  std::string fit, fit_reduced, component, method;
  double alpha = 0.05;
};

int cmd_test(const TestArgs& args) {
  const FitRecord rec = read_fit_json(args.fit);
  const auto [bk, bj] = resolve_beta_component(args.component, rec.n_units, rec.param_names);
  const std::string canonical = beta_component_name(bk, rec.n_units, rec.param_names[static_cast<size_t>(bj)]);

  TestResult result;
  if (args.method == "wald") {
    const auto it = rec.standard_errors.find(canonical);
    if (it == rec.standard_errors.end())
      throw NumericalError("no usable standard error for " + canonical + " in " + args.fit);
    result = wald_test(rec.theta_hat.beta(bk, bj), it->second, canonical);
  } else {
    if (args.fit_reduced.empty())
      throw ConfigError("--fit-reduced is required for the likelihood-ratio test");
    const FitRecord reduced = read_fit_json(args.fit_reduced);
    if (!rec.loglik || !reduced.loglik)
      throw ConfigError("both fits need stored log-likelihoods; rerun `fit` without --no-loglik or use `loglik --update`");
    result = lrt(*rec.loglik, *reduced.loglik, canonical);
  }
  print_test(result, args.alpha);
  return 0;
}

// -------------------------------------------------------------------- loglik

struct LoglikArgs {
  std::string fit, data_override;
  int samples = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool update = false;
};

int cmd_loglik(const LoglikArgs& args) {
  FitRecord rec = read_fit_json(args.fit);
  const std::string data_path = args.data_override.empty() ? rec.data_file : args.data_override;
  const Dataset data = read_dataset(data_path);

  ModelSpec model;
  model.structural = structural_registry(rec.structural_id);
  model.error = ErrorModel::from_name(rec.error_name);
  require_tau_present(data, model, rec.structural_id);

  InferenceConfig inf = rec.inference;
  if (args.samples > 0) inf.loglik_samples = args.samples;
  const std::uint64_t seed = args.seed_given ? args.seed : derive_seed(rec.seed, {3});

  const LoglikEstimate est = estimate_loglik(data, model, rec.theta_hat, rec.kernels, inf, seed);
  std::printf("loglik: %.6f (mc se %.4f, %d draws/subject, seed %llu)\n", est.value, est.mc_standard_error,
              est.samples, static_cast<unsigned long long>(seed));
  if (args.update) {
    rec.loglik = est;
    rec.inference = inf;
    write_fit_json(rec, args.fit);
    std::printf("updated %s\n", args.fit.c_str());
  }
  return 0;
}

// ----------------------------------------------------------------- replicate

struct ReplicateArgs {
  std::string config, out = "report.csv";
  int replicates = 0;
  int workers = -1;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_replicate(const ReplicateArgs& args) {
  FitConfig cfg = FitConfig::from_file(args.config);
  if (args.seed_given) cfg.seed = args.seed;
  if (args.replicates > 0) cfg.replicates = args.replicates;
  if (args.workers >= 0) cfg.workers = args.workers;

  const ModelSpec model = model_from_config(cfg);
  const TrialDesign design = trial_design_from(cfg);
  const int K = design.n_units;
  const std::vector<std::string>& params = model.structural.param_names;

  ReplicateOptions options;
  options.replicates = cfg.replicates;
  options.seed = cfg.seed;
  options.workers = cfg.workers;
  options.fit.n_iterations = cfg.n_iterations;
  options.fit.burn_in = cfg.burn_in;
  options.fit.n_chains = cfg.n_chains;
  options.fit.anneal_decay = cfg.anneal_decay;
  options.fit.theta_init = resolve_theta_init(cfg, K);
  options.fit.kernels = cfg.kernels;
  options.fit.beta_zero_mask = resolve_beta_mask(cfg, K, params);
  options.inference = cfg.inference;
  options.alpha = cfg.alpha;
  options.max_failure_rate = cfg.max_failure_rate;
  for (const std::string& method : cfg.tests) {
    if (method == "wald") options.run_wald = true;
    if (method == "lrt") options.run_lrt = true;
  }
  if (options.run_wald || options.run_lrt) {
    const auto [bk, bj] = resolve_beta_component(cfg.test_component, K, params);
    options.test_component = beta_component_name(bk, K, params[static_cast<size_t>(bj)]);
  }

  const ReplicationReport report = replicate_study(design, model, options);
  write_report(report, args.out);

  std::printf("replicates: %d requested, %d failed, %.1f s total (seed %llu)\n", report.replicates,
              report.failures, report.runtime_seconds, static_cast<unsigned long long>(report.seed));
  for (size_t jx = 0; jx < report.param_names.size(); ++jx) {
    const Eigen::Index e = static_cast<Eigen::Index>(jx);
    std::printf("  %-18s true %10.4f  bias%% %8.2f  rmse%% %8.2f%s\n", report.param_names[jx].c_str(),
                report.theta_true_flat[e], report.rel_bias_pct[e], report.rel_rmse_pct[e],
                report.absolute_scale[jx] ? "  [absolute x100]" : "");
  }
  if (report.wald)
    std::printf("wald rejection: %d/%d = %.1f%%\n", report.wald->rejections, report.wald->evaluated,
                100.0 * report.wald->rate);
  if (report.lrt)
    std::printf("lrt rejection: %d/%d = %.1f%%\n", report.lrt->rejections, report.lrt->evaluated,
                100.0 * report.lrt->rate);
  if (report.mean_fim_se_component > 0)
    std::printf("se calibration (%s): empirical sd %.6f, mean fim se %.6f\n", options.test_component.c_str(),
                report.empirical_sd_component, report.mean_fim_se_component);
  std::printf("wrote %s (+ .txt/.json)\n", args.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maximum-likelihood estimation for two-level nonlinear mixed-effects models"};
  app.require_subcommand(1);

  SimulateArgs sim_args;
  CLI::App* sim = app.add_subcommand("simulate", "simulate a trial dataset from a design config");
  sim->add_option("--config", sim_args.config, "JSON config with model and design sections")->required();
  sim->add_option("--out", sim_args.out, "output dataset CSV")->required();
  sim->add_option("--params", sim_args.params_out, "optional CSV of the latent individual parameters");
  CLI::Option* sim_seed = sim->add_option("--seed", sim_args.seed, "override the config seed");

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "estimate population parameters from a dataset");
  fit->add_option("--config", fit_args.config, "JSON config")->required();
  fit->add_option("--data", fit_args.data, "dataset CSV")->required();
  fit->add_option("--out", fit_args.out, "output fit JSON")->required();
  fit->add_option("--trace", fit_args.trace, "optional per-iteration parameter trace CSV");
  fit->add_option("--gof", fit_args.gof, "optional observed/predicted/residual CSV");
  CLI::Option* fit_seed = fit->add_option("--seed", fit_args.seed, "override the config seed");
  fit->add_flag("--no-loglik", fit_args.no_loglik, "skip the importance-sampling log-likelihood");

  TestArgs test_args;
  CLI::App* test = app.add_subcommand("test", "test a unit-effect component from saved fits");
  test->add_option("--fit", test_args.fit, "fit JSON of the full model")->required();
  test->add_option("--component", test_args.component, "tested component, e.g. beta.logAUC")->required();
  test->add_option("--method", test_args.method, "wald or lrt")
      ->required()
      ->check(CLI::IsMember({"wald", "lrt"}));
  test->add_option("--fit-reduced", test_args.fit_reduced, "fit JSON of the constrained model (lrt)");
  test->add_option("--alpha", test_args.alpha, "significance level (default 0.05)");

  LoglikArgs ll_args;
  CLI::App* loglik = app.add_subcommand("loglik", "re-estimate the log-likelihood of a saved fit");
  loglik->add_option("--fit", ll_args.fit, "fit JSON")->required();
  loglik->add_option("--samples", ll_args.samples, "importance-sampling draws per subject");
  loglik->add_option("--data", ll_args.data_override, "override the dataset path stored in the fit");
  CLI::Option* ll_seed = loglik->add_option("--seed", ll_args.seed, "sampling seed");
  loglik->add_flag("--update", ll_args.update, "write the estimate back into the fit JSON");

  ReplicateArgs rep_args;
  CLI::App* rep = app.add_subcommand("replicate", "simulate and refit many trials; summarize bias/RMSE/tests");
  rep->add_option("--config", rep_args.config, "JSON config with model, design and test sections")->required();
  rep->add_option("--out", rep_args.out, "output report CSV (writes .txt/.json siblings)");
  rep->add_option("--replicates", rep_args.replicates, "override the number of replicates");
  rep->add_option("--workers", rep_args.workers, "worker threads (0 = all cores)");
  CLI::Option* rep_seed = rep->add_option("--seed", rep_args.seed, "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  sim_args.seed_given = sim_seed->count() > 0;
  fit_args.seed_given = fit_seed->count() > 0;
  ll_args.seed_given = ll_seed->count() > 0;
  rep_args.seed_given = rep_seed->count() > 0;

  try {
    if (sim->parsed()) return cmd_simulate(sim_args);
    if (fit->parsed()) return cmd_fit(fit_args);
    if (test->parsed()) return cmd_test(test_args);
    if (loglik->parsed()) return cmd_loglik(ll_args);
    if (rep->parsed()) return cmd_replicate(rep_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
