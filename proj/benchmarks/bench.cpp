// Microbenchmarks for the hot paths: structural prediction, per-unit data
// likelihood, posterior moments, sampler sweeps, whole SAEM iterations, and
// the two inference passes.

#include <benchmark/benchmark.h>

#include <Eigen/Dense>
#include <vector>

#include <saemx/inference.hpp>
#include <saemx/model.hpp>
#include <saemx/prob.hpp>
#include <saemx/rng.hpp>
#include <saemx/saem.hpp>
#include <saemx/sampler.hpp>
#include <saemx/trial.hpp>

#include "oracles.hpp"

using namespace saemx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Fixture {
  ModelSpec model = oracles::theophylline_model();
  Dataset data;
  ThetaParams theta = oracles::theophylline_truth();

  Fixture() {
    TrialDesign d;
    d.n_subjects = 24;
    d.n_units = 2;
    d.times = {oracles::theophylline_times()};
    d.dose = {4.0};
    d.theta_true = theta;
    data = simulate_trial(d, model, 7).data;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void bm_predict(benchmark::State& state) {
  const Fixture& f = fixture();
  VectorXd phi(3);
  phi << -0.73, 0.39, 4.61;
  const DoseRecord dose{4.0, std::nullopt};
  double t = 0.25;
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model.structural.predict(t, phi, dose));
    t = t < 24.0 ? t + 0.25 : 0.25;
  }
}
BENCHMARK(bm_predict);

void bm_unit_loglik(benchmark::State& state) {
  const Fixture& f = fixture();
  const UnitData& unit = f.data.subjects[0].units[0];
  VectorXd phi(3);
  phi << -0.73, 0.39, 4.61;
  for (auto _ : state) benchmark::DoNotOptimize(log_unit_lik(unit, phi, f.model, f.theta.sigma2));
}
BENCHMARK(bm_unit_loglik);

void bm_posterior_b_moments(benchmark::State& state) {
  const Fixture& f = fixture();
  MatrixXd at_mean(f.data.n_units(), 3);
  for (int k = 0; k < f.data.n_units(); ++k) at_mean.row(k) = f.theta.unit_mean(k).transpose();
  const IndividualParams phi = IndividualParams::constant(f.data.n_subjects(), at_mean);
  for (auto _ : state) benchmark::DoNotOptimize(posterior_b_moments(phi, f.theta));
}
BENCHMARK(bm_posterior_b_moments);

void bm_workspace_build(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(SamplerWorkspace::build(f.theta, f.data.n_units()));
}
BENCHMARK(bm_workspace_build);

void bm_sweep_subject(benchmark::State& state) {
  const Fixture& f = fixture();
  const int Kp = f.data.n_units() * 3;
  const SamplerWorkspace ws = SamplerWorkspace::build(f.theta, f.data.n_units());
  KernelConfig cfg;
  const KernelScales scales = KernelScales::init(cfg, Kp);
  AcceptanceCounters acc = AcceptanceCounters::zero(Kp);
  RngStream rng(derive_seed(1, {kStreamMcmc, 0, 0}));
  ChainState chain = ChainState::init(f.data, f.model, f.theta,
                                      IndividualParams::constant(f.data.n_subjects(), ws.unstack(ws.mean)));
  for (auto _ : state) {
    sweep_subject(chain, 0, f.data, f.model, f.theta, ws, cfg, scales, acc, rng);
    benchmark::DoNotOptimize(chain.unit_loglik);
  }
}
BENCHMARK(bm_sweep_subject);

void bm_saem_iteration(benchmark::State& state) {
  const Fixture& f = fixture();
  SaemConfig sc;
  sc.n_iterations = static_cast<int>(state.range(0));
  sc.burn_in = sc.n_iterations / 2;
  sc.n_chains = 1;
  VectorXd mu0(3);
  mu0 << -1.0, 0.5, 4.0;
  sc.theta_init = ThetaParams::diagonal(mu0, MatrixXd::Zero(2, 3), VectorXd::Constant(3, 0.1),
                                        VectorXd::Constant(3, 0.1), 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(run_saem(f.data, f.model, sc));
  state.SetItemsProcessed(state.iterations() * sc.n_iterations);
}
BENCHMARK(bm_saem_iteration)->Arg(50)->Unit(benchmark::kMillisecond);

void bm_linearized_fim(benchmark::State& state) {
  const Fixture& f = fixture();
  const int K = f.data.n_units();
  MatrixXd at_mean(K, 3);
  for (int k = 0; k < K; ++k) at_mean.row(k) = f.theta.unit_mean(k).transpose();
  const std::vector<Eigen::MatrixXd> cond(static_cast<size_t>(f.data.n_subjects()), at_mean);
  const BetaZeroMask mask = default_beta_mask(K, 3);
  for (auto _ : state) benchmark::DoNotOptimize(linearized_fim(f.data, f.model, f.theta, cond, mask));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(bm_linearized_fim)->Unit(benchmark::kMillisecond);

void bm_importance_loglik(benchmark::State& state) {
  const Fixture& f = fixture();
  KernelConfig kernels;
  InferenceConfig cfg;
  cfg.loglik_samples = 1000;
  cfg.posterior_sweeps = 100;
  cfg.posterior_burnin = 50;
  for (auto _ : state)
    benchmark::DoNotOptimize(estimate_loglik(f.data, f.model, f.theta, kernels, cfg, 5));
  state.SetItemsProcessed(state.iterations() * cfg.loglik_samples);
}
BENCHMARK(bm_importance_loglik)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
