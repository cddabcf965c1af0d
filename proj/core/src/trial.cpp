#include "saemx/trial.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <thread>

#include "saemx/errors.hpp"
#include "saemx/prob.hpp"
#include "saemx/rng.hpp"

namespace saemx {

void TrialDesign::validate() const {
  if (n_subjects < 1) throw std::invalid_argument("trial design: n_subjects must be >= 1");
  if (n_units < 2) throw std::invalid_argument("trial design: at least 2 units required");
  if (times.size() != 1 && static_cast<int>(times.size()) != n_units)
    throw std::invalid_argument("trial design: provide one shared time grid or one per unit");
  for (const auto& grid : times) {
    if (grid.empty()) throw std::invalid_argument("trial design: empty time grid");
    for (size_t j = 1; j < grid.size(); ++j)
      if (!(grid[j] > grid[j - 1]))
        throw std::invalid_argument("trial design: time grid must be strictly increasing");
  }
  if (dose.size() != 1 && static_cast<int>(dose.size()) != n_units)
    throw std::invalid_argument("trial design: provide one shared dose or one per unit");
  for (double d : dose)
    if (!(d > 0.0)) throw std::invalid_argument("trial design: dose must be positive");
  theta_true.validate();
  if (theta_true.K() != n_units)
    throw std::invalid_argument("trial design: theta_true unit count != n_units");
}

namespace {

Eigen::MatrixXd chol_or_zero(const Eigen::MatrixXd& cov) {
  if (cov.isZero(0.0)) return Eigen::MatrixXd::Zero(cov.rows(), cov.cols());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace

SimResult simulate_trial(const TrialDesign& design, const ModelSpec& model, std::uint64_t seed) {
  design.validate();
  const int n = design.n_subjects, K = design.n_units, p = design.theta_true.p();
  if (model.structural.p() != p)
    throw std::invalid_argument("simulate_trial: model dimension != theta_true dimension");
  if (model.structural.needs_tau && !design.tau)
    throw std::invalid_argument("simulate_trial: model '" + model.structural.id + "' needs tau");

  const Eigen::MatrixXd chol_omega = chol_or_zero(design.theta_true.omega);
  const Eigen::MatrixXd chol_psi = chol_or_zero(design.theta_true.psi);
  const double sigma = std::sqrt(design.theta_true.sigma2);

  SimResult out;
  out.phi.phi.resize(n);
  out.btilde.resize(n, p);
  out.data.subjects.resize(n);

  for (int i = 0; i < n; ++i) {
    RngStream rng(derive_seed(seed, {kStreamSimulate, static_cast<std::uint64_t>(i)}));
    const Eigen::VectorXd b = chol_omega * rng.normal_vector(p);
    out.btilde.row(i) = (design.theta_true.mu + b).transpose();

    SubjectData& subj = out.data.subjects[i];
    subj.id = std::to_string(i + 1);
    subj.units.resize(K);
    out.phi.phi[i].resize(K, p);
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd c = chol_psi * rng.normal_vector(p);
      const Eigen::VectorXd phi_ik =
          design.theta_true.mu + design.theta_true.beta.row(k).transpose() + b + c;
      out.phi.phi[i].row(k) = phi_ik.transpose();

      UnitData& unit = subj.units[k];
      unit.unit = k + 1;
      unit.dose.amount = design.dose_for(k);
      unit.dose.tau = design.tau;
      unit.times = design.times_for(k);
      unit.dv.resize(unit.times.size());
      const Eigen::VectorXd natural = model.structural.to_natural(phi_ik);
      for (size_t j = 0; j < unit.times.size(); ++j) {
        const double f = model.structural.predict_natural(unit.times[j], natural, unit.dose);
        if (!std::isfinite(f))
          throw NumericalError("simulate_trial: non-finite prediction for subject " +
                               std::to_string(i + 1) + " unit " + std::to_string(k + 1));
        const double g = model.error.scale(f);
        unit.dv[j] = f + g * sigma * rng.normal();
      }
    }
  }
  return out;
}

void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

void summarize_estimates(const Eigen::MatrixXd& estimates, const Eigen::VectorXd& theta_true_flat,
                         ReplicationReport& report) {
  const Eigen::Index R = estimates.rows(), d = estimates.cols();
  if (theta_true_flat.size() != d)
    throw std::invalid_argument("summarize_estimates: estimate/truth dimension mismatch");
  if (R < 1) throw std::invalid_argument("summarize_estimates: no successful replicates");
  report.rel_bias_pct.resize(d);
  report.rel_rmse_pct.resize(d);
  report.absolute_scale.assign(d, false);
  for (Eigen::Index c = 0; c < d; ++c) {
    const double truth = theta_true_flat[c];
    double denom = std::abs(truth);
    if (denom == 0.0) {
      denom = 1.0;
      report.absolute_scale[c] = true;
    }
    double bias = 0.0, mse = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
      const double err = (estimates(r, c) - truth) / denom;
      bias += err;
      mse += err * err;
    }
    report.rel_bias_pct[c] = 100.0 * bias / R;
    report.rel_rmse_pct[c] = 100.0 * std::sqrt(mse / R);
  }
}

namespace {

RejectionSummary make_rejection_summary(int rejections, int evaluated) {
  RejectionSummary s;
  s.rejections = rejections;
  s.evaluated = evaluated;
  if (evaluated > 0) {
    s.rate = static_cast<double>(rejections) / evaluated;
    const double half = 1.959963984540054 * std::sqrt(s.rate * (1.0 - s.rate) / evaluated);
    s.ci_low = std::max(0.0, s.rate - half);
    s.ci_high = std::min(1.0, s.rate + half);
  }
  return s;
}

}  // namespace

ReplicationReport replicate_study(const TrialDesign& design, const ModelSpec& model,
                                  const ReplicateOptions& options, FitFn fit_fn) {
  design.validate();
  if (options.replicates < 1) throw std::invalid_argument("replicate_study: replicates must be >= 1");
  if ((options.run_wald || options.run_lrt) && options.test_component.empty())
    throw std::invalid_argument("replicate_study: test requested but no component named");
  const auto start = std::chrono::steady_clock::now();

  if (!fit_fn) fit_fn = [](const Dataset& d, const ModelSpec& m, const SaemConfig& c) {
    return run_saem(d, m, c);
  };

  const int K = design.n_units, p = design.theta_true.p();
  const int R = options.replicates;
  int test_unit = -1, test_param = -1;
  if (options.run_wald || options.run_lrt) {
    auto [k, d] = resolve_beta_component(options.test_component, K, model.structural.param_names);
    test_unit = k;
    test_param = d;
  }
  const std::vector<std::string> names =
      theta_component_names(K, p, design.theta_true.structure, model.structural.param_names);
  const Eigen::Index dim = static_cast<Eigen::Index>(names.size());

  struct Slot {
    bool ok = false;
    std::string error;
    Eigen::VectorXd estimate;
    double fim_se = std::numeric_limits<double>::quiet_NaN();
    double wald_p = std::numeric_limits<double>::quiet_NaN();
    double lrt_p = std::numeric_limits<double>::quiet_NaN();
  };
  std::vector<Slot> slots(R);

  parallel_for(R, options.workers, [&](int r) {
    Slot& slot = slots[r];
    try {
      const std::uint64_t rep_seed = derive_seed(options.seed, {kStreamReplicate, static_cast<std::uint64_t>(r)});
      const SimResult sim = simulate_trial(design, model, rep_seed);

      SaemConfig fit_cfg = options.fit;
      fit_cfg.seed = derive_seed(rep_seed, {1});
      const FitResult full = fit_fn(sim.data, model, fit_cfg);
      slot.estimate = theta_flatten(full.theta_hat);

      if (options.run_wald || options.run_lrt) {
        const BetaZeroMask mask = fit_cfg.beta_zero_mask.size() != 0
                                      ? fit_cfg.beta_zero_mask
                                      : default_beta_mask(K, p);
        const FimResult fim = linearized_fim(sim.data, model, full.theta_hat, full.phi_cond_mean, mask);
        const std::string canonical = beta_component_name(test_unit, K, model.structural.param_names[test_param]);
        for (size_t a = 0; a < fim.names.size(); ++a)
          if (fim.names[a] == canonical) slot.fim_se = fim.se[a];
        if (options.run_wald) {
          const TestResult w =
              wald_test(full.theta_hat.beta(test_unit, test_param), slot.fim_se, canonical);
          slot.wald_p = w.p_value;
        }
        if (options.run_lrt) {
          SaemConfig red_cfg = options.fit;
          red_cfg.seed = derive_seed(rep_seed, {2});
          red_cfg.beta_zero_mask = mask;
          red_cfg.beta_zero_mask(test_unit, test_param) = true;
          red_cfg.theta_init.beta(test_unit, test_param) = 0.0;
          const FitResult reduced = fit_fn(sim.data, model, red_cfg);
          const LoglikEstimate ll_full =
              estimate_loglik(sim.data, model, full.theta_hat, options.fit.kernels, options.inference,
                              derive_seed(rep_seed, {3}));
          const LoglikEstimate ll_red =
              estimate_loglik(sim.data, model, reduced.theta_hat, options.fit.kernels, options.inference,
                              derive_seed(rep_seed, {4}));
          const TestResult t = lrt(ll_full, ll_red, canonical);
          slot.lrt_p = t.p_value;
        }
      }
      slot.ok = true;
    } catch (const std::exception& e) {
      slot.ok = false;
      slot.error = e.what();
    }
  });

  ReplicationReport report;
  report.param_names = names;
  report.theta_true_flat = theta_flatten(design.theta_true);
  report.replicates = R;
  report.seed = options.seed;

  int ok_count = 0;
  for (const auto& s : slots)
    if (s.ok) ++ok_count;
  report.failures = R - ok_count;
  for (int r = 0; r < R; ++r)
    if (!slots[r].ok)
      report.failure_messages.push_back("replicate " + std::to_string(r) + ": " + slots[r].error);
  if (report.failures > options.max_failure_rate * R)
    throw NumericalError("replicate_study: " + std::to_string(report.failures) + "/" + std::to_string(R) +
                         " replicates failed; first: " +
                         (report.failure_messages.empty() ? "?" : report.failure_messages.front()));
  if (ok_count == 0) throw NumericalError("replicate_study: no successful replicates");

  Eigen::MatrixXd estimates(ok_count, dim);
  int row = 0;
  int wald_rej = 0, wald_n = 0, lrt_rej = 0, lrt_n = 0;
  double se_sum = 0.0;
  int se_n = 0;
  std::vector<double> comp_estimates;
  for (int r = 0; r < R; ++r) {
    const Slot& s = slots[r];
    if (!s.ok) continue;
    estimates.row(row++) = s.estimate.transpose();
    if (options.run_wald && std::isfinite(s.wald_p)) {
      ++wald_n;
      if (s.wald_p < options.alpha) ++wald_rej;
    }
    if (options.run_lrt && std::isfinite(s.lrt_p)) {
      ++lrt_n;
      if (s.lrt_p < options.alpha) ++lrt_rej;
    }
    if (std::isfinite(s.fim_se)) {
      se_sum += s.fim_se;
      ++se_n;
    }
  }
  summarize_estimates(estimates, report.theta_true_flat, report);

  if (options.run_wald) report.wald = make_rejection_summary(wald_rej, wald_n);
  if (options.run_lrt) report.lrt = make_rejection_summary(lrt_rej, lrt_n);

  if (test_unit >= 0) {
    const std::string canonical =
        beta_component_name(test_unit, K, model.structural.param_names[test_param]);
    Eigen::Index comp_idx = -1;
    for (Eigen::Index c = 0; c < dim; ++c)
      if (names[c] == canonical) comp_idx = c;
    if (comp_idx >= 0 && ok_count > 1) {
      const Eigen::VectorXd col = estimates.col(comp_idx);
      const double mean = col.mean();
      report.empirical_sd_component =
          std::sqrt((col.array() - mean).square().sum() / (col.size() - 1));
    }
    if (se_n > 0) report.mean_fim_se_component = se_sum / se_n;
  }
  if (options.keep_estimates) report.estimates = std::move(estimates);

  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace saemx
