#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "saemx/inference.hpp"
#include "saemx/saem.hpp"
#include "saemx/types.hpp"

namespace saemx {

// Design of a simulated two-unit trial: per-unit sampling grids and dose
// records, plus the generating parameter values.
struct TrialDesign {
  int n_subjects = 24;
  int n_units = 2;
  std::vector<std::vector<double>> times;  // one grid per unit (or one shared grid)
  std::vector<double> dose;                // one amount per unit (or one shared amount)
  std::optional<double> tau;
  ThetaParams theta_true;

  const std::vector<double>& times_for(int k) const { return times.size() == 1 ? times[0] : times[k]; }
  double dose_for(int k) const { return dose.size() == 1 ? dose[0] : dose[k]; }
  void validate() const;
};

struct SimResult {
  Dataset data;
  IndividualParams phi;      // latent parameters actually drawn
  Eigen::MatrixXd btilde;    // n x p subject effects mu + b_i
};

// Draws b_i ~ N(0, omega), c_ik ~ N(0, psi), observation noise
// eps ~ N(0, sigma2), and fills a dataset under the given model.
SimResult simulate_trial(const TrialDesign& design, const ModelSpec& model, std::uint64_t seed);

// run fn(0..count-1) on a small worker pool; fn must not throw
void parallel_for(int count, int workers, const std::function<void(int)>& fn);

struct ReplicateOptions {
  int replicates = 100;
  std::uint64_t seed = 0;
  int workers = 0;  // 0 = hardware concurrency
  SaemConfig fit;   // per-replicate seeds are derived from `seed`, not fit.seed
  InferenceConfig inference;
  bool run_wald = false;
  bool run_lrt = false;
  std::string test_component;  // e.g. "beta.logAUC"
  double alpha = 0.05;
  bool keep_estimates = true;
  // abort if more than this fraction of replicates fails
  double max_failure_rate = 0.05;
};

struct RejectionSummary {
  int rejections = 0;
  int evaluated = 0;
  double rate = 0.0;
  double ci_low = 0.0, ci_high = 0.0;  // normal-approximation 95% interval
};

struct ReplicationReport {
  std::vector<std::string> param_names;  // canonical component names
  Eigen::VectorXd theta_true_flat;
  Eigen::VectorXd rel_bias_pct;
  Eigen::VectorXd rel_rmse_pct;
  // components whose true value is zero are summarized on the absolute
  // scale (x100) instead of relative to the truth
  std::vector<bool> absolute_scale;

  int replicates = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;
  std::optional<RejectionSummary> wald;
  std::optional<RejectionSummary> lrt;

  // calibration of the FIM standard error for the tested component
  double empirical_sd_component = 0.0;
  double mean_fim_se_component = 0.0;

  std::uint64_t seed = 0;
  double runtime_seconds = 0.0;
  Eigen::MatrixXd estimates;  // successful replicates x components (when kept)
};

// bias/RMSE summary as a pure function of the estimate table, so reports can
// be regenerated from persisted estimates
void summarize_estimates(const Eigen::MatrixXd& estimates, const Eigen::VectorXd& theta_true_flat,
                         ReplicationReport& report);

using FitFn = std::function<FitResult(const Dataset&, const ModelSpec&, const SaemConfig&)>;

// Simulates `replicates` datasets, fits each one (plus the constrained fit
// when the likelihood-ratio test is requested) and aggregates bias, RMSE and
// test rejection rates.
ReplicationReport replicate_study(const TrialDesign& design, const ModelSpec& model,
                                  const ReplicateOptions& options, FitFn fit_fn = nullptr);

}  // namespace saemx
