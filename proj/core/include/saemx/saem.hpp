#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "saemx/model.hpp"
#include "saemx/prob.hpp"
#include "saemx/sampler.hpp"
#include "saemx/types.hpp"

namespace saemx {

// Sufficient statistics of the complete-data model, accumulated by
// stochastic approximation:
//   s1 row i  = sum_k phi_ik
//   s2 row k  = sum_i phi_ik
//   s3        = sum_i m_i m_i^T          (m_i = posterior mean of btilde_i)
//   s4        = sum_ik (phi_ik - m_i)(phi_ik - m_i)^T
//   s5        = sum over observations of ((y - f)/g)^2
struct SuffStats {
  Eigen::MatrixXd s1;  // n x p
  Eigen::MatrixXd s2;  // K x p
  Eigen::MatrixXd s3;  // p x p
  Eigen::MatrixXd s4;  // p x p
  double s5 = 0.0;

  static SuffStats zero(int n, int K, int p);
};

struct SaemConfig {
  int n_iterations = 500;
  int burn_in = 200;  // iterations with step size 1, then 1/(l - burn_in)
  // parallel MCMC chains per subject; 0 picks ceil(300 / n_subjects) capped
  // at 16 so the per-iteration statistics stay stable on small studies
  int n_chains = 0;
  // during burn-in a variance iterate may not shrink by more than this factor
  // per iteration; 0 (the default) disables the guard, which in two-level
  // models can push variance mass between the subject and unit levels
  double anneal_decay = 0.0;
  ThetaParams theta_init;
  KernelConfig kernels;
  BetaZeroMask beta_zero_mask;  // defaults to reference-unit-only when empty
  std::uint64_t seed = 0;

  double step_size(int iteration) const {
    return iteration <= burn_in ? 1.0 : 1.0 / (iteration - burn_in);
  }
  void validate(int n, int K, int p) const;
};

struct IterationRecord {
  int iteration = 0;
  Eigen::VectorXd theta_flat;
  double acc_prior = 0.0, acc_rw_full = 0.0, acc_rw_component = 0.0;
  bool floored_omega = false, floored_psi = false, floored_sigma2 = false;
};

struct FitDiagnostics {
  // (max - min) / max(|median|, 1e-12) of each theta component over the last
  // 50 iterations; stabilization means all ratios <= 0.05
  Eigen::VectorXd rel_range_last50;
  bool stabilized = false;
  int floored_iterations = 0;
  double post_burnin_acc_prior = 0.0, post_burnin_acc_full = 0.0, post_burnin_acc_component = 0.0;
};

struct FitResult {
  ThetaParams theta_hat;
  std::vector<IterationRecord> trace;
  std::vector<Eigen::MatrixXd> phi_cond_mean;  // per subject, K x p
  SuffStats final_stats;
  FitDiagnostics diagnostics;
};

// exact sufficient statistics of the current latent draw
SuffStats compute_stats(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                        const ThetaParams& theta);

// s <- s + gamma (S(y, phi, theta) - s)
SuffStats sa_update(const SuffStats& s, const Dataset& data, const ModelSpec& model,
                    const IndividualParams& phi, const ThetaParams& theta, double gamma);

struct MStepResult {
  ThetaParams theta;
  bool floored_omega = false, floored_psi = false, floored_sigma2 = false;
};

// Closed-form maximizer of the stochastic-approximation objective given the
// accumulated statistics, with theta_prev supplying the posterior moments:
//   mu'    = V Psi^-1 (s1_bar - sum_k beta_k_prev) + V Omega^-1 mu_prev
//   beta'  = s2_k / n - mu'                (masked entries stay zero)
//   omega' = V + s3/n - mu' mu'^T
//   psi'   = V + [s4 - sum_k (beta'_k c_k^T + c_k beta'_k^T) + n sum_k beta'_k beta'_k^T] / (nK)
//            with c_k = s2_k - n mu'  (equal to n beta'_k when unconstrained)
//   sigma2'= s5 / total observations
// Covariance updates are symmetrized, projected to diagonal when configured,
// and eigenvalue-floored at zero.
MStepResult m_step(const SuffStats& stats, const ThetaParams& theta_prev, const Dataset& data,
                   const BetaZeroMask& beta_zero_mask);

// The objective the M-step maximizes, up to terms constant in theta; used to
// verify first-order stationarity of m_step outputs.
double sa_objective(const ThetaParams& theta, const SuffStats& stats, const ThetaParams& theta_prev,
                    const Dataset& data);

// Stochastic-approximation average of a latent trajectory over post-burn-in
// iterations; with step sizes 1/(l - burn_in) this is the running mean.
std::vector<Eigen::MatrixXd> conditional_phi_mean(const std::vector<IndividualParams>& phi_by_iteration,
                                                  int burn_in);

FitResult run_saem(const Dataset& data, const ModelSpec& model, const SaemConfig& config);

}  // namespace saemx
