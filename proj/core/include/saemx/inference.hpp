#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "saemx/model.hpp"
#include "saemx/sampler.hpp"
#include "saemx/types.hpp"

namespace saemx {

struct InferenceConfig {
  int loglik_samples = 5000;          // importance-sampling draws per subject
  double instrumental_inflation = 1.2;  // covariance inflation of the instrumental
  int posterior_sweeps = 500;         // fixed-theta MCMC sweeps used to build instrumentals
  int posterior_burnin = 250;
  void validate() const;
};

struct LoglikEstimate {
  double value = 0.0;
  double mc_standard_error = 0.0;
  int samples = 0;
};

// Per-subject Gaussian instrumental for importance sampling, fitted to the
// empirical mean/covariance of posterior draws with the covariance inflated.
struct GaussianInstrumental {
  Eigen::VectorXd mean;       // K*p
  Eigen::MatrixXd chol_lower; // L with L L^T = inflated covariance
  double log_det = 0.0;       // log det of the inflated covariance
};

std::vector<GaussianInstrumental> build_instrumentals(
    const std::vector<std::vector<Eigen::VectorXd>>& draws, double inflation);

// Importance-sampling estimate of the marginal log-likelihood
//   log p(y; theta) = sum_i log (1/T) sum_t p(y_i, phi^(t); theta) / q_i(phi^(t))
// with the per-subject Monte Carlo standard error combined in quadrature.
LoglikEstimate importance_sampling_loglik(const Dataset& data, const ModelSpec& model,
                                          const ThetaParams& theta,
                                          const std::vector<GaussianInstrumental>& instrumentals,
                                          int T, std::uint64_t seed);

// convenience wrapper: builds instrumentals from a fresh fixed-theta
// posterior run, then estimates
LoglikEstimate estimate_loglik(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                               const KernelConfig& kernels, const InferenceConfig& cfg,
                               std::uint64_t seed);

// Fisher information of the model linearized around the conditional means
// phi_bar: per subject y_i ~ N(f(phi_bar) + J (mean(theta) - phi_bar),
// J Gamma J^T + sigma2 diag(g^2)), with J the finite-difference Jacobian of
// f at phi_bar.  Charted in (mu, free beta, log-variances, log sigma2) for
// diagonal structure; raw covariance entries otherwise.  Components at the
// zero-variance boundary are excluded and reported without standard errors.
struct FimResult {
  Eigen::MatrixXd fim;                // in the estimation chart
  std::vector<std::string> names;     // chart component names (canonical naming)
  Eigen::VectorXd se;                 // natural-scale standard errors (delta method)
  std::vector<std::string> excluded;  // boundary components with no SE
  double condition = 0.0;             // eigenvalue ratio of the FIM
  bool invertible = false;
};

FimResult linearized_fim(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                         const std::vector<Eigen::MatrixXd>& phi_cond_mean,
                         const BetaZeroMask& beta_zero_mask);

struct TestResult {
  std::string method;     // "wald" or "lrt"
  std::string component;  // tested beta component, canonical name
  double statistic = 0.0;
  double p_value = 1.0;
  bool mc_caveat = false;  // LRT statistic within 3 combined MC SEs of the 5% threshold
};

// upper tail of the chi-square distribution with one degree of freedom
double chi2_1_upper_tail(double x);

TestResult wald_test(double beta_hat, double standard_error, const std::string& component);

TestResult lrt(const LoglikEstimate& full, const LoglikEstimate& reduced, const std::string& component);

}  // namespace saemx
