#pragma once

#include <Eigen/Dense>
#include <vector>

#include "saemx/model.hpp"
#include "saemx/prob.hpp"
#include "saemx/rng.hpp"
#include "saemx/types.hpp"

namespace saemx {

struct KernelConfig {
  int sweeps_prior = 1;
  int sweeps_rw_full = 1;
  int sweeps_rw_component = 1;
  double rho_init = 0.1;           // initial scale multiplier for both random walks
  double target_acceptance = 0.30;
  double adapt_rate = 2.0;         // Robbins-Monro gain is adapt_rate / iteration
  bool adapt_during_burnin = true;
  void validate() const;
};

// Adaptive proposal scales.  The full random walk proposes with covariance
// rho_full * Gamma; component walks propose with sd comp_mult * sqrt(diag Gamma).
struct KernelScales {
  double rho_full = 0.1;
  Eigen::VectorXd comp_mult;  // length K*p
  static KernelScales init(const KernelConfig& cfg, int Kp);
};

struct AcceptanceCounters {
  long prior_proposed = 0, prior_accepted = 0;
  long full_proposed = 0, full_accepted = 0;
  Eigen::ArrayXd comp_proposed, comp_accepted;  // per component, length K*p

  static AcceptanceCounters zero(int Kp);
  void reset();
  double prior_rate() const;
  double full_rate() const;
  double comp_rate() const;  // pooled over components
};

// Per-theta precomputation shared by all subjects within one iteration:
// the joint prior N(stacked_mean, Gamma) in stacked (unit-major) form.
struct SamplerWorkspace {
  Eigen::VectorXd mean;        // K*p
  Eigen::MatrixXd gamma;       // K*p x K*p
  Eigen::MatrixXd chol_lower;  // L with L L^T = Gamma (floored if needed)
  Eigen::MatrixXd gamma_inv;
  double log_det_gamma = 0.0;
  int K = 0, p = 0;

  static SamplerWorkspace build(const ThetaParams& theta, int K);

  double prior_logpdf(const Eigen::VectorXd& phi_stacked) const;
  double prior_quadform(const Eigen::VectorXd& phi_stacked) const;
  Eigen::VectorXd stack(const Eigen::MatrixXd& phi_i) const;    // K x p -> K*p
  Eigen::MatrixXd unstack(const Eigen::VectorXd& stacked) const;
};

// Chain over the latent individual parameters, with the per-unit data
// log-likelihood cached so kernels only recompute what a proposal touches.
struct ChainState {
  IndividualParams phi;
  Eigen::MatrixXd unit_loglik;  // n x K

  static ChainState init(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                         const IndividualParams& phi0);
};

// log p(y_ik | phi_ik; sigma2); -inf on non-finite predictions
double log_unit_lik(const UnitData& unit, const Eigen::VectorXd& phi_ik, const ModelSpec& model,
                    double sigma2);

// Metropolis acceptance decision for a given log ratio; exposed separately so
// the accept/reject rule is testable at fixed proposals.
bool mh_accept(double log_ratio, RngStream& rng);

// Kernel 1: independence proposal from the prior N(mean, Gamma); the prior
// density cancels, leaving the data likelihood ratio.
void mh_step_prior(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                   const ThetaParams& theta, const SamplerWorkspace& ws, AcceptanceCounters& acc,
                   RngStream& rng);

// Kernel 2: joint random walk phi' = phi + sqrt(rho) L z.
void mh_step_rw_full(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                     const ThetaParams& theta, const SamplerWorkspace& ws, double rho,
                     AcceptanceCounters& acc, RngStream& rng);

// Kernel 3: one scalar random-walk update per component of phi_i, in
// unit-major order; scales has length K*p.
void mh_step_rw_component(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                          const ThetaParams& theta, const SamplerWorkspace& ws,
                          const Eigen::VectorXd& scales, AcceptanceCounters& acc, RngStream& rng);

// One full simulation pass for subject i: configured sweeps of the three
// kernels in order (prior, full walk, componentwise walk).
void sweep_subject(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                   const ThetaParams& theta, const SamplerWorkspace& ws, const KernelConfig& cfg,
                   const KernelScales& scales, AcceptanceCounters& acc, RngStream& rng);

// Robbins-Monro update of a log proposal scale toward the target acceptance
// rate; gain decays as adapt_rate / iteration.
double adapt_scale(double scale, double observed_acceptance, int iteration, const KernelConfig& cfg);

// apply adapt_scale to the full-walk rho and each component multiplier
void adapt_all_scales(KernelScales& scales, const AcceptanceCounters& acc, int iteration,
                      const KernelConfig& cfg);

// Fixed-theta posterior sampling: runs n_sweeps of the kernel cycle per
// subject (adapting during the first burn_in sweeps) and returns the stacked
// post-burn-in draws, one vector of length K*p per kept sweep per subject.
std::vector<std::vector<Eigen::VectorXd>> posterior_draws(const Dataset& data, const ModelSpec& model,
                                                          const ThetaParams& theta, int n_sweeps,
                                                          int burn_in, const KernelConfig& cfg,
                                                          std::uint64_t seed);

}  // namespace saemx
