#pragma once

#include <Eigen/Dense>

#include "saemx/model.hpp"
#include "saemx/types.hpp"

namespace saemx {

// Joint covariance of the stacked unit parameters phi_i = (phi_i1..phi_iK):
// K x K blocks of size p x p, omega + psi on the diagonal, omega elsewhere.
Eigen::MatrixXd gamma_matrix(const ThetaParams& theta, int K);

// Inverse of a symmetric PSD matrix with eigenvalues floored at
// eps = 1e-10 * trace / p, so that boundary estimates (variances shrunk to
// zero) stay invertible instead of aborting the run.
struct FlooredInverse {
  Eigen::MatrixXd inv;
  double log_det = 0.0;  // log-determinant of the floored matrix
  bool floored = false;
};
FlooredInverse floored_spd_inverse(const Eigen::MatrixXd& a);

inline constexpr double kSigma2Min = 1e-10;
// eigenvalue stand-in when a covariance iterate is exactly the zero matrix
inline constexpr double kZeroScale = 1e-30;

// Conditional distribution of the subject-level effect btilde_i = mu + b_i
// given phi_i:  btilde_i | phi_i ~ N(m_i, V) with
//   V = (omega^-1 + K psi^-1)^-1
//   m_i = V (psi^-1 sum_k (phi_ik - beta_k) + omega^-1 mu)
struct PosteriorBMoments {
  Eigen::MatrixXd m;  // n x p, row i = m_i
  Eigen::MatrixXd V;  // p x p, shared across subjects
};
PosteriorBMoments posterior_b_moments(const IndividualParams& phi, const ThetaParams& theta);

// Log-likelihood of the complete data (y, phi, btilde):
//   residual term      sum_ijk log N(y_ijk; f, sigma2 g^2)
//   within-subject     sum_ik  log N(phi_ik; btilde_i + beta_k, psi)
//   between-subject    sum_i   log N(btilde_i; mu, omega)
// btilde is n x p, row i = btilde_i.
double complete_loglik(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                       const Eigen::MatrixXd& btilde, const ThetaParams& theta);

// Expectation of complete_loglik over btilde_i ~ N(m(phi_i, theta_prev), V(theta_prev)):
// the Gaussian quadratic forms integrate to the forms at m_i plus trace
// corrections  -(nK/2) tr(psi^-1 V')  and  -(n/2) tr(omega^-1 V').
double conditional_R(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                     const ThetaParams& theta, const ThetaParams& theta_prev);

// log N(x; mean, cov) with cov given by its floored inverse
double gaussian_logpdf_floored(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                               const FlooredInverse& cov_inv);

}  // namespace saemx
