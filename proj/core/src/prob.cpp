#include "saemx/prob.hpp"

#include <cmath>
#include <limits>

#include "saemx/errors.hpp"

namespace saemx {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
}

Eigen::MatrixXd gamma_matrix(const ThetaParams& theta, int K) {
  const int p = theta.p();
  if (K < 1) throw std::invalid_argument("gamma_matrix: K must be >= 1");
  Eigen::MatrixXd gamma(K * p, K * p);
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l)
      gamma.block(k * p, l * p, p, p) = (k == l) ? (theta.omega + theta.psi).eval() : theta.omega;
  return gamma;
}

FlooredInverse floored_spd_inverse(const Eigen::MatrixXd& a) {
  const int p = static_cast<int>(a.rows());
  const double tr = a.trace();
  if (!a.allFinite() || tr < 0.0)
    throw NumericalError("floored_spd_inverse: matrix trace must be non-negative and finite, got trace=" +
                         std::to_string(tr));
  // a boundary estimate can be the zero matrix; kZeroScale keeps the limit
  // (huge precision, posterior pinned at the prior mean) finite
  const double eps = tr > 0.0 ? 1e-10 * tr / p : kZeroScale;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw NumericalError("floored_spd_inverse: eigendecomposition failed");
  FlooredInverse out;
  Eigen::VectorXd lam = es.eigenvalues();
  out.floored = (lam.array() < eps).any();
  lam = lam.cwiseMax(eps);
  out.log_det = lam.array().log().sum();
  out.inv = es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  return out;
}

PosteriorBMoments posterior_b_moments(const IndividualParams& phi, const ThetaParams& theta) {
  const int p = theta.p(), K = theta.K();
  const int n = phi.n();
  const FlooredInverse omega_inv = floored_spd_inverse(theta.omega);
  const FlooredInverse psi_inv = floored_spd_inverse(theta.psi);

  Eigen::MatrixXd prec = omega_inv.inv + K * psi_inv.inv;
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw NumericalError("posterior_b_moments: posterior precision not SPD");

  PosteriorBMoments out;
  out.V = llt.solve(Eigen::MatrixXd::Identity(p, p));
  out.m.resize(n, p);
  const Eigen::VectorXd omega_mu = omega_inv.inv * theta.mu;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd centered_sum = Eigen::VectorXd::Zero(p);
    for (int k = 0; k < K; ++k)
      centered_sum += phi.phi[i].row(k).transpose() - theta.beta.row(k).transpose();
    out.m.row(i) = llt.solve(psi_inv.inv * centered_sum + omega_mu).transpose();
  }
  return out;
}

double gaussian_logpdf_floored(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                               const FlooredInverse& cov_inv) {
  const Eigen::VectorXd d = x - mean;
  const double quad = d.dot(cov_inv.inv * d);
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + cov_inv.log_det + quad);
}

namespace {

// sum over all observations of log N(y; f, sigma2 g^2); -inf on any
// non-finite prediction or non-positive scale
double residual_loglik(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                       double sigma2) {
  double total = 0.0;
  const double log_s2 = std::log(sigma2);
  for (int i = 0; i < data.n_subjects(); ++i) {
    const SubjectData& subj = data.subjects[i];
    for (size_t k = 0; k < subj.units.size(); ++k) {
      const UnitData& u = subj.units[k];
      const Eigen::VectorXd natural = model.structural.to_natural(phi.phi[i].row(static_cast<int>(k)).transpose());
      for (int j = 0; j < u.n_obs(); ++j) {
        const double f = model.structural.predict_natural(u.times[j], natural, u.dose);
        if (!std::isfinite(f)) return -std::numeric_limits<double>::infinity();
        const double g = model.error.scale(f);
        if (!(g > 0.0)) return -std::numeric_limits<double>::infinity();
        const double r = (u.dv[j] - f) / g;
        total += -0.5 * (kLog2Pi + log_s2 + 2.0 * std::log(g) + r * r / sigma2);
      }
    }
  }
  return total;
}

}  // namespace

double complete_loglik(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                       const Eigen::MatrixXd& btilde, const ThetaParams& theta) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  const FlooredInverse omega_inv = floored_spd_inverse(theta.omega);
  const FlooredInverse psi_inv = floored_spd_inverse(theta.psi);

  double total = residual_loglik(data, model, phi, theta.sigma2);

  total += -0.5 * n * K * (p * kLog2Pi + psi_inv.log_det);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd d =
          phi.phi[i].row(k).transpose() - btilde.row(i).transpose() - theta.beta.row(k).transpose();
      total += -0.5 * d.dot(psi_inv.inv * d);
    }

  total += -0.5 * n * (p * kLog2Pi + omega_inv.log_det);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd d = btilde.row(i).transpose() - theta.mu;
    total += -0.5 * d.dot(omega_inv.inv * d);
  }
  return total;
}

double conditional_R(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                     const ThetaParams& theta, const ThetaParams& theta_prev) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  const PosteriorBMoments post = posterior_b_moments(phi, theta_prev);
  const FlooredInverse omega_inv = floored_spd_inverse(theta.omega);
  const FlooredInverse psi_inv = floored_spd_inverse(theta.psi);

  double total = residual_loglik(data, model, phi, theta.sigma2);

  total += -0.5 * n * K * (p * kLog2Pi + psi_inv.log_det);
  total += -0.5 * n * K * (psi_inv.inv * post.V).trace();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd d =
          phi.phi[i].row(k).transpose() - post.m.row(i).transpose() - theta.beta.row(k).transpose();
      total += -0.5 * d.dot(psi_inv.inv * d);
    }

  total += -0.5 * n * (p * kLog2Pi + omega_inv.log_det);
  total += -0.5 * n * (omega_inv.inv * post.V).trace();
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd d = post.m.row(i).transpose() - theta.mu;
    total += -0.5 * d.dot(omega_inv.inv * d);
  }
  return total;
}

}  // namespace saemx
