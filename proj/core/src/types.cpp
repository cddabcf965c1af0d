#include "saemx/types.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "saemx/errors.hpp"

namespace saemx {

CovStructure cov_structure_from_name(const std::string& name) {
  if (name == "diagonal") return CovStructure::Diagonal;
  if (name == "full") return CovStructure::Full;
  throw ConfigError("unknown covariance structure '" + name + "' (expected 'diagonal' or 'full')");
}

std::string cov_structure_name(CovStructure s) {
  return s == CovStructure::Diagonal ? "diagonal" : "full";
}

int SubjectData::n_obs() const {
  int total = 0;
  for (const auto& u : units) total += u.n_obs();
  return total;
}

int Dataset::n_units() const {
  return subjects.empty() ? 0 : static_cast<int>(subjects.front().units.size());
}

int Dataset::total_obs() const {
  int total = 0;
  for (const auto& s : subjects) total += s.n_obs();
  return total;
}

void Dataset::validate() const {
  if (subjects.empty()) throw std::invalid_argument("dataset has no subjects");
  const int K = n_units();
  if (K < 2) throw std::invalid_argument("dataset needs at least 2 units per subject, got " + std::to_string(K));
  for (const auto& s : subjects) {
    if (static_cast<int>(s.units.size()) != K)
      throw std::invalid_argument("subject '" + s.id + "' has " + std::to_string(s.units.size()) +
                                  " units, expected " + std::to_string(K));
    std::set<int> labels;
    for (const auto& u : s.units) {
      if (!labels.insert(u.unit).second)
        throw std::invalid_argument("subject '" + s.id + "': duplicate unit label " + std::to_string(u.unit));
      if (u.times.empty())
        throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) + " has no observations");
      if (u.times.size() != u.dv.size())
        throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                    ": times/dv length mismatch");
      for (size_t j = 0; j < u.times.size(); ++j) {
        if (!(u.times[j] >= 0.0) || !std::isfinite(u.times[j]))
          throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                      ": invalid time " + std::to_string(u.times[j]));
        if (j > 0 && !(u.times[j] > u.times[j - 1]))
          throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                      ": times not strictly increasing at t=" + std::to_string(u.times[j]));
        if (!std::isfinite(u.dv[j]))
          throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                      ": non-finite observation");
      }
      if (!(u.dose.amount > 0.0))
        throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                    ": dose must be positive");
      if (u.dose.tau && !(*u.dose.tau > 0.0))
        throw std::invalid_argument("subject '" + s.id + "' unit " + std::to_string(u.unit) +
                                    ": tau must be positive");
    }
  }
}

IndividualParams IndividualParams::constant(int n, const Eigen::MatrixXd& value) {
  IndividualParams out;
  out.phi.assign(n, value);
  return out;
}

Eigen::VectorXd ThetaParams::stacked_mean() const {
  const int pp = p(), KK = K();
  Eigen::VectorXd out(KK * pp);
  for (int k = 0; k < KK; ++k) out.segment(k * pp, pp) = unit_mean(k);
  return out;
}

void ThetaParams::validate() const {
  const int pp = p(), KK = K();
  if (pp < 1) throw std::invalid_argument("theta: empty mu");
  if (KK < 1) throw std::invalid_argument("theta: beta needs at least one row");
  if (beta.cols() != pp) throw std::invalid_argument("theta: beta column count != p");
  if (beta.row(0).cwiseAbs().maxCoeff() != 0.0)
    throw std::invalid_argument("theta: beta row for the reference unit must be zero");
  if (omega.rows() != pp || omega.cols() != pp) throw std::invalid_argument("theta: omega must be p x p");
  if (psi.rows() != pp || psi.cols() != pp) throw std::invalid_argument("theta: psi must be p x p");
  if (!omega.isApprox(omega.transpose(), 1e-12)) throw std::invalid_argument("theta: omega not symmetric");
  if (!psi.isApprox(psi.transpose(), 1e-12)) throw std::invalid_argument("theta: psi not symmetric");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("theta: sigma2 must be positive");
  if (structure == CovStructure::Diagonal) {
    for (int a = 0; a < pp; ++a)
      for (int b = 0; b < pp; ++b)
        if (a != b && (omega(a, b) != 0.0 || psi(a, b) != 0.0))
          throw std::invalid_argument("theta: diagonal structure requires zero off-diagonal entries");
  }
  if (!mu.allFinite() || !beta.allFinite() || !omega.allFinite() || !psi.allFinite() || !std::isfinite(sigma2))
    throw std::invalid_argument("theta: non-finite entries");
}

ThetaParams ThetaParams::diagonal(const Eigen::VectorXd& mu, const Eigen::MatrixXd& beta,
                                  const Eigen::VectorXd& omega_diag, const Eigen::VectorXd& psi_diag,
                                  double sigma2) {
  ThetaParams t;
  t.mu = mu;
  t.beta = beta;
  t.omega = omega_diag.asDiagonal();
  t.psi = psi_diag.asDiagonal();
  t.sigma2 = sigma2;
  t.structure = CovStructure::Diagonal;
  return t;
}

BetaZeroMask default_beta_mask(int K, int p) {
  BetaZeroMask mask(K, p);
  mask.setConstant(false);
  mask.row(0).setConstant(true);
  return mask;
}

std::string beta_component_name(int k, int K, const std::string& param_name) {
  if (K == 2) return "beta." + param_name;
  return "beta" + std::to_string(k + 1) + "." + param_name;
}

std::vector<std::string> theta_component_names(int K, int p, CovStructure structure,
                                               const std::vector<std::string>& param_names) {
  if (static_cast<int>(param_names.size()) != p)
    throw std::invalid_argument("theta_component_names: param_names size != p");
  std::vector<std::string> names;
  for (int d = 0; d < p; ++d) names.push_back("mu." + param_names[d]);
  for (int k = 1; k < K; ++k)
    for (int d = 0; d < p; ++d) names.push_back(beta_component_name(k, K, param_names[d]));
  auto cov_block = [&](const std::string& var_prefix, const std::string& cov_prefix) {
    for (int d = 0; d < p; ++d) names.push_back(var_prefix + "." + param_names[d]);
    if (structure == CovStructure::Full)
      for (int a = 1; a < p; ++a)
        for (int b = 0; b < a; ++b) names.push_back(cov_prefix + "." + param_names[a] + "." + param_names[b]);
  };
  cov_block("omega2", "omega");
  cov_block("psi2", "psi");
  names.push_back("sigma2");
  return names;
}

Eigen::VectorXd theta_flatten(const ThetaParams& theta) {
  const int p = theta.p(), K = theta.K();
  std::vector<double> vals;
  for (int d = 0; d < p; ++d) vals.push_back(theta.mu[d]);
  for (int k = 1; k < K; ++k)
    for (int d = 0; d < p; ++d) vals.push_back(theta.beta(k, d));
  auto cov_block = [&](const Eigen::MatrixXd& m) {
    for (int d = 0; d < p; ++d) vals.push_back(m(d, d));
    if (theta.structure == CovStructure::Full)
      for (int a = 1; a < p; ++a)
        for (int b = 0; b < a; ++b) vals.push_back(m(a, b));
  };
  cov_block(theta.omega);
  cov_block(theta.psi);
  vals.push_back(theta.sigma2);
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

ThetaParams theta_unflatten(const Eigen::VectorXd& flat, int K, int p, CovStructure structure) {
  ThetaParams t;
  t.structure = structure;
  t.mu.resize(p);
  t.beta = Eigen::MatrixXd::Zero(K, p);
  t.omega = Eigen::MatrixXd::Zero(p, p);
  t.psi = Eigen::MatrixXd::Zero(p, p);
  Eigen::Index idx = 0;
  for (int d = 0; d < p; ++d) t.mu[d] = flat[idx++];
  for (int k = 1; k < K; ++k)
    for (int d = 0; d < p; ++d) t.beta(k, d) = flat[idx++];
  auto cov_block = [&](Eigen::MatrixXd& m) {
    for (int d = 0; d < p; ++d) m(d, d) = flat[idx++];
    if (structure == CovStructure::Full)
      for (int a = 1; a < p; ++a)
        for (int b = 0; b < a; ++b) {
          m(a, b) = flat[idx++];
          m(b, a) = m(a, b);
        }
  };
  cov_block(t.omega);
  cov_block(t.psi);
  t.sigma2 = flat[idx++];
  if (idx != flat.size()) throw std::invalid_argument("theta_unflatten: size mismatch");
  return t;
}

std::pair<int, int> resolve_beta_component(const std::string& component, int K,
                                           const std::vector<std::string>& param_names) {
  const int p = static_cast<int>(param_names.size());
  for (int k = 1; k < K; ++k) {
    for (int d = 0; d < p; ++d) {
      if (component == beta_component_name(k, K, param_names[d])) return {k, d};
      // accept the explicit row form for K == 2 as well ("beta2.X")
      if (component == "beta" + std::to_string(k + 1) + "." + param_names[d]) return {k, d};
    }
  }
  throw ConfigError("unknown beta component '" + component + "'");
}

}  // namespace saemx
