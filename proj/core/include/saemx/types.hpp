#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace saemx {

enum class CovStructure { Diagonal, Full };

CovStructure cov_structure_from_name(const std::string& name);
std::string cov_structure_name(CovStructure s);

struct DoseRecord {
  double amount = 0.0;
  std::optional<double> tau;  // dosing interval, only meaningful for steady-state models
};

// one unit (occasion/period) of one subject
struct UnitData {
  int unit = 1;  // 1-based label as it appears in the data file
  DoseRecord dose;
  std::vector<double> times;  // strictly increasing, non-negative
  std::vector<double> dv;     // observed values, same length as times
  int n_obs() const { return static_cast<int>(times.size()); }
};

struct SubjectData {
  std::string id;
  std::vector<UnitData> units;  // sorted by unit label; same count for all subjects
  int n_obs() const;
};

struct Dataset {
  std::vector<SubjectData> subjects;

  int n_subjects() const { return static_cast<int>(subjects.size()); }
  int n_units() const;  // K; 0 when empty
  int total_obs() const;

  // structural checks: at least 2 units per subject, identical K across
  // subjects, >=1 observation per unit, strictly increasing times,
  // consistent dose records; throws std::invalid_argument
  void validate() const;
};

// Latent individual parameters on the sampling (log) scale.
// phi[i] is K x p; row k holds phi_ik.
struct IndividualParams {
  std::vector<Eigen::MatrixXd> phi;

  int n() const { return static_cast<int>(phi.size()); }
  static IndividualParams constant(int n, const Eigen::MatrixXd& value);
};

// Population parameters.
//   mu      p-vector of fixed effects (sampling scale)
//   beta    K x p unit effects, row 0 identically zero (reference unit)
//   omega   p x p between-subject covariance
//   psi     p x p within-subject (between-unit) covariance
//   sigma2  residual variance
struct ThetaParams {
  Eigen::VectorXd mu;
  Eigen::MatrixXd beta;
  Eigen::MatrixXd omega;
  Eigen::MatrixXd psi;
  double sigma2 = 1.0;
  CovStructure structure = CovStructure::Diagonal;

  int p() const { return static_cast<int>(mu.size()); }
  int K() const { return static_cast<int>(beta.rows()); }

  Eigen::VectorXd unit_mean(int k) const { return mu + beta.row(k).transpose(); }
  // unit-major stacked mean (mu + beta_1, ..., mu + beta_K), length K*p
  Eigen::VectorXd stacked_mean() const;

  void validate() const;  // throws std::invalid_argument

  static ThetaParams diagonal(const Eigen::VectorXd& mu, const Eigen::MatrixXd& beta,
                              const Eigen::VectorXd& omega_diag, const Eigen::VectorXd& psi_diag,
                              double sigma2);
};

// Mask of beta entries constrained to zero.  Row 0 is always fully
// constrained (reference unit); hypothesis tests add single entries.
using BetaZeroMask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

BetaZeroMask default_beta_mask(int K, int p);

// Canonical scalar-component naming used in traces, reports and fit files:
//   mu.<param>, beta.<param> (K==2) or beta<k>.<param> (K>2, k = 2..K),
//   omega2.<param> / psi2.<param> for variances,
//   omega.<p1>.<p2> / psi.<p1>.<p2> for covariances (full structure only),
//   sigma2.
std::vector<std::string> theta_component_names(int K, int p, CovStructure structure,
                                               const std::vector<std::string>& param_names);
Eigen::VectorXd theta_flatten(const ThetaParams& theta);
// inverse of theta_flatten for a given shape
ThetaParams theta_unflatten(const Eigen::VectorXd& flat, int K, int p, CovStructure structure);

// Resolves a beta component name ("beta.logAUC", "beta2.logAUC") to its
// (unit, param) indices; throws ConfigError for unknown names.
std::pair<int, int> resolve_beta_component(const std::string& component, int K,
                                           const std::vector<std::string>& param_names);
std::string beta_component_name(int k, int K, const std::string& param_name);

}  // namespace saemx
