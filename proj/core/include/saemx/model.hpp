#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "saemx/types.hpp"

namespace saemx {

// Structural model: deterministic prediction f(t, phi) for one unit.
// Latent parameters live on the sampling (log) scale; to_natural maps them
// to the scale the predictor works on.  predict_natural must return a quiet
// NaN (never throw) for inadmissible parameter values so that MCMC proposals
// are rejected instead of aborting the run.
struct StructuralModel {
  std::string id;
  std::vector<std::string> param_names;  // sampling-scale labels, e.g. {"logV","logKa","logAUC"}
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> to_natural;
  std::function<double(double t, const Eigen::VectorXd& natural, const DoseRecord&)> predict_natural;
  bool needs_tau = false;

  int p() const { return static_cast<int>(param_names.size()); }

  double predict(double t, const Eigen::VectorXd& phi_sampling, const DoseRecord& dose) const {
    return predict_natural(t, to_natural(phi_sampling), dose);
  }
};

enum class ErrorKind { Constant, Proportional, Combined };

// Residual error scale g; the observation model is y = f + g(f) * eps with
// eps ~ N(0, sigma2).  All supported kinds depend on (t, phi) only through
// the prediction f, so the scale takes f directly.
struct ErrorModel {
  ErrorKind kind = ErrorKind::Constant;

  double scale(double f) const {
    switch (kind) {
      case ErrorKind::Constant: return 1.0;
      case ErrorKind::Proportional: return f;
      case ErrorKind::Combined: return 1.0 + f;
    }
    return 1.0;
  }

  static ErrorModel from_name(const std::string& name);
  std::string name() const;
};

struct ModelSpec {
  StructuralModel structural;
  ErrorModel error;
};

// One-compartment oral absorption model, single dose at t = 0:
//   f(t) = D*Ka / (V*Ka - Cl) * (exp(-(Cl/V) t) - exp(-Ka t))
// with the analytic flip-point limit D*Ka*t/V * exp(-Ka t) when
// |V*Ka - Cl| < 1e-8 * Cl.  Throws std::domain_error on invalid inputs.
double predict_theophylline(double t, double V, double Ka, double Cl, double dose);

// Zero-order absorption at steady state under repeated dosing every tau:
//   f(t) = D / (Ta * Cl/F) * [ (1 - e^{-ke t}) 1{t<Ta}
//          + e^{-ke tau 1{t<Ta}} (1 - e^{-ke Ta}) e^{-ke (t-Ta)} / (1 - e^{-ke tau}) ]
// with ke = (Cl/F)/(V/F), for t in [0, tau] and Ta < tau.
// Throws std::domain_error on invalid inputs.
double predict_zero_order_ss(double t, double V_F, double Ta, double Cl_F, double dose, double tau);

// registry of built-in structural models, looked up by id from configs
const StructuralModel& structural_registry(const std::string& id);
void register_structural_model(StructuralModel model);
std::vector<std::string> registered_structural_ids();

inline constexpr const char* kTheophyllineId = "theophylline_1cpt_oral";
inline constexpr const char* kZeroOrderSsId = "zero_order_ss";

}  // namespace saemx
