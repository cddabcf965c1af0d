#include "saemx/model.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <stdexcept>

#include "saemx/errors.hpp"

namespace saemx {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

ErrorModel ErrorModel::from_name(const std::string& name) {
  if (name == "constant") return {ErrorKind::Constant};
  if (name == "proportional") return {ErrorKind::Proportional};
  if (name == "combined") return {ErrorKind::Combined};
  throw ConfigError("unknown error model '" + name + "' (expected constant, proportional or combined)");
}

std::string ErrorModel::name() const {
  switch (kind) {
    case ErrorKind::Constant: return "constant";
    case ErrorKind::Proportional: return "proportional";
    case ErrorKind::Combined: return "combined";
  }
  return "constant";
}

double predict_theophylline(double t, double V, double Ka, double Cl, double dose) {
  if (!(V > 0.0) || !(Ka > 0.0) || !(Cl > 0.0)) throw std::domain_error("predict_theophylline: V, Ka, Cl must be positive");
  if (!(dose > 0.0)) throw std::domain_error("predict_theophylline: dose must be positive");
  if (t < 0.0) throw std::domain_error("predict_theophylline: negative time");
  const double d = V * Ka - Cl;
  if (std::abs(d) < 1e-8 * Cl) return dose * Ka * t / V * std::exp(-Ka * t);
  return dose * Ka / d * (std::exp(-(Cl / V) * t) - std::exp(-Ka * t));
}

double predict_zero_order_ss(double t, double V_F, double Ta, double Cl_F, double dose, double tau) {
  if (!(V_F > 0.0) || !(Ta > 0.0) || !(Cl_F > 0.0)) throw std::domain_error("predict_zero_order_ss: V/F, Ta, Cl/F must be positive");
  if (!(dose > 0.0)) throw std::domain_error("predict_zero_order_ss: dose must be positive");
  if (!(tau > 0.0)) throw std::domain_error("predict_zero_order_ss: tau must be positive");
  if (Ta >= tau) throw std::domain_error("predict_zero_order_ss: absorption duration Ta must be shorter than the dosing interval tau");
  if (t < 0.0 || t > tau) throw std::domain_error("predict_zero_order_ss: time outside [0, tau]");
  const double ke = Cl_F / V_F;
  const double amp = dose / (Ta * Cl_F);
  const bool absorbing = t < Ta;
  const double ongoing = absorbing ? 1.0 - std::exp(-ke * t) : 0.0;
  const double carry = std::exp(-ke * tau * (absorbing ? 1.0 : 0.0)) * (1.0 - std::exp(-ke * Ta)) *
                       std::exp(-ke * (t - Ta)) / (1.0 - std::exp(-ke * tau));
  return amp * (ongoing + carry);
}

namespace {

Eigen::VectorXd exp_transform(const Eigen::VectorXd& phi) {
  return phi.array().exp().matrix();
}

StructuralModel make_theophylline() {
  StructuralModel m;
  m.id = kTheophyllineId;
  m.param_names = {"logV", "logKa", "logAUC"};
  m.to_natural = exp_transform;
  m.needs_tau = false;
  // natural = (V, Ka, AUC); clearance is tied to the identifiable AUC = D/Cl
  m.predict_natural = [](double t, const Eigen::VectorXd& nat, const DoseRecord& dose) -> double {
    const double V = nat[0], Ka = nat[1], AUC = nat[2];
    if (!(V > 0.0) || !(Ka > 0.0) || !(AUC > 0.0) || !(dose.amount > 0.0) || t < 0.0) return kNaN;
    if (!std::isfinite(V) || !std::isfinite(Ka) || !std::isfinite(AUC)) return kNaN;
    const double Cl = dose.amount / AUC;
    const double d = V * Ka - Cl;
    if (std::abs(d) < 1e-8 * Cl) return dose.amount * Ka * t / V * std::exp(-Ka * t);
    return dose.amount * Ka / d * (std::exp(-(Cl / V) * t) - std::exp(-Ka * t));
  };
  return m;
}

StructuralModel make_zero_order_ss() {
  StructuralModel m;
  m.id = kZeroOrderSsId;
  m.param_names = {"logV_F", "logTa", "logAUC"};
  m.to_natural = exp_transform;
  m.needs_tau = true;
  // natural = (V/F, Ta, AUC); Cl/F = D/AUC
  m.predict_natural = [](double t, const Eigen::VectorXd& nat, const DoseRecord& dose) -> double {
    if (!dose.tau) return kNaN;
    const double V_F = nat[0], Ta = nat[1], AUC = nat[2], tau = *dose.tau;
    if (!(V_F > 0.0) || !(Ta > 0.0) || !(AUC > 0.0) || !(dose.amount > 0.0)) return kNaN;
    if (!std::isfinite(V_F) || !std::isfinite(Ta) || !std::isfinite(AUC)) return kNaN;
    if (Ta >= tau || t < 0.0 || t > tau) return kNaN;
    const double Cl_F = dose.amount / AUC;
    const double ke = Cl_F / V_F;
    const double amp = dose.amount / (Ta * Cl_F);
    const bool absorbing = t < Ta;
    const double ongoing = absorbing ? 1.0 - std::exp(-ke * t) : 0.0;
    const double carry = std::exp(-ke * tau * (absorbing ? 1.0 : 0.0)) * (1.0 - std::exp(-ke * Ta)) *
                         std::exp(-ke * (t - Ta)) / (1.0 - std::exp(-ke * tau));
    return amp * (ongoing + carry);
  };
  return m;
}

std::map<std::string, StructuralModel>& registry_map() {
  static std::map<std::string, StructuralModel> reg = [] {
    std::map<std::string, StructuralModel> r;
    StructuralModel theo = make_theophylline();
    StructuralModel zoss = make_zero_order_ss();
    r.emplace(theo.id, std::move(theo));
    r.emplace(zoss.id, std::move(zoss));
    return r;
  }();
  return reg;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

const StructuralModel& structural_registry(const std::string& id) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  auto& reg = registry_map();
  auto it = reg.find(id);
  if (it == reg.end()) {
    std::string known;
    for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown structural model '" + id + "' (registered: " + known + ")");
  }
  return it->second;
}

void register_structural_model(StructuralModel model) {
  if (model.id.empty()) throw ConfigError("register_structural_model: empty id");
  std::lock_guard<std::mutex> lock(registry_mutex());
  registry_map()[model.id] = std::move(model);
}

std::vector<std::string> registered_structural_ids() {
  std::lock_guard<std::mutex> lock(registry_mutex());
  std::vector<std::string> ids;
  for (const auto& [k, v] : registry_map()) ids.push_back(k);
  return ids;
}

}  // namespace saemx
