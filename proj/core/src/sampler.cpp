#include "saemx/sampler.hpp"

#include <cmath>
#include <limits>

#include "saemx/errors.hpp"

namespace saemx {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kInf = std::numeric_limits<double>::infinity();
// hard bounds keeping adapted scales in a sane range
constexpr double kMinScale = 1e-8;
constexpr double kMaxScale = 1e8;
}  // namespace

void KernelConfig::validate() const {
  if (sweeps_prior < 0 || sweeps_rw_full < 0 || sweeps_rw_component < 0)
    throw std::invalid_argument("kernel config: sweep counts must be non-negative");
  if (sweeps_prior + sweeps_rw_full + sweeps_rw_component == 0)
    throw std::invalid_argument("kernel config: at least one kernel sweep required");
  if (!(rho_init > 0.0)) throw std::invalid_argument("kernel config: rho_init must be positive");
  if (!(target_acceptance > 0.0) || !(target_acceptance < 1.0))
    throw std::invalid_argument("kernel config: target_acceptance must lie in (0,1)");
  if (!(adapt_rate > 0.0)) throw std::invalid_argument("kernel config: adapt_rate must be positive");
}

KernelScales KernelScales::init(const KernelConfig& cfg, int Kp) {
  KernelScales s;
  s.rho_full = cfg.rho_init;
  s.comp_mult = Eigen::VectorXd::Constant(Kp, cfg.rho_init);
  return s;
}

AcceptanceCounters AcceptanceCounters::zero(int Kp) {
  AcceptanceCounters a;
  a.comp_proposed = Eigen::ArrayXd::Zero(Kp);
  a.comp_accepted = Eigen::ArrayXd::Zero(Kp);
  return a;
}

void AcceptanceCounters::reset() {
  prior_proposed = prior_accepted = 0;
  full_proposed = full_accepted = 0;
  comp_proposed.setZero();
  comp_accepted.setZero();
}

double AcceptanceCounters::prior_rate() const {
  return prior_proposed > 0 ? static_cast<double>(prior_accepted) / prior_proposed : 0.0;
}
double AcceptanceCounters::full_rate() const {
  return full_proposed > 0 ? static_cast<double>(full_accepted) / full_proposed : 0.0;
}
double AcceptanceCounters::comp_rate() const {
  const double prop = comp_proposed.sum();
  return prop > 0 ? comp_accepted.sum() / prop : 0.0;
}

SamplerWorkspace SamplerWorkspace::build(const ThetaParams& theta, int K) {
  SamplerWorkspace ws;
  ws.K = K;
  ws.p = theta.p();
  ws.mean = theta.stacked_mean();
  ws.gamma = gamma_matrix(theta, K);
  const FlooredInverse gi = floored_spd_inverse(ws.gamma);
  ws.gamma_inv = gi.inv;
  ws.log_det_gamma = gi.log_det;
  // Cholesky of the floored matrix so proposals stay well defined at boundaries
  Eigen::LLT<Eigen::MatrixXd> llt(ws.gamma);
  if (llt.info() == Eigen::Success) {
    ws.chol_lower = llt.matrixL();
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ws.gamma);
    const double eps = 1e-10 * ws.gamma.trace() / ws.gamma.rows();
    ws.chol_lower = es.eigenvectors() * es.eigenvalues().cwiseMax(eps).cwiseSqrt().asDiagonal();
  }
  return ws;
}

double SamplerWorkspace::prior_quadform(const Eigen::VectorXd& phi_stacked) const {
  const Eigen::VectorXd d = phi_stacked - mean;
  return d.dot(gamma_inv * d);
}

double SamplerWorkspace::prior_logpdf(const Eigen::VectorXd& phi_stacked) const {
  return -0.5 * (static_cast<double>(mean.size()) * kLog2Pi + log_det_gamma + prior_quadform(phi_stacked));
}

Eigen::VectorXd SamplerWorkspace::stack(const Eigen::MatrixXd& phi_i) const {
  Eigen::VectorXd out(K * p);
  for (int k = 0; k < K; ++k) out.segment(k * p, p) = phi_i.row(k).transpose();
  return out;
}

Eigen::MatrixXd SamplerWorkspace::unstack(const Eigen::VectorXd& stacked) const {
  Eigen::MatrixXd out(K, p);
  for (int k = 0; k < K; ++k) out.row(k) = stacked.segment(k * p, p).transpose();
  return out;
}

double log_unit_lik(const UnitData& unit, const Eigen::VectorXd& phi_ik, const ModelSpec& model,
                    double sigma2) {
  const Eigen::VectorXd natural = model.structural.to_natural(phi_ik);
  const double log_s2 = std::log(sigma2);
  double total = 0.0;
  for (int j = 0; j < unit.n_obs(); ++j) {
    const double f = model.structural.predict_natural(unit.times[j], natural, unit.dose);
    if (!std::isfinite(f)) return -kInf;
    const double g = model.error.scale(f);
    if (!(g > 0.0)) return -kInf;
    const double r = (unit.dv[j] - f) / g;
    total += -0.5 * (kLog2Pi + log_s2 + 2.0 * std::log(g) + r * r / sigma2);
  }
  return total;
}

ChainState ChainState::init(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                            const IndividualParams& phi0) {
  ChainState st;
  st.phi = phi0;
  const int n = data.n_subjects(), K = data.n_units();
  st.unit_loglik.resize(n, K);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k)
      st.unit_loglik(i, k) = log_unit_lik(data.subjects[i].units[k], phi0.phi[i].row(k).transpose(),
                                          model, theta.sigma2);
  return st;
}

bool mh_accept(double log_ratio, RngStream& rng) {
  if (log_ratio >= 0.0) {
    rng.uniform();  // consume the decision draw either way, keeps streams aligned
    return true;
  }
  return std::log(rng.uniform()) < log_ratio;
}

void mh_step_prior(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                   const ThetaParams& theta, const SamplerWorkspace& ws, AcceptanceCounters& acc,
                   RngStream& rng) {
  const int K = ws.K;
  const Eigen::VectorXd cand = ws.mean + ws.chol_lower * rng.normal_vector(ws.mean.size());
  const Eigen::MatrixXd cand_phi = ws.unstack(cand);
  double log_ratio = 0.0;
  Eigen::VectorXd cand_lik(K);
  for (int k = 0; k < K; ++k) {
    cand_lik[k] = log_unit_lik(data.subjects[i].units[k], cand_phi.row(k).transpose(), model, theta.sigma2);
    log_ratio += cand_lik[k] - state.unit_loglik(i, k);
  }
  ++acc.prior_proposed;
  if (mh_accept(log_ratio, rng)) {
    ++acc.prior_accepted;
    state.phi.phi[i] = cand_phi;
    state.unit_loglik.row(i) = cand_lik.transpose();
  }
}

void mh_step_rw_full(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                     const ThetaParams& theta, const SamplerWorkspace& ws, double rho,
                     AcceptanceCounters& acc, RngStream& rng) {
  const int K = ws.K;
  const Eigen::VectorXd cur = ws.stack(state.phi.phi[i]);
  const Eigen::VectorXd cand = cur + std::sqrt(rho) * (ws.chol_lower * rng.normal_vector(cur.size()));
  const Eigen::MatrixXd cand_phi = ws.unstack(cand);
  double log_ratio = 0.5 * (ws.prior_quadform(cur) - ws.prior_quadform(cand));
  Eigen::VectorXd cand_lik(K);
  for (int k = 0; k < K; ++k) {
    cand_lik[k] = log_unit_lik(data.subjects[i].units[k], cand_phi.row(k).transpose(), model, theta.sigma2);
    log_ratio += cand_lik[k] - state.unit_loglik(i, k);
  }
  ++acc.full_proposed;
  if (mh_accept(log_ratio, rng)) {
    ++acc.full_accepted;
    state.phi.phi[i] = cand_phi;
    state.unit_loglik.row(i) = cand_lik.transpose();
  }
}

void mh_step_rw_component(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                          const ThetaParams& theta, const SamplerWorkspace& ws,
                          const Eigen::VectorXd& scales, AcceptanceCounters& acc, RngStream& rng) {
  const int K = ws.K, p = ws.p;
  Eigen::VectorXd cur = ws.stack(state.phi.phi[i]);
  double cur_quad = ws.prior_quadform(cur);
  for (int idx = 0; idx < K * p; ++idx) {
    const int k = idx / p;
    Eigen::VectorXd cand = cur;
    cand[idx] += scales[idx] * rng.normal();
    const double cand_quad = ws.prior_quadform(cand);
    const double cand_lik = log_unit_lik(data.subjects[i].units[k],
                                         cand.segment(k * p, p), model, theta.sigma2);
    const double log_ratio = (cand_lik - state.unit_loglik(i, k)) + 0.5 * (cur_quad - cand_quad);
    acc.comp_proposed[idx] += 1.0;
    if (mh_accept(log_ratio, rng)) {
      acc.comp_accepted[idx] += 1.0;
      cur = cand;
      cur_quad = cand_quad;
      state.unit_loglik(i, k) = cand_lik;
    }
  }
  state.phi.phi[i] = ws.unstack(cur);
}

void sweep_subject(ChainState& state, int i, const Dataset& data, const ModelSpec& model,
                   const ThetaParams& theta, const SamplerWorkspace& ws, const KernelConfig& cfg,
                   const KernelScales& scales, AcceptanceCounters& acc, RngStream& rng) {
  const Eigen::VectorXd comp_sd =
      scales.comp_mult.cwiseProduct(ws.gamma.diagonal().cwiseMax(0.0).cwiseSqrt());
  for (int s = 0; s < cfg.sweeps_prior; ++s)
    mh_step_prior(state, i, data, model, theta, ws, acc, rng);
  for (int s = 0; s < cfg.sweeps_rw_full; ++s)
    mh_step_rw_full(state, i, data, model, theta, ws, scales.rho_full, acc, rng);
  for (int s = 0; s < cfg.sweeps_rw_component; ++s)
    mh_step_rw_component(state, i, data, model, theta, ws, comp_sd, acc, rng);
}

double adapt_scale(double scale, double observed_acceptance, int iteration, const KernelConfig& cfg) {
  const double gain = cfg.adapt_rate / std::max(iteration, 1);
  double out = scale * std::exp(gain * (observed_acceptance - cfg.target_acceptance));
  return std::clamp(out, kMinScale, kMaxScale);
}

void adapt_all_scales(KernelScales& scales, const AcceptanceCounters& acc, int iteration,
                      const KernelConfig& cfg) {
  if (acc.full_proposed > 0) scales.rho_full = adapt_scale(scales.rho_full, acc.full_rate(), iteration, cfg);
  for (Eigen::Index c = 0; c < scales.comp_mult.size(); ++c)
    if (acc.comp_proposed[c] > 0)
      scales.comp_mult[c] =
          adapt_scale(scales.comp_mult[c], acc.comp_accepted[c] / acc.comp_proposed[c], iteration, cfg);
}

std::vector<std::vector<Eigen::VectorXd>> posterior_draws(const Dataset& data, const ModelSpec& model,
                                                          const ThetaParams& theta, int n_sweeps,
                                                          int burn_in, const KernelConfig& cfg,
                                                          std::uint64_t seed) {
  if (n_sweeps <= burn_in) throw std::invalid_argument("posterior_draws: n_sweeps must exceed burn_in");
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  const SamplerWorkspace ws = SamplerWorkspace::build(theta, K);

  IndividualParams phi0;
  phi0.phi.assign(n, ws.unstack(ws.mean));
  ChainState state = ChainState::init(data, model, theta, phi0);

  std::vector<RngStream> streams;
  streams.reserve(n);
  for (int i = 0; i < n; ++i)
    streams.emplace_back(derive_seed(seed, {kStreamPosterior, static_cast<std::uint64_t>(i)}));

  std::vector<std::vector<Eigen::VectorXd>> draws(n);
  for (auto& d : draws) d.reserve(n_sweeps - burn_in);

  KernelScales scales = KernelScales::init(cfg, K * p);
  AcceptanceCounters acc = AcceptanceCounters::zero(K * p);
  for (int sweep = 1; sweep <= n_sweeps; ++sweep) {
    acc.reset();
    for (int i = 0; i < n; ++i)
      sweep_subject(state, i, data, model, theta, ws, cfg, scales, acc, streams[i]);
    if (sweep <= burn_in && cfg.adapt_during_burnin)
      adapt_all_scales(scales, acc, sweep, cfg);
    if (sweep > burn_in)
      for (int i = 0; i < n; ++i) draws[i].push_back(ws.stack(state.phi.phi[i]));
  }
  return draws;
}

}  // namespace saemx
