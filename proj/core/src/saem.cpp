#include "saemx/saem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "saemx/errors.hpp"

namespace saemx {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

SuffStats SuffStats::zero(int n, int K, int p) {
  SuffStats s;
  s.s1 = Eigen::MatrixXd::Zero(n, p);
  s.s2 = Eigen::MatrixXd::Zero(K, p);
  s.s3 = Eigen::MatrixXd::Zero(p, p);
  s.s4 = Eigen::MatrixXd::Zero(p, p);
  s.s5 = 0.0;
  return s;
}

void SaemConfig::validate(int n, int K, int p) const {
  (void)n;
  if (n_iterations < 1) throw std::invalid_argument("saem config: n_iterations must be >= 1");
  if (burn_in < 0 || burn_in >= n_iterations)
    throw std::invalid_argument("saem config: burn_in must lie in [0, n_iterations)");
  if (!(anneal_decay >= 0.0 && anneal_decay < 1.0))
    throw std::invalid_argument("saem config: anneal_decay must lie in [0, 1)");
  if (n_chains < 0) throw std::invalid_argument("saem config: n_chains must be >= 0");
  theta_init.validate();
  if (theta_init.p() != p) throw std::invalid_argument("saem config: theta_init dimension != model p");
  if (theta_init.K() != K) throw std::invalid_argument("saem config: theta_init unit count != data K");
  kernels.validate();
  if (beta_zero_mask.size() != 0) {
    if (beta_zero_mask.rows() != K || beta_zero_mask.cols() != p)
      throw std::invalid_argument("saem config: beta_zero_mask must be K x p");
    for (int d = 0; d < p; ++d)
      if (!beta_zero_mask(0, d))
        throw std::invalid_argument("saem config: reference unit row of beta_zero_mask must be all true");
  }
}

SuffStats compute_stats(const Dataset& data, const ModelSpec& model, const IndividualParams& phi,
                        const ThetaParams& theta) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  SuffStats s = SuffStats::zero(n, K, p);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      s.s1.row(i) += phi.phi[i].row(k);
      s.s2.row(k) += phi.phi[i].row(k);
    }
  const PosteriorBMoments post = posterior_b_moments(phi, theta);
  for (int i = 0; i < n; ++i) {
    s.s3 += post.m.row(i).transpose() * post.m.row(i);
    for (int k = 0; k < K; ++k) {
      const Eigen::VectorXd d = phi.phi[i].row(k).transpose() - post.m.row(i).transpose();
      s.s4 += d * d.transpose();
    }
  }
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const UnitData& u = data.subjects[i].units[k];
      const Eigen::VectorXd natural = model.structural.to_natural(phi.phi[i].row(k).transpose());
      for (int j = 0; j < u.n_obs(); ++j) {
        const double f = model.structural.predict_natural(u.times[j], natural, u.dose);
        const double g = model.error.scale(f);
        const double r = (u.dv[j] - f) / g;
        s.s5 += r * r;
      }
    }
  return s;
}

namespace {

SuffStats sa_blend(const SuffStats& s, const SuffStats& now, double gamma) {
  SuffStats out = s;
  out.s1 += gamma * (now.s1 - s.s1);
  out.s2 += gamma * (now.s2 - s.s2);
  out.s3 += gamma * (now.s3 - s.s3);
  out.s4 += gamma * (now.s4 - s.s4);
  out.s5 += gamma * (now.s5 - s.s5);
  return out;
}

}  // namespace

SuffStats sa_update(const SuffStats& s, const Dataset& data, const ModelSpec& model,
                    const IndividualParams& phi, const ThetaParams& theta, double gamma) {
  return sa_blend(s, compute_stats(data, model, phi, theta), gamma);
}

namespace {

// symmetrize, optionally zero the off-diagonal, floor eigenvalues at zero
Eigen::MatrixXd project_covariance(const Eigen::MatrixXd& a, CovStructure structure, bool* floored) {
  Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  if (structure == CovStructure::Diagonal) {
    Eigen::VectorXd d = sym.diagonal();
    *floored = (d.array() < 0.0).any();
    return d.cwiseMax(0.0).asDiagonal();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  *floored = (es.eigenvalues().array() < 0.0).any();
  if (!*floored) return sym;
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

MStepResult m_step(const SuffStats& stats, const ThetaParams& theta_prev, const Dataset& data,
                   const BetaZeroMask& beta_zero_mask) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta_prev.p();
  const FlooredInverse omega_inv = floored_spd_inverse(theta_prev.omega);
  const FlooredInverse psi_inv = floored_spd_inverse(theta_prev.psi);
  Eigen::LLT<Eigen::MatrixXd> prec_llt(omega_inv.inv + K * psi_inv.inv);
  if (prec_llt.info() != Eigen::Success) throw NumericalError("m_step: posterior precision not SPD");

  MStepResult out;
  ThetaParams& t = out.theta;
  t.structure = theta_prev.structure;

  // mu update: the average of the conditional means m_i, written through s1
  const Eigen::VectorXd s1_bar = stats.s1.colwise().mean().transpose();
  const Eigen::VectorXd beta_prev_sum = theta_prev.beta.colwise().sum().transpose();
  t.mu = prec_llt.solve(psi_inv.inv * (s1_bar - beta_prev_sum) + omega_inv.inv * theta_prev.mu);

  // beta update per non-reference unit, constrained entries pinned at zero
  t.beta = Eigen::MatrixXd::Zero(K, p);
  for (int k = 1; k < K; ++k) {
    t.beta.row(k) = stats.s2.row(k) / n - t.mu.transpose();
    if (beta_zero_mask.size() != 0)
      for (int d = 0; d < p; ++d)
        if (beta_zero_mask(k, d)) t.beta(k, d) = 0.0;
  }

  const Eigen::MatrixXd V = prec_llt.solve(Eigen::MatrixXd::Identity(p, p));

  const Eigen::MatrixXd omega_raw = V + stats.s3 / n - t.mu * t.mu.transpose();
  t.omega = project_covariance(omega_raw, t.structure, &out.floored_omega);

  // c_k = sum_i (phi_ik - m_i) expressed through the statistics; equals
  // n beta_k for unconstrained rows, so this reduces to
  // V + s4/(nK) - (1/K) sum_k beta_k beta_k^T in the unconstrained case
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(p, p);
  for (int k = 0; k < K; ++k) {
    const Eigen::VectorXd beta_k = t.beta.row(k).transpose();
    const Eigen::VectorXd c_k = stats.s2.row(k).transpose() - n * t.mu;
    cross += beta_k * c_k.transpose() + c_k * beta_k.transpose() - n * beta_k * beta_k.transpose();
  }
  const Eigen::MatrixXd psi_raw = V + (stats.s4 - cross) / (n * K);
  t.psi = project_covariance(psi_raw, t.structure, &out.floored_psi);

  t.sigma2 = stats.s5 / data.total_obs();
  if (t.sigma2 < kSigma2Min) {
    t.sigma2 = kSigma2Min;
    out.floored_sigma2 = true;
  }
  return out;
}

double sa_objective(const ThetaParams& theta, const SuffStats& stats, const ThetaParams& theta_prev,
                    const Dataset& data) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  const double n_obs = data.total_obs();

  // posterior moments of btilde under theta_prev, as affine functions of s1
  const FlooredInverse omega_prev = floored_spd_inverse(theta_prev.omega);
  const FlooredInverse psi_prev = floored_spd_inverse(theta_prev.psi);
  Eigen::LLT<Eigen::MatrixXd> prec_llt(omega_prev.inv + K * psi_prev.inv);
  if (prec_llt.info() != Eigen::Success) throw NumericalError("sa_objective: posterior precision not SPD");
  const Eigen::MatrixXd Vp = prec_llt.solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::VectorXd s1_sum = stats.s1.colwise().sum().transpose();
  const Eigen::VectorXd beta_prev_sum = theta_prev.beta.colwise().sum().transpose();
  // M = sum_i m_i
  const Eigen::VectorXd M =
      prec_llt.solve(psi_prev.inv * (s1_sum - n * beta_prev_sum) + n * omega_prev.inv * theta_prev.mu);

  const FlooredInverse omega_inv = floored_spd_inverse(theta.omega);
  const FlooredInverse psi_inv = floored_spd_inverse(theta.psi);

  double q = -0.5 * n_obs * (kLog2Pi + std::log(theta.sigma2)) - 0.5 * stats.s5 / theta.sigma2;

  q += -0.5 * n * K * (p * kLog2Pi + psi_inv.log_det) - 0.5 * n * K * (psi_inv.inv * Vp).trace();
  double within_quad = (psi_inv.inv * stats.s4).trace();
  for (int k = 0; k < K; ++k) {
    const Eigen::VectorXd beta_k = theta.beta.row(k).transpose();
    const Eigen::VectorXd c_k = stats.s2.row(k).transpose() - M;
    within_quad += -2.0 * c_k.dot(psi_inv.inv * beta_k) + n * beta_k.dot(psi_inv.inv * beta_k);
  }
  q += -0.5 * within_quad;

  q += -0.5 * n * (p * kLog2Pi + omega_inv.log_det) - 0.5 * n * (omega_inv.inv * Vp).trace();
  const double between_quad = (omega_inv.inv * stats.s3).trace() -
                              2.0 * theta.mu.dot(omega_inv.inv * M) +
                              n * theta.mu.dot(omega_inv.inv * theta.mu);
  q += -0.5 * between_quad;
  return q;
}

std::vector<Eigen::MatrixXd> conditional_phi_mean(const std::vector<IndividualParams>& phi_by_iteration,
                                                  int burn_in) {
  const int L = static_cast<int>(phi_by_iteration.size());
  if (burn_in < 0 || burn_in >= L)
    throw std::invalid_argument("conditional_phi_mean: need at least one post-burn-in iteration");
  const int n = phi_by_iteration.front().n();
  std::vector<Eigen::MatrixXd> mean(n);
  for (int l = burn_in; l < L; ++l) {
    const double gamma = 1.0 / (l - burn_in + 1);
    for (int i = 0; i < n; ++i) {
      if (l == burn_in)
        mean[i] = phi_by_iteration[l].phi[i];
      else
        mean[i] += gamma * (phi_by_iteration[l].phi[i] - mean[i]);
    }
  }
  return mean;
}

namespace {

bool theta_is_finite(const ThetaParams& t) {
  return t.mu.allFinite() && t.beta.allFinite() && t.omega.allFinite() && t.psi.allFinite() &&
         std::isfinite(t.sigma2) && t.sigma2 > 0.0;
}

// exploration-phase annealing: a variance may not shrink below decay x its
// previous value in one iteration, so single-draw statistic noise cannot crash
// an iterate into the near-absorbing neighborhood of zero
void anneal_variances(ThetaParams& theta, const ThetaParams& prev, double decay) {
  const int p = theta.p();
  for (int j = 0; j < p; ++j) {
    const double wf = decay * prev.omega(j, j) - theta.omega(j, j);
    if (wf > 0.0) theta.omega(j, j) += wf;
    const double pf = decay * prev.psi(j, j) - theta.psi(j, j);
    if (pf > 0.0) theta.psi(j, j) += pf;
  }
  theta.sigma2 = std::max(theta.sigma2, decay * prev.sigma2);
}

FitDiagnostics build_diagnostics(const std::vector<IterationRecord>& trace, int burn_in) {
  FitDiagnostics d;
  const int L = static_cast<int>(trace.size());
  const int window = std::min(50, L);
  const Eigen::Index dim = trace.back().theta_flat.size();
  d.rel_range_last50.resize(dim);
  for (Eigen::Index c = 0; c < dim; ++c) {
    std::vector<double> vals;
    vals.reserve(window);
    for (int l = L - window; l < L; ++l) vals.push_back(trace[l].theta_flat[c]);
    const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
    const double lo = *mn, hi = *mx;
    std::nth_element(vals.begin(), vals.begin() + window / 2, vals.end());
    const double med = vals[window / 2];
    d.rel_range_last50[c] = (hi - lo) / std::max(std::abs(med), 1e-12);
  }
  d.stabilized = (d.rel_range_last50.array() <= 0.05).all();
  double ap = 0, af = 0, ac = 0;
  int count = 0;
  for (int l = burn_in; l < L; ++l) {
    ap += trace[l].acc_prior;
    af += trace[l].acc_rw_full;
    ac += trace[l].acc_rw_component;
    ++count;
  }
  if (count > 0) {
    d.post_burnin_acc_prior = ap / count;
    d.post_burnin_acc_full = af / count;
    d.post_burnin_acc_component = ac / count;
  }
  for (const auto& r : trace)
    if (r.floored_omega || r.floored_psi || r.floored_sigma2) ++d.floored_iterations;
  return d;
}

}  // namespace

FitResult run_saem(const Dataset& data, const ModelSpec& model, const SaemConfig& config) {
  data.validate();
  const int n = data.n_subjects(), K = data.n_units(), p = model.structural.p();
  config.validate(n, K, p);
  if (model.structural.needs_tau)
    for (const auto& s : data.subjects)
      for (const auto& u : s.units)
        if (!u.dose.tau)
          throw std::invalid_argument("model '" + model.structural.id + "' needs a tau column; subject '" +
                                      s.id + "' unit " + std::to_string(u.unit) + " has none");

  BetaZeroMask mask = config.beta_zero_mask.size() != 0 ? config.beta_zero_mask : default_beta_mask(K, p);

  ThetaParams theta = config.theta_init;

  // several parallel chains shrink the sampling noise of the per-iteration
  // statistics; with few subjects that noise can otherwise random-walk a
  // variance iterate into the absorbing neighborhood of zero
  const int n_chains =
      config.n_chains > 0 ? config.n_chains : std::clamp((300 + n - 1) / n, 1, 16);

  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(n_chains) * n);
  for (int c = 0; c < n_chains; ++c)
    for (int i = 0; i < n; ++i)
      streams.emplace_back(derive_seed(
          config.seed, {kStreamMcmc, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)}));

  // start each chain at its own draw from the initial-estimate prior; identical
  // starting states would make the first empirical spread collapse to zero
  std::vector<ChainState> states;
  states.reserve(n_chains);
  {
    const SamplerWorkspace ws0 = SamplerWorkspace::build(theta, K);
    for (int c = 0; c < n_chains; ++c) {
      IndividualParams phi0;
      phi0.phi.reserve(n);
      for (int i = 0; i < n; ++i)
        phi0.phi.push_back(
            ws0.unstack(ws0.mean + ws0.chol_lower * streams[c * n + i].normal_vector(K * p)));
      states.push_back(ChainState::init(data, model, theta, phi0));
    }
  }

  KernelScales scales = KernelScales::init(config.kernels, K * p);
  AcceptanceCounters acc = AcceptanceCounters::zero(K * p);
  SuffStats stats = SuffStats::zero(n, K, p);
  std::vector<Eigen::MatrixXd> phi_mean;
  FitResult result;
  result.trace.reserve(config.n_iterations);

  for (int l = 1; l <= config.n_iterations; ++l) {
    const SamplerWorkspace ws = SamplerWorkspace::build(theta, K);
    acc.reset();
    for (int c = 0; c < n_chains; ++c)
      for (int i = 0; i < n; ++i)
        sweep_subject(states[c], i, data, model, theta, ws, config.kernels, scales, acc,
                      streams[c * n + i]);
    if (l <= config.burn_in && config.kernels.adapt_during_burnin)
      adapt_all_scales(scales, acc, l, config.kernels);

    const double gamma = config.step_size(l);
    SuffStats now = compute_stats(data, model, states[0].phi, theta);
    for (int c = 1; c < n_chains; ++c) {
      const SuffStats more = compute_stats(data, model, states[c].phi, theta);
      now.s1 += more.s1;
      now.s2 += more.s2;
      now.s3 += more.s3;
      now.s4 += more.s4;
      now.s5 += more.s5;
    }
    if (n_chains > 1) {
      const double inv = 1.0 / n_chains;
      now.s1 *= inv;
      now.s2 *= inv;
      now.s3 *= inv;
      now.s4 *= inv;
      now.s5 *= inv;
    }
    stats = sa_blend(stats, now, gamma);
    const MStepResult m = m_step(stats, theta, data, mask);
    if (!theta_is_finite(m.theta)) {
      throw NumericalError("saem: non-finite parameter update at iteration " + std::to_string(l) +
                           " (last finite iteration: " + std::to_string(l - 1) + ")");
    }
    const ThetaParams prev = theta;
    theta = m.theta;
    if (l <= config.burn_in && config.anneal_decay > 0.0)
      anneal_variances(theta, prev, config.anneal_decay);

    IterationRecord rec;
    rec.iteration = l;
    rec.theta_flat = theta_flatten(theta);
    rec.acc_prior = acc.prior_rate();
    rec.acc_rw_full = acc.full_rate();
    rec.acc_rw_component = acc.comp_rate();
    rec.floored_omega = m.floored_omega;
    rec.floored_psi = m.floored_psi;
    rec.floored_sigma2 = m.floored_sigma2;
    result.trace.push_back(std::move(rec));

    if (l > config.burn_in) {
      std::vector<Eigen::MatrixXd> draw = states[0].phi.phi;
      for (int c = 1; c < n_chains; ++c)
        for (int i = 0; i < n; ++i) draw[i] += states[c].phi.phi[i];
      if (n_chains > 1)
        for (int i = 0; i < n; ++i) draw[i] /= n_chains;
      const double g = 1.0 / (l - config.burn_in);
      if (phi_mean.empty()) {
        phi_mean = std::move(draw);
      } else {
        for (int i = 0; i < n; ++i) phi_mean[i] += g * (draw[i] - phi_mean[i]);
      }
    }
  }

  result.theta_hat = theta;
  result.phi_cond_mean = std::move(phi_mean);
  result.final_stats = std::move(stats);
  result.diagnostics = build_diagnostics(result.trace, config.burn_in);
  return result;
}

}  // namespace saemx
