#include "saemx/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "saemx/errors.hpp"
#include "saemx/prob.hpp"

namespace saemx {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kInf = std::numeric_limits<double>::infinity();
// variance estimates at or below this fraction of the parameter scale count
// as boundary values and carry no standard error
constexpr double kBoundaryThreshold = 1e-12;
}  // namespace

void InferenceConfig::validate() const {
  if (loglik_samples < 2) throw std::invalid_argument("inference config: loglik_samples must be >= 2");
  if (!(instrumental_inflation > 0.0))
    throw std::invalid_argument("inference config: instrumental_inflation must be positive");
  if (posterior_burnin < 1 || posterior_sweeps <= posterior_burnin)
    throw std::invalid_argument("inference config: posterior_sweeps must exceed posterior_burnin >= 1");
}

std::vector<GaussianInstrumental> build_instrumentals(
    const std::vector<std::vector<Eigen::VectorXd>>& draws, double inflation) {
  std::vector<GaussianInstrumental> out;
  out.reserve(draws.size());
  for (size_t i = 0; i < draws.size(); ++i) {
    const auto& d = draws[i];
    if (d.size() < 2)
      throw NumericalError("instrumental: subject " + std::to_string(i) + " has fewer than 2 posterior draws");
    const Eigen::Index dim = d.front().size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    for (const auto& x : d) mean += x;
    mean /= static_cast<double>(d.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
    for (const auto& x : d) {
      const Eigen::VectorXd c = x - mean;
      cov += c * c.transpose();
    }
    cov *= inflation / static_cast<double>(d.size() - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      throw NumericalError("instrumental: degenerate posterior covariance for subject " + std::to_string(i));
    GaussianInstrumental g;
    g.mean = std::move(mean);
    g.chol_lower = llt.matrixL();
    g.log_det = 2.0 * g.chol_lower.diagonal().array().log().sum();
    out.push_back(std::move(g));
  }
  return out;
}

LoglikEstimate importance_sampling_loglik(const Dataset& data, const ModelSpec& model,
                                          const ThetaParams& theta,
                                          const std::vector<GaussianInstrumental>& instrumentals,
                                          int T, std::uint64_t seed) {
  const int n = data.n_subjects(), K = data.n_units();
  if (static_cast<int>(instrumentals.size()) != n)
    throw std::invalid_argument("importance_sampling_loglik: one instrumental per subject required");
  if (T < 2) throw std::invalid_argument("importance_sampling_loglik: T must be >= 2");
  const SamplerWorkspace ws = SamplerWorkspace::build(theta, K);

  LoglikEstimate est;
  est.samples = T;
  double se2 = 0.0;
  std::vector<double> logw(T);
  for (int i = 0; i < n; ++i) {
    const GaussianInstrumental& q = instrumentals[i];
    RngStream rng(derive_seed(seed, {kStreamImportance, static_cast<std::uint64_t>(i)}));
    const double dim = static_cast<double>(q.mean.size());
    for (int t = 0; t < T; ++t) {
      const Eigen::VectorXd z = rng.normal_vector(q.mean.size());
      const Eigen::VectorXd phi = q.mean + q.chol_lower * z;
      const double log_q = -0.5 * (dim * kLog2Pi + q.log_det + z.squaredNorm());
      double log_joint = ws.prior_logpdf(phi);
      for (int k = 0; k < K; ++k)
        log_joint += log_unit_lik(data.subjects[i].units[k], phi.segment(k * ws.p, ws.p), model,
                                  theta.sigma2);
      logw[t] = log_joint - log_q;
    }
    const double m = *std::max_element(logw.begin(), logw.end());
    if (!std::isfinite(m))
      throw NumericalError("importance_sampling_loglik: all weights vanished for subject " +
                           std::to_string(i));
    double sum = 0.0, sumsq = 0.0;
    for (int t = 0; t < T; ++t) {
      const double w = std::exp(logw[t] - m);
      sum += w;
      sumsq += w * w;
    }
    const double mean_w = sum / T;
    const double var_w = std::max(0.0, (sumsq - T * mean_w * mean_w) / (T - 1));
    est.value += m + std::log(mean_w);
    // delta method on log of the weight mean
    se2 += var_w / (static_cast<double>(T) * mean_w * mean_w);
  }
  est.mc_standard_error = std::sqrt(se2);
  return est;
}

LoglikEstimate estimate_loglik(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                               const KernelConfig& kernels, const InferenceConfig& cfg,
                               std::uint64_t seed) {
  cfg.validate();
  const auto draws = posterior_draws(data, model, theta, cfg.posterior_sweeps, cfg.posterior_burnin,
                                     kernels, seed);
  const auto instrumentals = build_instrumentals(draws, cfg.instrumental_inflation);
  return importance_sampling_loglik(data, model, theta, instrumentals, cfg.loglik_samples, seed);
}

namespace {

// central finite-difference Jacobian of the unit predictions w.r.t. phi_ik
// on the sampling scale
Eigen::MatrixXd unit_jacobian(const UnitData& unit, const Eigen::VectorXd& phi_ik,
                              const StructuralModel& structural) {
  const int p = static_cast<int>(phi_ik.size());
  const int nj = unit.n_obs();
  const double h = 1e-5;
  Eigen::MatrixXd jac(nj, p);
  for (int d = 0; d < p; ++d) {
    Eigen::VectorXd hi = phi_ik, lo = phi_ik;
    hi[d] += h;
    lo[d] -= h;
    const Eigen::VectorXd nat_hi = structural.to_natural(hi), nat_lo = structural.to_natural(lo);
    for (int j = 0; j < nj; ++j) {
      const double f_hi = structural.predict_natural(unit.times[j], nat_hi, unit.dose);
      const double f_lo = structural.predict_natural(unit.times[j], nat_lo, unit.dose);
      jac(j, d) = (f_hi - f_lo) / (2.0 * h);
    }
  }
  return jac;
}

struct ChartParam {
  std::string name;       // canonical component name
  bool log_chart = false; // derivative and SE mapped through exp
  double natural_value = 0.0;
  // derivative of the stacked prior mean (length Kp), empty for covariance params
  Eigen::VectorXd mean_deriv;
  // derivative of Gamma in the chart, empty for mean params
  Eigen::MatrixXd gamma_deriv;
  bool is_sigma2 = false;
};

}  // namespace

double chi2_1_upper_tail(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(0.5 * x));
}

FimResult linearized_fim(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                         const std::vector<Eigen::MatrixXd>& phi_cond_mean,
                         const BetaZeroMask& beta_zero_mask) {
  const int n = data.n_subjects(), K = data.n_units(), p = theta.p();
  if (static_cast<int>(phi_cond_mean.size()) != n)
    throw std::invalid_argument("linearized_fim: one conditional mean per subject required");
  const BetaZeroMask mask = beta_zero_mask.size() != 0 ? beta_zero_mask : default_beta_mask(K, p);
  const auto& pn = model.structural.param_names;

  FimResult out;
  std::vector<ChartParam> chart;

  auto unit_vector = [p](int d) { return Eigen::VectorXd::Unit(p, d); };
  auto stacked_all = [&](int d) {  // e_d repeated in each unit block
    Eigen::VectorXd v = Eigen::VectorXd::Zero(K * p);
    for (int k = 0; k < K; ++k) v.segment(k * p, p) = unit_vector(d);
    return v;
  };
  auto stacked_unit = [&](int k, int d) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(K * p);
    v.segment(k * p, p) = unit_vector(d);
    return v;
  };

  for (int d = 0; d < p; ++d) {
    ChartParam c;
    c.name = "mu." + pn[d];
    c.natural_value = theta.mu[d];
    c.mean_deriv = stacked_all(d);
    chart.push_back(std::move(c));
  }
  for (int k = 1; k < K; ++k)
    for (int d = 0; d < p; ++d) {
      if (mask(k, d)) continue;
      ChartParam c;
      c.name = beta_component_name(k, K, pn[d]);
      c.natural_value = theta.beta(k, d);
      c.mean_deriv = stacked_unit(k, d);
      chart.push_back(std::move(c));
    }

  const bool diag = theta.structure == CovStructure::Diagonal;
  auto add_cov_params = [&](const Eigen::MatrixXd& m, const std::string& var_prefix,
                            const std::string& cov_prefix, bool between) {
    const double scale = std::max(m.trace(), 1.0);
    for (int d = 0; d < p; ++d) {
      ChartParam c;
      c.name = var_prefix + "." + pn[d];
      c.natural_value = m(d, d);
      if (m(d, d) <= kBoundaryThreshold * scale) {
        out.excluded.push_back(c.name);
        continue;
      }
      c.log_chart = diag;
      Eigen::MatrixXd dg = Eigen::MatrixXd::Zero(K * p, K * p);
      for (int k = 0; k < K; ++k) {
        if (between) {
          for (int l = 0; l < K; ++l) dg(k * p + d, l * p + d) = 1.0;
        } else {
          dg(k * p + d, k * p + d) = 1.0;
        }
      }
      if (c.log_chart) dg *= m(d, d);
      c.gamma_deriv = std::move(dg);
      chart.push_back(std::move(c));
    }
    if (!diag) {
      for (int a = 1; a < p; ++a)
        for (int b = 0; b < a; ++b) {
          ChartParam c;
          c.name = cov_prefix + "." + pn[a] + "." + pn[b];
          c.natural_value = m(a, b);
          Eigen::MatrixXd dg = Eigen::MatrixXd::Zero(K * p, K * p);
          for (int k = 0; k < K; ++k) {
            if (between) {
              for (int l = 0; l < K; ++l) {
                dg(k * p + a, l * p + b) += 1.0;
                dg(k * p + b, l * p + a) += 1.0;
              }
            } else {
              dg(k * p + a, k * p + b) += 1.0;
              dg(k * p + b, k * p + a) += 1.0;
            }
          }
          c.gamma_deriv = std::move(dg);
          chart.push_back(std::move(c));
        }
    }
  };
  add_cov_params(theta.omega, "omega2", "omega", true);
  add_cov_params(theta.psi, "psi2", "psi", false);
  {
    ChartParam c;
    c.name = "sigma2";
    c.natural_value = theta.sigma2;
    c.is_sigma2 = true;
    c.log_chart = diag;
    chart.push_back(std::move(c));
  }

  const int dim = static_cast<int>(chart.size());
  out.fim = Eigen::MatrixXd::Zero(dim, dim);
  out.names.resize(dim);
  for (int a = 0; a < dim; ++a) out.names[a] = chart[a].name;

  const Eigen::MatrixXd gamma = gamma_matrix(theta, K);

  for (int i = 0; i < n; ++i) {
    const SubjectData& subj = data.subjects[i];
    const int ni = subj.n_obs();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(ni, K * p);
    Eigen::VectorXd g2(ni);
    int row = 0;
    for (int k = 0; k < K; ++k) {
      const UnitData& u = subj.units[k];
      const Eigen::VectorXd phi_ik = phi_cond_mean[i].row(k).transpose();
      jac.block(row, k * p, u.n_obs(), p) = unit_jacobian(u, phi_ik, model.structural);
      const Eigen::VectorXd natural = model.structural.to_natural(phi_ik);
      for (int j = 0; j < u.n_obs(); ++j) {
        const double f = model.structural.predict_natural(u.times[j], natural, u.dose);
        if (!std::isfinite(f))
          throw NumericalError("linearized_fim: non-finite prediction for subject " + subj.id);
        const double g = model.error.scale(f);
        g2[row + j] = g * g;
      }
      row += u.n_obs();
    }

    Eigen::MatrixXd sigma = jac * gamma * jac.transpose();
    sigma += (theta.sigma2 * g2).asDiagonal();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma);
    if (ldlt.info() != Eigen::Success)
      throw NumericalError("linearized_fim: singular marginal covariance for subject " + subj.id);

    // mean-parameter derivative columns and covariance-derivative solves
    std::vector<Eigen::VectorXd> mean_cols(dim);
    std::vector<Eigen::MatrixXd> cov_solved(dim);  // Sigma^-1 dSigma
    for (int a = 0; a < dim; ++a) {
      const ChartParam& c = chart[a];
      if (c.mean_deriv.size() != 0) {
        mean_cols[a] = jac * c.mean_deriv;
      } else if (c.is_sigma2) {
        Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(ni, ni);
        ds.diagonal() = c.log_chart ? (theta.sigma2 * g2).eval() : g2.eval();
        cov_solved[a] = ldlt.solve(ds);
      } else {
        cov_solved[a] = ldlt.solve((jac * c.gamma_deriv * jac.transpose()).eval());
      }
    }
    for (int a = 0; a < dim; ++a) {
      for (int b = a; b < dim; ++b) {
        const bool mean_a = chart[a].mean_deriv.size() != 0;
        const bool mean_b = chart[b].mean_deriv.size() != 0;
        double val = 0.0;
        if (mean_a && mean_b) {
          val = mean_cols[a].dot(ldlt.solve(mean_cols[b]));
        } else if (!mean_a && !mean_b) {
          val = 0.5 * (cov_solved[a].array() * cov_solved[b].transpose().array()).sum();
        } else {
          continue;  // mean/covariance cross-information vanishes for Gaussians
        }
        out.fim(a, b) += val;
        if (a != b) out.fim(b, a) += val;
      }
    }
  }

  // standard errors through the inverse information, delta method back to
  // the natural scale for log-charted components
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.fim);
  const double max_eig = es.eigenvalues().maxCoeff();
  const double min_eig = es.eigenvalues().minCoeff();
  out.condition = (min_eig > 0.0) ? max_eig / min_eig : kInf;
  out.invertible = min_eig > max_eig * 1e-14 && max_eig > 0.0;
  out.se = Eigen::VectorXd::Constant(dim, std::numeric_limits<double>::quiet_NaN());
  if (out.invertible) {
    const Eigen::MatrixXd cov = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                                es.eigenvectors().transpose();
    for (int a = 0; a < dim; ++a) {
      const double se_chart = std::sqrt(std::max(cov(a, a), 0.0));
      out.se[a] = chart[a].log_chart ? se_chart * chart[a].natural_value : se_chart;
    }
  }
  return out;
}

TestResult wald_test(double beta_hat, double standard_error, const std::string& component) {
  if (!(standard_error > 0.0) || !std::isfinite(standard_error))
    throw NumericalError("wald_test: no usable standard error for " + component);
  TestResult r;
  r.method = "wald";
  r.component = component;
  const double z = beta_hat / standard_error;
  r.statistic = z * z;
  r.p_value = chi2_1_upper_tail(r.statistic);
  return r;
}

TestResult lrt(const LoglikEstimate& full, const LoglikEstimate& reduced, const std::string& component) {
  TestResult r;
  r.method = "lrt";
  r.component = component;
  r.statistic = 2.0 * (full.value - reduced.value);
  r.p_value = chi2_1_upper_tail(r.statistic);
  const double combined_se =
      2.0 * std::sqrt(full.mc_standard_error * full.mc_standard_error +
                      reduced.mc_standard_error * reduced.mc_standard_error);
  // chi-square(1) 5% critical value
  r.mc_caveat = std::abs(r.statistic - 3.841458820694124) <= 3.0 * combined_se;
  return r;
}

}  // namespace saemx
