#pragma once

// Shared reference implementations the tests compare against: plain-Eigen
// Gaussian densities, exact marginal likelihoods and posteriors for scalar
// models that are linear in the latent parameter, a derivative-free
// maximizer, and small dataset builders.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "saemx/model.hpp"
#include "saemx/prob.hpp"
#include "saemx/types.hpp"

namespace oracles {

inline double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                         const Eigen::MatrixXd& cov) {
  const Eigen::Index d = x.size();
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd r = x - mean;
  const Eigen::VectorXd sol = llt.solve(r);
  double log_det = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) log_det += 2.0 * std::log(llt.matrixL()(j, j));
  return -0.5 * (d * std::log(2.0 * M_PI) + log_det + r.dot(sol));
}

// scalar structural model f(t, phi) = phi * h(t); h encoded as t^power
inline saemx::ModelSpec scalar_model(double power, saemx::ErrorKind error = saemx::ErrorKind::Constant) {
  saemx::StructuralModel m;
  m.id = power == 0.0 ? "test_level" : "test_rate";
  m.param_names = {"slope"};
  m.to_natural = [](const Eigen::VectorXd& phi) { return phi; };
  m.predict_natural = [power](double t, const Eigen::VectorXd& nat, const saemx::DoseRecord&) {
    return nat[0] * std::pow(t, power);
  };
  saemx::ModelSpec spec;
  spec.structural = m;
  spec.error.kind = error;
  return spec;
}

inline saemx::ModelSpec theophylline_model() {
  saemx::ModelSpec spec;
  spec.structural = saemx::structural_registry(saemx::kTheophyllineId);
  spec.error = saemx::ErrorModel::from_name("combined");
  return spec;
}

inline saemx::ThetaParams theophylline_truth() {
  Eigen::VectorXd mu(3), w(3), p(3);
  mu << -0.73, 0.39, 4.61;
  w << 0.01, 0.04, 0.04;
  p << 0.0025, 0.01, 0.01;
  return saemx::ThetaParams::diagonal(mu, Eigen::MatrixXd::Zero(2, 3), w, p, 0.01);
}

inline std::vector<double> theophylline_times() {
  return {0.25, 0.5, 1, 2, 3.5, 5, 7, 9, 12, 24};
}

// hand-built dataset: dv[i][k][j] observed at times[j], shared grid, unit dose
inline saemx::Dataset scalar_dataset(const std::vector<std::vector<std::vector<double>>>& dv,
                                     const std::vector<double>& times) {
  saemx::Dataset data;
  for (size_t i = 0; i < dv.size(); ++i) {
    saemx::SubjectData subj;
    subj.id = std::to_string(i + 1);
    for (size_t k = 0; k < dv[i].size(); ++k) {
      saemx::UnitData unit;
      unit.unit = static_cast<int>(k + 1);
      unit.dose.amount = 1.0;
      unit.times.assign(times.begin(), times.begin() + static_cast<long>(dv[i][k].size()));
      unit.dv = dv[i][k];
      subj.units.push_back(unit);
    }
    data.subjects.push_back(subj);
  }
  data.validate();
  return data;
}

// Exact marginal log-likelihood of a scalar two-level model with
// f(t, phi) = phi * h(t):  per subject y_i ~ N(H (mu + beta),
// w2 H_all H_all^T + p2 blockdiag(H_k H_k^T) + s2 I).
inline double exact_scalar_loglik(const saemx::Dataset& data, const std::function<double(double)>& h,
                                  double mu, const Eigen::VectorXd& beta, double w2, double p2,
                                  double s2) {
  if (w2 < 0.0 || p2 < 0.0 || s2 <= 0.0) return -1e300;
  double ll = 0.0;
  for (const saemx::SubjectData& subj : data.subjects) {
    const int ni = subj.n_obs();
    Eigen::VectorXd y(ni), mean(ni), hall(ni);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(ni, ni);
    int row = 0;
    std::vector<std::pair<int, int>> spans;
    for (size_t k = 0; k < subj.units.size(); ++k) {
      const saemx::UnitData& u = subj.units[k];
      for (int j = 0; j < u.n_obs(); ++j) {
        y[row + j] = u.dv[static_cast<size_t>(j)];
        hall[row + j] = h(u.times[static_cast<size_t>(j)]);
        mean[row + j] = (mu + beta[static_cast<Eigen::Index>(k)]) * hall[row + j];
      }
      spans.emplace_back(row, u.n_obs());
      row += u.n_obs();
    }
    cov = w2 * hall * hall.transpose();
    for (auto [r0, len] : spans) {
      const Eigen::VectorXd hk = hall.segment(r0, len);
      cov.block(r0, r0, len, len) += p2 * hk * hk.transpose();
    }
    cov.diagonal().array() += s2;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) return -1e300;
    const Eigen::VectorXd r = y - mean;
    const Eigen::VectorXd sol = llt.solve(r);
    double log_det = 0.0;
    for (int j = 0; j < ni; ++j) log_det += 2.0 * std::log(llt.matrixL()(j, j));
    ll += -0.5 * (ni * std::log(2.0 * M_PI) + log_det + r.dot(sol));
  }
  return ll;
}

// Exact Gaussian posterior of the stacked phi_i given one subject's data in
// the same scalar linear model: precision = Gamma^-1 + B^T B / s2 with B the
// blockdiagonal design of h values.
struct ScalarPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline ScalarPosterior exact_scalar_posterior(const saemx::SubjectData& subj,
                                              const std::function<double(double)>& h,
                                              const Eigen::VectorXd& prior_mean,
                                              const Eigen::MatrixXd& gamma, double s2) {
  const int K = static_cast<int>(subj.units.size());
  Eigen::MatrixXd prec = gamma.llt().solve(Eigen::MatrixXd::Identity(K, K));
  Eigen::VectorXd lin = prec * prior_mean;
  for (int k = 0; k < K; ++k) {
    const saemx::UnitData& u = subj.units[static_cast<size_t>(k)];
    for (int j = 0; j < u.n_obs(); ++j) {
      const double hj = h(u.times[static_cast<size_t>(j)]);
      prec(k, k) += hj * hj / s2;
      lin[k] += hj * u.dv[static_cast<size_t>(j)] / s2;
    }
  }
  ScalarPosterior post;
  post.cov = prec.llt().solve(Eigen::MatrixXd::Identity(K, K));
  post.mean = post.cov * lin;
  return post;
}

inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                   Eigen::VectorXd x0, int iters, double spread = 0.2) {
  const int n = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> xs(static_cast<size_t>(n + 1), x0);
  std::vector<double> fs(static_cast<size_t>(n + 1));
  for (int i = 0; i < n; ++i) xs[static_cast<size_t>(i + 1)][i] += spread;
  for (int i = 0; i <= n; ++i) fs[static_cast<size_t>(i)] = f(xs[static_cast<size_t>(i)]);
  for (int it = 0; it < iters; ++it) {
    std::vector<int> idx(static_cast<size_t>(n + 1));
    for (int i = 0; i <= n; ++i) idx[static_cast<size_t>(i)] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      return fs[static_cast<size_t>(a)] > fs[static_cast<size_t>(b)];
    });
    std::vector<Eigen::VectorXd> xs2(static_cast<size_t>(n + 1));
    std::vector<double> fs2(static_cast<size_t>(n + 1));
    for (int i = 0; i <= n; ++i) {
      xs2[static_cast<size_t>(i)] = xs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
      fs2[static_cast<size_t>(i)] = fs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    }
    xs = xs2;
    fs = fs2;
    Eigen::VectorXd cen = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) cen += xs[static_cast<size_t>(i)];
    cen /= n;
    const Eigen::VectorXd xr = cen + (cen - xs[static_cast<size_t>(n)]);
    const double fr = f(xr);
    if (fr > fs[0]) {
      const Eigen::VectorXd xe = cen + 2.0 * (cen - xs[static_cast<size_t>(n)]);
      const double fe = f(xe);
      if (fe > fr) {
        xs[static_cast<size_t>(n)] = xe;
        fs[static_cast<size_t>(n)] = fe;
      } else {
        xs[static_cast<size_t>(n)] = xr;
        fs[static_cast<size_t>(n)] = fr;
      }
    } else if (fr > fs[static_cast<size_t>(n - 1)]) {
      xs[static_cast<size_t>(n)] = xr;
      fs[static_cast<size_t>(n)] = fr;
    } else {
      const Eigen::VectorXd xc = cen + 0.5 * (xs[static_cast<size_t>(n)] - cen);
      const double fc = f(xc);
      if (fc > fs[static_cast<size_t>(n)]) {
        xs[static_cast<size_t>(n)] = xc;
        fs[static_cast<size_t>(n)] = fc;
      } else {
        for (int i = 1; i <= n; ++i) {
          xs[static_cast<size_t>(i)] = xs[0] + 0.5 * (xs[static_cast<size_t>(i)] - xs[0]);
          fs[static_cast<size_t>(i)] = f(xs[static_cast<size_t>(i)]);
        }
      }
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i)
    if (fs[static_cast<size_t>(i)] > fs[static_cast<size_t>(best)]) best = i;
  return xs[static_cast<size_t>(best)];
}

inline Eigen::MatrixXd random_spd(int p, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(p, p);
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) a(r, c) = normal(gen);
  return scale * (a * a.transpose() + 0.2 * Eigen::MatrixXd::Identity(p, p));
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace oracles
