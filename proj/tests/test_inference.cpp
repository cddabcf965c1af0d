#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "saemx/errors.hpp"
#include "saemx/inference.hpp"
#include "saemx/trial.hpp"

using namespace saemx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

ThetaParams scalar_theta(double mu, double beta2, double w2, double p2, double s2) {
  VectorXd m(1), w(1), p(1);
  m << mu;
  w << w2;
  p << p2;
  MatrixXd beta = MatrixXd::Zero(2, 1);
  beta(1, 0) = beta2;
  return ThetaParams::diagonal(m, beta, w, p, s2);
}

Dataset rate_dataset() {
  return oracles::scalar_dataset({{{1.3, 1.9, 3.4}, {0.9, 2.6, 3.2}},
                                  {{0.7, 2.2, 2.8}, {1.2, 2.0, 3.8}},
                                  {{1.1, 2.4, 3.1}, {0.8, 1.7, 2.9}},
                                  {{0.9, 1.8, 3.3}, {1.4, 2.3, 3.0}}},
                                 {1.0, 2.0, 3.0});
}

// expected information of one gaussian subject in the estimation chart
// (mu, beta2, log w2, log p2, log s2) for the scalar rate model
MatrixXd textbook_fim(const Dataset& data, const ThetaParams& theta) {
  const double w2 = theta.omega(0, 0), p2 = theta.psi(0, 0), s2 = theta.sigma2;
  MatrixXd fim = MatrixXd::Zero(5, 5);
  for (const SubjectData& subj : data.subjects) {
    const int ni = subj.n_obs();
    VectorXd hall(ni), dmu(ni), dbeta(ni);
    MatrixXd blockdiag = MatrixXd::Zero(ni, ni);
    int row = 0;
    for (size_t k = 0; k < subj.units.size(); ++k) {
      const UnitData& u = subj.units[k];
      for (int j = 0; j < u.n_obs(); ++j) {
        hall[row + j] = u.times[static_cast<size_t>(j)];
        dmu[row + j] = hall[row + j];
        dbeta[row + j] = k == 1 ? hall[row + j] : 0.0;
      }
      const VectorXd hk = hall.segment(row, u.n_obs());
      blockdiag.block(row, row, u.n_obs(), u.n_obs()) = hk * hk.transpose();
      row += u.n_obs();
    }
    const MatrixXd sigma = w2 * hall * hall.transpose() + p2 * blockdiag +
                           s2 * MatrixXd::Identity(ni, ni);
    const MatrixXd sigma_inv = sigma.llt().solve(MatrixXd::Identity(ni, ni));

    std::vector<VectorXd> dmean = {dmu, dbeta, VectorXd::Zero(ni), VectorXd::Zero(ni),
                                   VectorXd::Zero(ni)};
    std::vector<MatrixXd> dcov = {MatrixXd::Zero(ni, ni), MatrixXd::Zero(ni, ni),
                                  w2 * hall * hall.transpose(), p2 * blockdiag,
                                  s2 * MatrixXd::Identity(ni, ni)};
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b) {
        fim(a, b) += dmean[static_cast<size_t>(a)].dot(sigma_inv * dmean[static_cast<size_t>(b)]);
        fim(a, b) += 0.5 * (sigma_inv * dcov[static_cast<size_t>(a)] * sigma_inv *
                            dcov[static_cast<size_t>(b)]).trace();
      }
  }
  return fim;
}

std::vector<MatrixXd> flat_phi_bar(const Dataset& data, const ThetaParams& theta) {
  std::vector<MatrixXd> out;
  for (int i = 0; i < data.n_subjects(); ++i) {
    MatrixXd m(2, 1);
    m << theta.mu[0], theta.mu[0] + theta.beta(1, 0);
    out.push_back(m);
  }
  return out;
}

}  // namespace

TEST_SUITE("inference") {
  TEST_CASE("chi-square tail probability matches the complementary error function") {
    for (double x : {0.1, 1.0, 3.841458820694124, 10.0, 25.0})
      CHECK(chi2_1_upper_tail(x) == doctest::Approx(std::erfc(std::sqrt(0.5 * x))).epsilon(1e-13));
    CHECK(chi2_1_upper_tail(3.841458820694124) == doctest::Approx(0.05).epsilon(1e-10));
    CHECK(chi2_1_upper_tail(0.0) == 1.0);
    CHECK(chi2_1_upper_tail(-2.0) == 1.0);
  }

  TEST_CASE("squared z-score test on a hand example") {
    const TestResult r = wald_test(0.3, 0.1, "beta.logAUC");
    CHECK(r.method == "wald");
    CHECK(r.component == "beta.logAUC");
    CHECK(r.statistic == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(std::erfc(std::sqrt(4.5))).epsilon(1e-12));
    CHECK_FALSE(r.mc_caveat);
    CHECK_THROWS_AS(wald_test(0.3, 0.0, "beta.logAUC"), NumericalError);
    CHECK_THROWS_AS(wald_test(0.3, std::numeric_limits<double>::quiet_NaN(), "beta.logAUC"),
                    NumericalError);
  }

  TEST_CASE("likelihood ratio test statistic, p-value and monte carlo caveat") {
    LoglikEstimate full{-100.0, 0.2, 5000}, reduced{-102.5, 0.2, 5000};
    const TestResult r = lrt(full, reduced, "beta.logAUC");
    CHECK(r.method == "lrt");
    CHECK(r.statistic == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(chi2_1_upper_tail(5.0)).epsilon(1e-12));
    // |5 - 3.8415| = 1.159 vs 3 * 2 * sqrt(0.08) = 1.697: flagged
    CHECK(r.mc_caveat);

    LoglikEstimate tight_full{-100.0, 0.01, 5000}, tight_red{-102.5, 0.01, 5000};
    CHECK_FALSE(lrt(tight_full, tight_red, "beta.logAUC").mc_caveat);

    // negative statistics keep p = 1
    const TestResult neg = lrt(reduced, full, "beta.logAUC");
    CHECK(neg.statistic == doctest::Approx(-5.0));
    CHECK(neg.p_value == 1.0);
  }

  TEST_CASE("instrumental fitting recovers empirical moments with inflation") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int T = 4000, d = 2;
    const MatrixXd cov_true = oracles::random_spd(d, gen);
    const Eigen::LLT<MatrixXd> llt(cov_true);
    std::vector<std::vector<VectorXd>> draws(1);
    VectorXd shift(d);
    shift << 1.0, -0.5;
    for (int t = 0; t < T; ++t) {
      VectorXd z(d);
      for (int j = 0; j < d; ++j) z[j] = normal(gen);
      draws[0].push_back(shift + llt.matrixL() * z);
    }
    VectorXd emp_mean = VectorXd::Zero(d);
    for (const VectorXd& x : draws[0]) emp_mean += x;
    emp_mean /= T;
    MatrixXd emp_cov = MatrixXd::Zero(d, d);
    for (const VectorXd& x : draws[0]) emp_cov += (x - emp_mean) * (x - emp_mean).transpose();
    emp_cov /= T - 1;

    const double inflation = 1.4;
    const auto instrumentals = build_instrumentals(draws, inflation);
    REQUIRE(instrumentals.size() == 1);
    const GaussianInstrumental& q = instrumentals[0];
    CHECK(oracles::max_abs_diff(q.mean, emp_mean) < 1e-10);
    const MatrixXd rebuilt = q.chol_lower * q.chol_lower.transpose();
    CHECK(oracles::max_abs_diff(rebuilt, inflation * emp_cov) < 1e-8);
    Eigen::LLT<MatrixXd> check(inflation * emp_cov);
    double log_det = 0.0;
    for (int j = 0; j < d; ++j) log_det += 2.0 * std::log(check.matrixL()(j, j));
    CHECK(q.log_det == doctest::Approx(log_det).epsilon(1e-8));
  }

  TEST_CASE("importance sampling reproduces the exact marginal likelihood") {
    const ModelSpec model = oracles::scalar_model(1.0, ErrorKind::Constant);
    const ThetaParams theta = scalar_theta(1.0, 0.2, 0.04, 0.01, 0.8);
    const Dataset data = rate_dataset();
    auto h = [](double t) { return t; };

    const double exact = oracles::exact_scalar_loglik(data, h, 1.0, theta.beta.col(0), 0.04, 0.01, 0.8);

    // instrumentals built directly on the exact per-subject posterior
    std::vector<GaussianInstrumental> instrumentals;
    const MatrixXd gamma = gamma_matrix(theta, 2);
    for (const SubjectData& subj : data.subjects) {
      const oracles::ScalarPosterior post =
          oracles::exact_scalar_posterior(subj, h, theta.stacked_mean(), gamma, theta.sigma2);
      GaussianInstrumental q;
      q.mean = post.mean;
      const MatrixXd inflated = 1.3 * post.cov;
      Eigen::LLT<MatrixXd> llt(inflated);
      q.chol_lower = llt.matrixL();
      q.log_det = 0.0;
      for (int j = 0; j < 2; ++j) q.log_det += 2.0 * std::log(llt.matrixL()(j, j));
      instrumentals.push_back(q);
    }

    const LoglikEstimate est = importance_sampling_loglik(data, model, theta, instrumentals, 20000, 5150);
    CHECK(est.samples == 20000);
    CHECK(est.mc_standard_error > 0.0);
    CHECK(est.mc_standard_error < 0.05);
    CHECK(std::abs(est.value - exact) < 4.0 * est.mc_standard_error + 1e-6);

    const LoglikEstimate again = importance_sampling_loglik(data, model, theta, instrumentals, 20000, 5150);
    CHECK(again.value == est.value);
    const LoglikEstimate other = importance_sampling_loglik(data, model, theta, instrumentals, 20000, 5151);
    CHECK(other.value != est.value);
  }

  TEST_CASE("end-to-end likelihood estimation agrees with the exact value") {
    const ModelSpec model = oracles::scalar_model(1.0, ErrorKind::Constant);
    const ThetaParams theta = scalar_theta(1.0, 0.2, 0.04, 0.01, 0.8);
    const Dataset data = rate_dataset();
    auto h = [](double t) { return t; };
    const double exact = oracles::exact_scalar_loglik(data, h, 1.0, theta.beta.col(0), 0.04, 0.01, 0.8);

    InferenceConfig cfg;
    cfg.loglik_samples = 4000;
    const LoglikEstimate est = estimate_loglik(data, model, theta, KernelConfig{}, cfg, 27182);
    CHECK(std::abs(est.value - exact) < 4.0 * est.mc_standard_error + 0.02);
    const LoglikEstimate again = estimate_loglik(data, model, theta, KernelConfig{}, cfg, 27182);
    CHECK(again.value == est.value);
  }

  TEST_CASE("linearized information matches the exact gaussian information for linear models") {
    const ThetaParams theta = scalar_theta(1.0, 0.2, 0.04, 0.01, 0.8);
    const Dataset data = rate_dataset();
    const ModelSpec model = oracles::scalar_model(1.0, ErrorKind::Constant);

    const FimResult fim = linearized_fim(data, model, theta, flat_phi_bar(data, theta),
                                         default_beta_mask(2, 1));
    REQUIRE(fim.invertible);
    CHECK(fim.excluded.empty());
    const std::vector<std::string> expect_names = {"mu.slope", "beta.slope", "omega2.slope",
                                                   "psi2.slope", "sigma2"};
    CHECK(fim.names == expect_names);

    const MatrixXd expect = textbook_fim(data, theta);
    CHECK(oracles::max_abs_diff(fim.fim, expect) / expect.cwiseAbs().maxCoeff() < 1e-6);

    // natural-scale standard errors via the delta method on the log chart
    const MatrixXd inv = expect.llt().solve(MatrixXd::Identity(5, 5));
    const double scale[5] = {1.0, 1.0, theta.omega(0, 0), theta.psi(0, 0), theta.sigma2};
    for (int c = 0; c < 5; ++c)
      CHECK(fim.se[c] == doctest::Approx(std::sqrt(inv(c, c)) * scale[c]).epsilon(1e-5));

    // the linearization point is irrelevant when the model is already linear
    std::vector<MatrixXd> shifted = flat_phi_bar(data, theta);
    for (MatrixXd& m : shifted) m.array() += 0.4;
    const FimResult fim2 = linearized_fim(data, model, theta, shifted, default_beta_mask(2, 1));
    CHECK(oracles::max_abs_diff(fim2.fim, fim.fim) / expect.cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("information is additive over independent subjects") {
    const ThetaParams theta = scalar_theta(1.0, 0.2, 0.04, 0.01, 0.8);
    Dataset data = rate_dataset();
    const ModelSpec model = oracles::scalar_model(1.0, ErrorKind::Constant);
    const FimResult one = linearized_fim(data, model, theta, flat_phi_bar(data, theta),
                                         default_beta_mask(2, 1));

    Dataset doubled = data;
    for (const SubjectData& s : data.subjects) {
      SubjectData copy = s;
      copy.id = s.id + "_dup";
      doubled.subjects.push_back(copy);
    }
    const FimResult two = linearized_fim(doubled, model, theta, flat_phi_bar(doubled, theta),
                                         default_beta_mask(2, 1));
    CHECK(oracles::max_abs_diff(two.fim, 2.0 * one.fim) / one.fim.cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("boundary variances are excluded from the chart instead of breaking it") {
    ThetaParams theta = scalar_theta(1.0, 0.2, 0.04, 0.0, 0.8);
    const Dataset data = rate_dataset();
    const ModelSpec model = oracles::scalar_model(1.0, ErrorKind::Constant);
    const FimResult fim = linearized_fim(data, model, theta, flat_phi_bar(data, theta),
                                         default_beta_mask(2, 1));
    CHECK(std::find(fim.excluded.begin(), fim.excluded.end(), "psi2.slope") != fim.excluded.end());
    CHECK(std::find(fim.names.begin(), fim.names.end(), "psi2.slope") == fim.names.end());
    CHECK(fim.se.allFinite());

    // masked unit effects never enter the chart
    BetaZeroMask mask = default_beta_mask(2, 1);
    mask(1, 0) = true;
    ThetaParams null_theta = scalar_theta(1.0, 0.0, 0.04, 0.01, 0.8);
    const FimResult masked = linearized_fim(data, model, null_theta, flat_phi_bar(data, null_theta), mask);
    CHECK(std::find(masked.names.begin(), masked.names.end(), "beta.slope") == masked.names.end());
  }
}
