#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "saemx/prob.hpp"

using namespace saemx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

ThetaParams random_full_theta(int K, int p, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ThetaParams t;
  t.structure = CovStructure::Full;
  t.mu = VectorXd::NullaryExpr(p, [&](Eigen::Index) { return normal(gen); });
  t.beta = MatrixXd::NullaryExpr(K, p, [&](Eigen::Index, Eigen::Index) { return normal(gen); });
  t.beta.row(0).setZero();
  t.omega = oracles::random_spd(p, gen);
  t.psi = oracles::random_spd(p, gen, 0.5);
  t.sigma2 = 0.3;
  return t;
}

}  // namespace

TEST_SUITE("prob") {
  TEST_CASE("gamma matrix tiles omega everywhere and adds psi on the diagonal") {
    std::mt19937_64 gen(11);
    const int p = 2, K = 3;
    const ThetaParams t = random_full_theta(K, p, gen);
    const MatrixXd gamma = gamma_matrix(t, K);
    REQUIRE(gamma.rows() == K * p);
    CHECK(oracles::max_abs_diff(gamma, gamma.transpose()) == 0.0);
    for (int a = 0; a < K; ++a)
      for (int b = 0; b < K; ++b) {
        const MatrixXd block = gamma.block(a * p, b * p, p, p);
        const MatrixXd expect = a == b ? MatrixXd(t.omega + t.psi) : t.omega;
        CHECK(oracles::max_abs_diff(block, expect) == 0.0);
      }
  }

  TEST_CASE("floored inverse matches a plain inverse away from the boundary") {
    std::mt19937_64 gen(21);
    const MatrixXd a = oracles::random_spd(4, gen);
    const FlooredInverse fi = floored_spd_inverse(a);
    CHECK_FALSE(fi.floored);
    CHECK(oracles::max_abs_diff(fi.inv * a, MatrixXd::Identity(4, 4)) < 1e-9);
    Eigen::LLT<MatrixXd> llt(a);
    double log_det = 0.0;
    for (int j = 0; j < 4; ++j) log_det += 2.0 * std::log(llt.matrixL()(j, j));
    CHECK(fi.log_det == doctest::Approx(log_det).epsilon(1e-10));
  }

  TEST_CASE("floored inverse floors rank-deficient matrices instead of failing") {
    VectorXd v(3);
    v << 1.0, -2.0, 0.5;
    const MatrixXd a = v * v.transpose();
    const FlooredInverse fi = floored_spd_inverse(a);
    CHECK(fi.floored);
    CHECK(fi.inv.allFinite());
    CHECK(std::isfinite(fi.log_det));

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
    const double eps = 1e-10 * a.trace() / 3.0;
    double expect_log_det = 0.0;
    MatrixXd expect_inv = MatrixXd::Zero(3, 3);
    for (int j = 0; j < 3; ++j) {
      const double lam = std::max(es.eigenvalues()[j], eps);
      expect_log_det += std::log(lam);
      expect_inv += es.eigenvectors().col(j) * es.eigenvectors().col(j).transpose() / lam;
    }
    CHECK(fi.log_det == doctest::Approx(expect_log_det).epsilon(1e-8));
    CHECK(oracles::max_abs_diff(fi.inv, expect_inv) / expect_inv.cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("floored inverse of the zero matrix uses the zero-scale stand-in") {
    const FlooredInverse fi = floored_spd_inverse(MatrixXd::Zero(3, 3));
    CHECK(fi.floored);
    CHECK(fi.inv.allFinite());
    CHECK(fi.inv(0, 0) == doctest::Approx(1.0 / kZeroScale).epsilon(1e-12));
    CHECK(fi.log_det == doctest::Approx(3.0 * std::log(kZeroScale)).epsilon(1e-12));
  }

  TEST_CASE("floored gaussian logpdf agrees with the reference density") {
    std::mt19937_64 gen(31);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int rep = 0; rep < 5; ++rep) {
      const int d = 2 + rep % 3;
      const MatrixXd cov = oracles::random_spd(d, gen);
      const VectorXd mean = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return normal(gen); });
      const VectorXd x = VectorXd::NullaryExpr(d, [&](Eigen::Index) { return normal(gen); });
      const FlooredInverse fi = floored_spd_inverse(cov);
      CHECK(gaussian_logpdf_floored(x, mean, fi) ==
            doctest::Approx(oracles::mvn_logpdf(x, mean, cov)).epsilon(1e-10));
    }
  }

  TEST_CASE("posterior moments of the subject effect match the closed form") {
    std::mt19937_64 gen(41);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int rep = 0; rep < 10; ++rep) {
      const int p = 1 + rep % 3, K = 2 + rep % 3, n = 3;
      const ThetaParams t = random_full_theta(K, p, gen);
      IndividualParams phi;
      for (int i = 0; i < n; ++i)
        phi.phi.push_back(
            MatrixXd::NullaryExpr(K, p, [&](Eigen::Index, Eigen::Index) { return normal(gen); }));

      const PosteriorBMoments post = posterior_b_moments(phi, t);
      REQUIRE(post.m.rows() == n);
      REQUIRE(post.V.rows() == p);

      const MatrixXd omega_inv = t.omega.inverse();
      const MatrixXd psi_inv = t.psi.inverse();
      const MatrixXd V = (omega_inv + K * psi_inv).inverse();
      CHECK(oracles::max_abs_diff(post.V, V) < 1e-10);
      for (int i = 0; i < n; ++i) {
        VectorXd resid_sum = VectorXd::Zero(p);
        for (int k = 0; k < K; ++k)
          resid_sum += phi.phi[static_cast<size_t>(i)].row(k).transpose() - t.beta.row(k).transpose();
        const VectorXd m_i = V * (psi_inv * resid_sum + omega_inv * t.mu);
        CHECK(oracles::max_abs_diff(post.m.row(i).transpose(), m_i) < 1e-10);
      }
    }
  }

  TEST_CASE("complete-data log-likelihood decomposes into its three gaussian parts") {
    const Dataset data = oracles::scalar_dataset({{{1.1, 2.3}, {0.7}}, {{0.4}, {1.9, 0.2}}}, {1.0, 3.0});
    const ModelSpec model = oracles::scalar_model(0.0, ErrorKind::Combined);

    Eigen::VectorXd mu(1), w(1), p(1);
    mu << 0.8;
    w << 0.5;
    p << 0.2;
    Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(2, 1);
    beta(1, 0) = -0.3;
    const ThetaParams theta = ThetaParams::diagonal(mu, beta, w, p, 0.6);

    IndividualParams phi;
    MatrixXd phi0(2, 1), phi1(2, 1);
    phi0 << 1.4, 0.6;
    phi1 << 0.9, 1.2;
    phi.phi = {phi0, phi1};
    MatrixXd btilde(2, 1);
    btilde << 1.0, 0.7;

    auto scalar_logpdf = [](double x, double mean, double var) {
      VectorXd xv(1), mv(1);
      xv << x;
      mv << mean;
      return oracles::mvn_logpdf(xv, mv, MatrixXd::Constant(1, 1, var));
    };

    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
      for (int k = 0; k < 2; ++k) {
        const UnitData& u = data.subjects[static_cast<size_t>(i)].units[static_cast<size_t>(k)];
        const double f = phi.phi[static_cast<size_t>(i)](k, 0);
        const double g = 1.0 + f;
        for (double y : u.dv) expect += scalar_logpdf(y, f, theta.sigma2 * g * g);
        expect += scalar_logpdf(phi.phi[static_cast<size_t>(i)](k, 0), btilde(i, 0) + theta.beta(k, 0),
                                theta.psi(0, 0));
      }
      expect += scalar_logpdf(btilde(i, 0), theta.mu[0], theta.omega(0, 0));
    }
    CHECK(complete_loglik(data, model, phi, btilde, theta) ==
          doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("conditional expectation of the complete log-likelihood matches quadrature") {
    const Dataset data = oracles::scalar_dataset({{{1.1, 2.3}, {0.7}}, {{0.4}, {1.9, 0.2}}}, {1.0, 3.0});
    const ModelSpec model = oracles::scalar_model(0.0, ErrorKind::Constant);

    Eigen::VectorXd mu(1), w(1), p(1);
    mu << 0.8;
    w << 0.5;
    p << 0.2;
    Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(2, 1);
    beta(1, 0) = -0.3;
    const ThetaParams theta = ThetaParams::diagonal(mu, beta, w, p, 0.6);
    Eigen::VectorXd w2(1), p2(1);
    w2 << 0.35;
    p2 << 0.45;
    Eigen::MatrixXd beta2 = Eigen::MatrixXd::Zero(2, 1);
    beta2(1, 0) = 0.1;
    Eigen::VectorXd mu2(1);
    mu2 << 1.1;
    const ThetaParams theta_prev = ThetaParams::diagonal(mu2, beta2, w2, p2, 0.5);

    IndividualParams phi;
    MatrixXd phi0(2, 1), phi1(2, 1);
    phi0 << 1.4, 0.6;
    phi1 << 0.9, 1.2;
    phi.phi = {phi0, phi1};

    // three-node Gauss-Hermite is exact for the quadratic integrand
    const PosteriorBMoments post = posterior_b_moments(phi, theta_prev);
    const double nodes[3] = {-std::sqrt(1.5), 0.0, std::sqrt(1.5)};
    const double weights[3] = {1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0};
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
      for (int q = 0; q < 3; ++q) {
        const double b = post.m(i, 0) + std::sqrt(2.0 * post.V(0, 0)) * nodes[q];
        double term = 0.0;
        for (int k = 0; k < 2; ++k) {
          const double r = phi.phi[static_cast<size_t>(i)](k, 0) - b - theta.beta(k, 0);
          term += -0.5 * (std::log(2.0 * M_PI * theta.psi(0, 0)) + r * r / theta.psi(0, 0));
        }
        const double rb = b - theta.mu[0];
        term += -0.5 * (std::log(2.0 * M_PI * theta.omega(0, 0)) + rb * rb / theta.omega(0, 0));
        expect += weights[q] * term;
      }
    }
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 2; ++k) {
        const UnitData& u = data.subjects[static_cast<size_t>(i)].units[static_cast<size_t>(k)];
        const double f = phi.phi[static_cast<size_t>(i)](k, 0);
        for (double y : u.dv)
          expect += -0.5 * (std::log(2.0 * M_PI * theta.sigma2) + (y - f) * (y - f) / theta.sigma2);
      }

    CHECK(conditional_R(data, model, phi, theta, theta_prev) ==
          doctest::Approx(expect).epsilon(1e-10));
  }
}
