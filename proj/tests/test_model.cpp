#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "oracles.hpp"
#include "saemx/errors.hpp"
#include "saemx/model.hpp"

using namespace saemx;
using Eigen::VectorXd;

TEST_SUITE("model") {
  TEST_CASE("oral absorption curve matches frozen hand-computed values") {
    CHECK(predict_theophylline(2.0, 0.5, 1.5, 0.04, 4.0) ==
          doctest::Approx(6.78047932900012).epsilon(1e-12));
    CHECK(predict_theophylline(9.0, 0.5, 1.5, 0.04, 4.0) ==
          doctest::Approx(4.113387760570863).epsilon(1e-12));
    CHECK(predict_theophylline(0.0, 0.5, 1.5, 0.04, 4.0) == 0.0);
  }

  TEST_CASE("oral absorption is continuous across the elimination flip point") {
    const double V = 0.5, Cl = 0.08, t = 2.0, dose = 4.0;
    const double Ka_flip = Cl / V;
    const double at_flip = predict_theophylline(t, V, Ka_flip, Cl, dose);
    CHECK(at_flip == doctest::Approx(1.8589415349086489).epsilon(1e-12));
    const double near = predict_theophylline(t, V, Ka_flip * (1.0 + 1e-7), Cl, dose);
    CHECK(near == doctest::Approx(at_flip).epsilon(1e-6));
  }

  TEST_CASE("oral absorption rejects invalid inputs") {
    CHECK_THROWS_AS(predict_theophylline(1.0, -0.5, 1.5, 0.04, 4.0), std::domain_error);
    CHECK_THROWS_AS(predict_theophylline(1.0, 0.5, 0.0, 0.04, 4.0), std::domain_error);
    CHECK_THROWS_AS(predict_theophylline(-1.0, 0.5, 1.5, 0.04, 4.0), std::domain_error);
    CHECK_THROWS_AS(predict_theophylline(1.0, 0.5, 1.5, 0.04, 0.0), std::domain_error);
  }

  TEST_CASE("steady-state zero-order curve matches frozen values on both branches") {
    CHECK(predict_zero_order_ss(1.0, 20.0, 2.0, 4.0, 100.0, 12.0) ==
          doctest::Approx(2.7680417303321616).epsilon(1e-12));
    CHECK(predict_zero_order_ss(6.0, 20.0, 2.0, 4.0, 100.0, 12.0) ==
          doctest::Approx(2.0364246817160687).epsilon(1e-12));
    // periodicity: concentration at the start and end of the interval agree
    CHECK(predict_zero_order_ss(0.0, 20.0, 2.0, 4.0, 100.0, 12.0) ==
          doctest::Approx(predict_zero_order_ss(12.0, 20.0, 2.0, 4.0, 100.0, 12.0)).epsilon(1e-10));
    CHECK_THROWS_AS(predict_zero_order_ss(1.0, 20.0, 13.0, 4.0, 100.0, 12.0), std::domain_error);
    CHECK_THROWS_AS(predict_zero_order_ss(-1.0, 20.0, 2.0, 4.0, 100.0, 12.0), std::domain_error);
  }

  TEST_CASE("registry predictor works on the log scale and ties clearance to exposure") {
    const StructuralModel& theo = structural_registry(kTheophyllineId);
    CHECK(theo.param_names == std::vector<std::string>{"logV", "logKa", "logAUC"});
    CHECK_FALSE(theo.needs_tau);
    VectorXd phi(3);
    const double V = 0.5, Ka = 1.5, AUC = 100.0, dose = 4.0;
    phi << std::log(V), std::log(Ka), std::log(AUC);
    DoseRecord dr;
    dr.amount = dose;
    CHECK(theo.predict(2.0, phi, dr) ==
          doctest::Approx(predict_theophylline(2.0, V, Ka, dose / AUC, dose)).epsilon(1e-12));
  }

  TEST_CASE("registry predictors return NaN instead of throwing on bad proposals") {
    const StructuralModel& theo = structural_registry(kTheophyllineId);
    VectorXd phi(3);
    phi << 1e4, 0.0, 4.0;  // overflows to an infinite volume
    DoseRecord dr;
    dr.amount = 4.0;
    CHECK(std::isnan(theo.predict(1.0, phi, dr)));
    dr.amount = 0.0;
    phi << 0.0, 0.0, 4.0;
    CHECK(std::isnan(theo.predict(1.0, phi, dr)));

    const StructuralModel& zss = structural_registry(kZeroOrderSsId);
    CHECK(zss.needs_tau);
    DoseRecord no_tau;
    no_tau.amount = 100.0;
    VectorXd phi2(3);
    phi2 << std::log(20.0), std::log(2.0), std::log(25.0);
    CHECK(std::isnan(zss.predict(1.0, phi2, no_tau)));
    no_tau.tau = 12.0;
    CHECK(std::isfinite(zss.predict(1.0, phi2, no_tau)));
  }

  TEST_CASE("error models scale the residual by the prediction as configured") {
    CHECK(ErrorModel::from_name("constant").scale(3.0) == 1.0);
    CHECK(ErrorModel::from_name("proportional").scale(3.0) == 3.0);
    CHECK(ErrorModel::from_name("combined").scale(3.0) == 4.0);
    CHECK(ErrorModel::from_name("combined").name() == "combined");
    CHECK_THROWS_AS(ErrorModel::from_name("additive_plus"), ConfigError);
  }

  TEST_CASE("registry lookups reject unknown ids and accept new registrations") {
    CHECK_THROWS_AS(structural_registry("no_such_model"), ConfigError);
    const auto ids = registered_structural_ids();
    CHECK(std::find(ids.begin(), ids.end(), kTheophyllineId) != ids.end());
    CHECK(std::find(ids.begin(), ids.end(), kZeroOrderSsId) != ids.end());

    StructuralModel custom = oracles::scalar_model(1.0).structural;
    custom.id = "test_registry_entry";
    register_structural_model(custom);
    CHECK(structural_registry("test_registry_entry").p() == 1);
  }
}
