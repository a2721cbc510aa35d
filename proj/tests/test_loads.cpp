#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dsched/loads.hpp"

#include <cmath>

using namespace dsched;
using namespace dsched::load;

namespace {

// injected load current implied by the ZP demand law and the demand sign
// convention p + jq = -v conj(i)
Complex load_current(const ZpModel& m, Complex v) {
  auto [p, q] = zp_demand(m, v);
  return -std::conj(Complex(p, q)) / std::conj(v);
}

Eigen::Matrix2d fd_current_jacobian(const ZpModel& m, Complex v, double h = 1e-6) {
  Eigen::Matrix2d j;
  Complex dx = load_current(m, v + Complex(h, 0)) - load_current(m, v - Complex(h, 0));
  Complex dy = load_current(m, v + Complex(0, h)) - load_current(m, v - Complex(0, h));
  j << dx.real() / (2 * h), dy.real() / (2 * h), dx.imag() / (2 * h), dy.imag() / (2 * h);
  return j;
}

}  // namespace

TEST_CASE("zip_to_zp moves half of the current share into each neighbor") {
  ZipModel zip;
  zip.a_p = 0.4; zip.b_p = 0.3; zip.c_p = 0.3;
  zip.a_q = 0.4; zip.b_q = 0.3; zip.c_q = 0.3;
  zip.p0 = 1.0; zip.q0 = 0.5;
  ZpModel zp = zip_to_zp(zip);
  CHECK(zp.ap == doctest::Approx(0.55).epsilon(1e-14));
  CHECK(zp.cp == doctest::Approx(0.45).epsilon(1e-14));
}

TEST_CASE("zip_to_zp with no current share is the identity") {
  ZipModel zip;
  zip.a_p = 0.7; zip.b_p = 0.0; zip.c_p = 0.3;
  zip.a_q = 0.2; zip.b_q = 0.0; zip.c_q = 0.8;
  ZpModel zp = zip_to_zp(zip);
  CHECK(zp.ap == 0.7);
  CHECK(zp.cp == 0.3);
  CHECK(zp.aq == 0.2);
  CHECK(zp.cq == 0.8);
}

TEST_CASE("the quadratic replacement of |V|/V0 equals 0.905 at 0.9") {
  double x = 0.9;
  CHECK(std::abs(0.5 * (1.0 + x * x) - 0.905) <= 1e-15);
}

TEST_CASE("zp_demand at nominal voltage returns the base demand") {
  ZpModel m;
  m.ap = 0.3; m.cp = 0.7; m.aq = 0.6; m.cq = 0.4;
  m.p0 = 1.2; m.q0 = 0.8;
  auto [p, q] = zp_demand(m, Complex(1.0, 0.0));
  CHECK(p == doctest::Approx(1.2).epsilon(1e-14));
  CHECK(q == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("pure impedance demand scales with |V|^2") {
  ZpModel m;
  m.ap = 1.0; m.cp = 0.0; m.aq = 1.0; m.cq = 0.0;
  m.p0 = 1.0; m.q0 = 0.0;
  auto [p, q] = zp_demand(m, Complex(0.95, 0.0));
  CHECK(p == doctest::Approx(0.9025).epsilon(1e-14));
  CHECK(q == 0.0);
}

TEST_CASE("a' = 0 demand is voltage independent") {
  ZpModel m;
  m.ap = 0.0; m.cp = 1.0; m.aq = 0.0; m.cq = 1.0;
  m.p0 = 0.7; m.q0 = 0.2;
  auto [p1, q1] = zp_demand(m, Complex(0.9, 0.1));
  auto [p2, q2] = zp_demand(m, Complex(1.05, -0.2));
  CHECK(p1 == p2);
  CHECK(q1 == q2);
}

TEST_CASE("perturbed load matrix matches finite differences (constant power)") {
  ZpModel m;
  m.ap = 0.0; m.cp = 1.0; m.aq = 0.0; m.cq = 1.0;
  m.p0 = 0.8; m.q0 = 0.3;
  Complex v(1.01, -0.03);
  Complex i = load_current(m, v);
  Eigen::Matrix2d a = load_perturbed_matrix(m, v, i);
  Eigen::Matrix2d fd = fd_current_jacobian(m, v);
  CHECK((a - fd).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("perturbed load matrix matches finite differences (mixed shares)") {
  ZpModel m;
  m.ap = 0.55; m.cp = 0.45; m.aq = 0.35; m.cq = 0.65;
  m.p0 = 1.1; m.q0 = 0.4;
  Complex v(0.97, 0.05);
  Complex i = load_current(m, v);
  Eigen::Matrix2d a = load_perturbed_matrix(m, v, i);
  Eigen::Matrix2d fd = fd_current_jacobian(m, v);
  CHECK((a - fd).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("pure impedance load equals the constant admittance stamp") {
  ZpModel m;
  m.ap = 1.0; m.cp = 0.0; m.aq = 1.0; m.cq = 0.0;
  m.p0 = 0.9; m.q0 = 0.35;
  Complex v(1.02, 0.04);
  Complex i = load_current(m, v);
  Eigen::Matrix2d a = load_perturbed_matrix(m, v, i);
  // injected current of an impedance load is linear: i = -y v with
  // y = conj(s0)/v0^2, so dI = -y dV exactly
  Complex y = std::conj(Complex(m.p0, m.q0));
  Eigen::Matrix2d expect;
  expect << -y.real(), y.imag(), -y.imag(), -y.real();
  CHECK((a - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("zero demand gives a zero perturbed matrix") {
  ZpModel m;
  m.p0 = 0.0; m.q0 = 0.0;
  Eigen::Matrix2d a = load_perturbed_matrix(m, Complex(1.0, 0.0), Complex(0.0, 0.0));
  CHECK(a.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("inconsistent anchors are rejected") {
  ZpModel m;
  m.ap = 0.5; m.cp = 0.5; m.p0 = 1.0;
  m.aq = 0.5; m.cq = 0.5; m.q0 = 0.5;
  CHECK_THROWS_AS(load_perturbed_matrix(m, Complex(1.0, 0.0), Complex(0.5, 0.5)),
                  InvalidInput);
}

TEST_CASE("update recovers synthetic coefficients exactly") {
  ZpModel truth;
  truth.ap = 0.55; truth.cp = 0.45; truth.aq = 0.3; truth.cq = 0.7;
  truth.p0 = 1.0; truth.q0 = 0.4;
  ZpModel prior;
  prior.ap = 0.2; prior.cp = 0.8; prior.aq = 0.9; prior.cq = 0.1;
  prior.p0 = 0.5; prior.q0 = 1.0;
  Measurement m1, m2;
  m1.v_mag = 0.98;
  auto [p1, q1] = zp_demand(truth, Complex(0.98, 0.0));
  m1.p_d = p1; m1.q_d = q1;
  m2.v_mag = 1.01;
  auto [p2, q2] = zp_demand(truth, Complex(1.01, 0.0));
  m2.p_d = p2; m2.q_d = q2;

  auto res = update_load_model(prior, m1, m2);
  REQUIRE(res.updated);
  CHECK(std::abs(res.model.ap - truth.ap) <= 1e-12);
  CHECK(std::abs(res.model.p0 - truth.p0) <= 1e-12);
  CHECK(std::abs(res.model.aq - truth.aq) <= 1e-12);
  CHECK(std::abs(res.model.q0 - truth.q0) <= 1e-12);
}

TEST_CASE("identical measurements keep the prior") {
  ZpModel prior;
  prior.ap = 0.5; prior.cp = 0.5; prior.p0 = 1.0;
  Measurement m;
  m.v_mag = 1.0; m.p_d = 1.0; m.q_d = 0.0;
  auto res = update_load_model(prior, m, m);
  CHECK_FALSE(res.updated);
  CHECK(res.model.ap == prior.ap);
}

TEST_CASE("negligible coefficient changes keep the prior") {
  ZpModel truth;
  truth.ap = 0.5; truth.cp = 0.5; truth.aq = 0.5; truth.cq = 0.5;
  truth.p0 = 1.0; truth.q0 = 0.5;
  Measurement m1, m2;
  m1.v_mag = 0.98;
  auto [p1, q1] = zp_demand(truth, Complex(0.98, 0.0));
  m1.p_d = p1; m1.q_d = q1;
  m2.v_mag = 1.01;
  auto [p2, q2] = zp_demand(truth, Complex(1.01, 0.0));
  m2.p_d = p2; m2.q_d = q2;
  // prior already equals the truth: relative change below tolerance
  auto res = update_load_model(truth, m1, m2, 1e-3);
  CHECK_FALSE(res.updated);
}

TEST_CASE("ZP stays within b_p * 0.005 of ZIP over the working voltage band") {
  NormalSampler rng(777);
  for (int trial = 0; trial < 50; ++trial) {
    double b = rng.uniform();
    double a = (1.0 - b) * rng.uniform();
    double c = 1.0 - a - b;
    ZipModel zip;
    zip.a_p = a; zip.b_p = b; zip.c_p = c;
    zip.a_q = a; zip.b_q = b; zip.c_q = c;
    zip.p0 = 1.0; zip.q0 = 1.0;
    ZpModel zp = zip_to_zp(zip);
    for (double x = 0.9; x <= 1.1 + 1e-12; x += 0.005) {
      double p_zip = zip.p0 * (zip.a_p * x * x + zip.b_p * x + zip.c_p);
      auto [p_zp, q_zp] = zp_demand(zp, Complex(x, 0.0));
      (void)q_zp;
      // deviation relative to nominal demand; the bound is tight at the edges
      CHECK(std::abs(p_zp - p_zip) / zip.p0 <= b * 0.005 + 1e-12);
    }
  }
}
