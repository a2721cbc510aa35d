#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dsched/convex.hpp"

#include <cstring>

using namespace dsched;
using namespace dsched::opt;

namespace {

SpMat dense_to_sparse(const Mat& m) { return m.sparseView(); }

QpSpec make_qp(const Mat& h, const Vec& c, const Mat& a, const Vec& b,
               const Vec& lo, const Vec& hi) {
  QpSpec s;
  s.h = dense_to_sparse(h);
  s.c = c;
  s.a_eq = dense_to_sparse(a);
  s.b_eq = b;
  s.lower = lo;
  s.upper = hi;
  return s;
}

Vec constant(int n, double v) { return Vec::Constant(n, v); }

}  // namespace

TEST_CASE("qp: min x^2 subject to x = 1") {
  Mat h(1, 1);
  h << 2.0;
  Mat a(1, 1);
  a << 1.0;
  Vec b(1), c(1);
  b << 1.0;
  c << 0.0;
  auto res = solve_qp(make_qp(h, c, a, b, constant(1, -kInf), constant(1, kInf)));
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-8));
  // stationarity: 2x - lambda = 0 at x = 1
  CHECK(2.0 * res.x[0] - res.multipliers[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("qp: projection onto unit ball, min (x-3)^2 with ||x|| <= 1") {
  QpSpec s;
  Mat h(1, 1);
  h << 2.0;
  s.h = dense_to_sparse(h);
  s.c = Vec(1);
  s.c << -6.0;
  s.a_eq = SpMat(0, 1);
  s.b_eq = Vec(0);
  s.lower = constant(1, -kInf);
  s.upper = constant(1, kInf);
  s.radius = 1.0;
  auto res = solve_qp(s);
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(res.trust_region_dual > 0.0);
}

TEST_CASE("qp: min x^2 + y^2 subject to x + y = 2") {
  Mat h = 2.0 * Mat::Identity(2, 2);
  Mat a(1, 2);
  a << 1.0, 1.0;
  Vec b(1);
  b << 2.0;
  auto res = solve_qp(make_qp(h, Vec::Zero(2), a, b, constant(2, -kInf), constant(2, kInf)));
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(res.x[1] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("qp: indefinite Hessian is clamped and flagged") {
  Mat h(2, 2);
  h << 1.0, 0.0, 0.0, -4.0;
  Mat a(1, 2);
  a << 1.0, 0.0;
  Vec b(1);
  b << 0.5;
  auto res = solve_qp(make_qp(h, Vec::Zero(2), a, b, constant(2, -1.0), constant(2, 1.0)));
  CHECK(res.hessian_clamped);
  CHECK(res.status == SolveStatus::kOptimal);
}

TEST_CASE("lp: min -x subject to 0 <= x <= 1") {
  Vec c(1);
  c << -1.0;
  auto res = solve_lp(c, SpMat(0, 1), Vec(0), constant(1, 0.0), constant(1, 1.0));
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(res.complementarity <= 1e-9);
}

TEST_CASE("lp: moment-matching toy has probabilities (0.5, 0, 0.5)") {
  // candidates {-1, 0, +1}, match mean 0 and variance 1 exactly:
  // vars p1..p3, d+ and d- per moment row
  int n = 3 + 4;
  Vec c = Vec::Zero(n);
  for (int i = 3; i < n; ++i) c[i] = 1.0;
  Mat a = Mat::Zero(3, n);
  Vec b(3);
  // sum p = 1
  a(0, 0) = a(0, 1) = a(0, 2) = 1.0;
  b[0] = 1.0;
  // mean: -p1 + p3 - d1+ + d1- = 0
  a(1, 0) = -1.0;
  a(1, 2) = 1.0;
  a(1, 3) = -1.0;
  a(1, 4) = 1.0;
  b[1] = 0.0;
  // var: p1 + p3 - d2+ + d2- = 1
  a(2, 0) = 1.0;
  a(2, 2) = 1.0;
  a(2, 5) = -1.0;
  a(2, 6) = 1.0;
  b[2] = 1.0;
  Vec lo = constant(n, 0.0), hi = constant(n, kInf);
  auto res = solve_lp(Vec(c), dense_to_sparse(a), b, lo, hi);
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(res.x[1] == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(res.x[2] == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(res.objective == doctest::Approx(0.0).epsilon(1e-8));
}

TEST_CASE("lp: crossing bounds detected as infeasible") {
  Vec c(1);
  c << 1.0;
  auto res = solve_lp(c, SpMat(0, 1), Vec(0), constant(1, 1.0), constant(1, 0.0));
  CHECK(res.status == SolveStatus::kInfeasible);
}

TEST_CASE("lp: inconsistent equalities detected as infeasible") {
  Mat a(2, 2);
  a << 1.0, 1.0, 1.0, 1.0;
  Vec b(2);
  b << 2.0, 3.0;
  Vec c = Vec::Zero(2);
  auto res = solve_lp(c, dense_to_sparse(a), b, constant(2, -10.0), constant(2, 10.0));
  CHECK(res.status == SolveStatus::kInfeasible);
  CHECK(res.infeasibility_certificate < 1e-4);
}

TEST_CASE("lp: unbounded detected") {
  Vec c(1);
  c << -1.0;
  auto res = solve_lp(c, SpMat(0, 1), Vec(0), constant(1, 0.0), constant(1, kInf));
  CHECK(res.status == SolveStatus::kUnbounded);
}

TEST_CASE("qp: strong duality on random convex instances up to n = 200") {
  NormalSampler rng(123456789ull);
  for (int trial = 0; trial < 8; ++trial) {
    int n = 20 + trial * 25;
    int m = n / 4;
    Mat f(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) f(i, j) = rng.normal();
    Mat h = f.transpose() * f / n + 0.1 * Mat::Identity(n, n);
    Mat a(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
    Vec xstar(n);
    for (int i = 0; i < n; ++i) xstar[i] = 0.5 * rng.normal();
    Vec b = a * xstar;
    Vec c(n);
    for (int i = 0; i < n; ++i) c[i] = rng.normal();
    Vec lo = constant(n, -3.0), hi = constant(n, 3.0);
    auto res = solve_qp(make_qp(h, c, a, b, lo, hi));
    REQUIRE(res.status == SolveStatus::kOptimal);
    // duality gap via complementarity: c'x + x'Hx - (b'y + bound terms) equals
    // the complementarity sum; both are reported
    CHECK(res.kkt_residual <= 1e-7);
    CHECK(res.complementarity <= 1e-7);
    // primal feasibility
    CHECK((a * res.x - b).cwiseAbs().maxCoeff() <= 1e-7);
  }
}

TEST_CASE("solver is deterministic: identical input gives bit-identical output") {
  Mat h = 2.0 * Mat::Identity(3, 3);
  Mat a(1, 3);
  a << 1.0, 2.0, -1.0;
  Vec b(1);
  b << 0.7;
  Vec c(3);
  c << 0.3, -1.2, 0.05;
  auto s = make_qp(h, c, a, b, constant(3, -2.0), constant(3, 2.0));
  auto r1 = solve_qp(s);
  auto r2 = solve_qp(s);
  REQUIRE(r1.x.size() == r2.x.size());
  CHECK(std::memcmp(r1.x.data(), r2.x.data(), sizeof(double) * r1.x.size()) == 0);
  CHECK(r1.objective == r2.objective);
}

TEST_CASE("qp: fixed variables are eliminated and honored") {
  Mat h = 2.0 * Mat::Identity(2, 2);
  Vec c(2);
  c << -2.0, 0.0;
  Vec lo(2), hi(2);
  lo << -5.0, 0.7;
  hi << 5.0, 0.7;
  auto res = solve_qp(make_qp(h, c, Mat(0, 2), Vec(0), lo, hi));
  REQUIRE(res.status == SolveStatus::kOptimal);
  CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(res.x[1] == doctest::Approx(0.7).epsilon(1e-12));
}
