#pragma once

// Equality-constrained smooth benchmark set used by the trust-region solver
// tests and the acceptance suite.

#include <memory>
#include <string>
#include <vector>

#include "dsched/trust_region.hpp"

namespace bench {

using dsched::Mat;
using dsched::Vec;
using dsched::kInf;
using dsched::tra::ConstrainedProblem;
using dsched::tra::ConstraintRow;
using dsched::tra::SparseGrad;

struct Benchmark {
  std::string name;
  std::shared_ptr<dsched::tra::EqualityFormProblem> problem;
  Vec start_lo, start_hi;  // box for random starts
};

inline ConstraintRow eq_row(
    std::function<double(const Vec&)> value,
    std::function<void(const Vec&, SparseGrad*)> grad,
    std::function<void(const Vec&, std::vector<Eigen::Triplet<double>>*)> hess =
        nullptr) {
  ConstraintRow row;
  row.value = std::move(value);
  row.gradient = std::move(grad);
  row.hessian = std::move(hess);
  row.lo = row.hi = 0.0;
  return row;
}

inline std::vector<Benchmark> benchmark_set() {
  std::vector<Benchmark> set;

  auto box = [](int n, double lo, double hi) {
    return std::make_pair(Vec::Constant(n, lo), Vec::Constant(n, hi));
  };

  {  // 1: scalar quadratic
    ConstrainedProblem p;
    p.n = 1;
    std::tie(p.lower, p.upper) = box(1, -10, 10);
    p.objective.value = [](const Vec& x) { return (x[0] - 2) * (x[0] - 2); };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      g->push_back({0, 2 * (x[0] - 2)});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      h->push_back({0, 0, 2.0});
    };
    set.push_back({"scalar-quadratic", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(1, -8), Vec::Constant(1, 8)});
  }
  {  // 2: projected quadratic
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -10, 10);
    p.objective.value = [](const Vec& x) { return x.squaredNorm(); };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      g->push_back({0, 2 * x[0]});
      g->push_back({1, 2 * x[1]});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      h->push_back({0, 0, 2.0});
      h->push_back({1, 1, 2.0});
    };
    p.rows.push_back(eq_row([](const Vec& x) { return x[0] + x[1] - 2; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({0, 1.0});
                              g->push_back({1, 1.0});
                            }));
    set.push_back({"sum-constrained-quadratic",
                   dsched::tra::to_equality_form(std::move(p)), Vec::Constant(2, -6),
                   Vec::Constant(2, 6)});
  }
  {  // 3: Rosenbrock valley
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -5, 5);
    p.objective.value = [](const Vec& x) {
      double a = 1 - x[0], b = x[1] - x[0] * x[0];
      return a * a + 100 * b * b;
    };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      double b = x[1] - x[0] * x[0];
      g->push_back({0, -2 * (1 - x[0]) - 400 * x[0] * b});
      g->push_back({1, 200 * b});
    };
    p.objective.hessian = [](const Vec& x, std::vector<Eigen::Triplet<double>>* h) {
      h->push_back({0, 0, 2 - 400 * (x[1] - 3 * x[0] * x[0])});
      h->push_back({0, 1, -400 * x[0]});
      h->push_back({1, 0, -400 * x[0]});
      h->push_back({1, 1, 200.0});
    };
    set.push_back({"rosenbrock", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(2, -2), Vec::Constant(2, 2)});
  }
  {  // 4: linear objective on the unit circle
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -2, 2);
    p.objective.value = [](const Vec& x) { return x[0] + x[1]; };
    p.objective.gradient = [](const Vec&, SparseGrad* g) {
      g->push_back({0, 1.0});
      g->push_back({1, 1.0});
    };
    p.objective.hessian = nullptr;
    p.rows.push_back(eq_row(
        [](const Vec& x) { return x.squaredNorm() - 1; },
        [](const Vec& x, SparseGrad* g) {
          g->push_back({0, 2 * x[0]});
          g->push_back({1, 2 * x[1]});
        },
        [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
          h->push_back({0, 0, 2.0});
          h->push_back({1, 1, 2.0});
        }));
    set.push_back({"circle-linear", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(2, -1.5), Vec::Constant(2, 1.5)});
  }
  {  // 5: HS6-style parabola tracking
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -5, 5);
    p.objective.value = [](const Vec& x) { return (1 - x[0]) * (1 - x[0]); };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      g->push_back({0, -2 * (1 - x[0])});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      h->push_back({0, 0, 2.0});
    };
    p.rows.push_back(eq_row(
        [](const Vec& x) { return 10 * (x[1] - x[0] * x[0]); },
        [](const Vec& x, SparseGrad* g) {
          g->push_back({0, -20 * x[0]});
          g->push_back({1, 10.0});
        },
        [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
          h->push_back({0, 0, -20.0});
        }));
    set.push_back({"parabola-tracking", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(2, -2), Vec::Constant(2, 2)});
  }
  {  // 6: HS7-style log objective on a quartic shell
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -4, 4);
    p.objective.value = [](const Vec& x) { return std::log(1 + x[0] * x[0]) - x[1]; };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      g->push_back({0, 2 * x[0] / (1 + x[0] * x[0])});
      g->push_back({1, -1.0});
    };
    p.objective.hessian = [](const Vec& x, std::vector<Eigen::Triplet<double>>* h) {
      double d = 1 + x[0] * x[0];
      h->push_back({0, 0, 2 * (1 - x[0] * x[0]) / (d * d)});
    };
    p.rows.push_back(eq_row(
        [](const Vec& x) {
          double d = 1 + x[0] * x[0];
          return d * d + x[1] * x[1] - 4;
        },
        [](const Vec& x, SparseGrad* g) {
          double d = 1 + x[0] * x[0];
          g->push_back({0, 4 * d * x[0]});
          g->push_back({1, 2 * x[1]});
        },
        [](const Vec& x, std::vector<Eigen::Triplet<double>>* h) {
          h->push_back({0, 0, 4.0 + 12.0 * x[0] * x[0]});
          h->push_back({1, 1, 2.0});
        }));
    set.push_back({"log-shell", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(2, -1.5), Vec::Constant(2, 1.8)});
  }
  {  // 7: HS8-style pure feasibility
    ConstrainedProblem p;
    p.n = 2;
    std::tie(p.lower, p.upper) = box(2, -10, 10);
    p.objective.value = [](const Vec&) { return -1.0; };
    p.objective.gradient = [](const Vec&, SparseGrad*) {};
    p.objective.hessian = nullptr;
    p.rows.push_back(eq_row(
        [](const Vec& x) { return x.squaredNorm() - 25; },
        [](const Vec& x, SparseGrad* g) {
          g->push_back({0, 2 * x[0]});
          g->push_back({1, 2 * x[1]});
        },
        [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
          h->push_back({0, 0, 2.0});
          h->push_back({1, 1, 2.0});
        }));
    p.rows.push_back(eq_row(
        [](const Vec& x) { return x[0] * x[1] - 9; },
        [](const Vec& x, SparseGrad* g) {
          g->push_back({0, x[1]});
          g->push_back({1, x[0]});
        },
        [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
          h->push_back({0, 1, 1.0});
          h->push_back({1, 0, 1.0});
        }));
    set.push_back({"circle-hyperbola", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(2, 1.0), Vec::Constant(2, 5.0)});
  }
  {  // 8: distance to a point on an affine set
    ConstrainedProblem p;
    p.n = 3;
    std::tie(p.lower, p.upper) = box(3, -10, 10);
    p.objective.value = [](const Vec& x) {
      return (x[0] + 1) * (x[0] + 1) + (x[1] - 2) * (x[1] - 2) + (x[2] - 1) * (x[2] - 1);
    };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      g->push_back({0, 2 * (x[0] + 1)});
      g->push_back({1, 2 * (x[1] - 2)});
      g->push_back({2, 2 * (x[2] - 1)});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      for (int i = 0; i < 3; ++i) h->push_back({i, i, 2.0});
    };
    p.rows.push_back(eq_row([](const Vec& x) { return x[0] + x[1] + x[2] - 1; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({0, 1.0});
                              g->push_back({1, 1.0});
                              g->push_back({2, 1.0});
                            }));
    p.rows.push_back(eq_row([](const Vec& x) { return x[0] - x[1]; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({0, 1.0});
                              g->push_back({1, -1.0});
                            }));
    set.push_back({"affine-projection", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(3, -5), Vec::Constant(3, 5)});
  }
  {  // 9: HS51-style quadratic with a 3-row linear network
    ConstrainedProblem p;
    p.n = 5;
    std::tie(p.lower, p.upper) = box(5, -10, 10);
    p.objective.value = [](const Vec& x) {
      double a = x[0] - x[1], b = x[1] + x[2] - 2, c = x[3] - 1, d = x[4] - 1;
      return a * a + b * b + c * c + d * d;
    };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      double a = x[0] - x[1], b = x[1] + x[2] - 2;
      g->push_back({0, 2 * a});
      g->push_back({1, -2 * a + 2 * b});
      g->push_back({2, 2 * b});
      g->push_back({3, 2 * (x[3] - 1)});
      g->push_back({4, 2 * (x[4] - 1)});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      h->push_back({0, 0, 2.0});
      h->push_back({0, 1, -2.0});
      h->push_back({1, 0, -2.0});
      h->push_back({1, 1, 4.0});
      h->push_back({1, 2, 2.0});
      h->push_back({2, 1, 2.0});
      h->push_back({2, 2, 2.0});
      h->push_back({3, 3, 2.0});
      h->push_back({4, 4, 2.0});
    };
    p.rows.push_back(eq_row([](const Vec& x) { return x[0] + 3 * x[1] - 4; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({0, 1.0});
                              g->push_back({1, 3.0});
                            }));
    p.rows.push_back(eq_row([](const Vec& x) { return x[2] + x[3] - 2 * x[4]; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({2, 1.0});
                              g->push_back({3, 1.0});
                              g->push_back({4, -2.0});
                            }));
    p.rows.push_back(eq_row([](const Vec& x) { return x[1] - x[4]; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({1, 1.0});
                              g->push_back({4, -1.0});
                            }));
    set.push_back({"quadratic-network", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(5, -3), Vec::Constant(5, 3)});
  }
  {  // 10: random-looking fixed convex QP with two equalities
    ConstrainedProblem p;
    p.n = 4;
    std::tie(p.lower, p.upper) = box(4, -8, 8);
    static const double q[4] = {2.0, 3.0, 1.5, 2.5};
    static const double c[4] = {-1.0, 0.5, 2.0, -0.7};
    p.objective.value = [](const Vec& x) {
      double s = 0;
      for (int i = 0; i < 4; ++i) s += 0.5 * q[i] * x[i] * x[i] + c[i] * x[i];
      return s;
    };
    p.objective.gradient = [](const Vec& x, SparseGrad* g) {
      for (int i = 0; i < 4; ++i) g->push_back({i, q[i] * x[i] + c[i]});
    };
    p.objective.hessian = [](const Vec&, std::vector<Eigen::Triplet<double>>* h) {
      for (int i = 0; i < 4; ++i) h->push_back({i, i, q[i]});
    };
    p.rows.push_back(eq_row([](const Vec& x) { return x[0] + 2 * x[1] - x[2] - 0.5; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({0, 1.0});
                              g->push_back({1, 2.0});
                              g->push_back({2, -1.0});
                            }));
    p.rows.push_back(eq_row([](const Vec& x) { return x[1] + x[3] - 1.0; },
                            [](const Vec&, SparseGrad* g) {
                              g->push_back({1, 1.0});
                              g->push_back({3, 1.0});
                            }));
    set.push_back({"convex-qp", dsched::tra::to_equality_form(std::move(p)),
                   Vec::Constant(4, -4), Vec::Constant(4, 4)});
  }
  return set;
}

}  // namespace bench
