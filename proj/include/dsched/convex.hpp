#pragma once

#include <optional>
#include <vector>

#include "dsched/common.hpp"

namespace dsched::opt {

enum class SolveStatus {
  kOptimal,
  kInfeasible,
  kUnbounded,
  kMaxIterations,
  kNumericalFailure,
};

const char* to_string(SolveStatus s);

/// Convex quadratic program
///   min 1/2 x'Hx + c'x   s.t.  A x = b,  lower <= x <= upper,  ||x||2 <= radius
/// H is symmetrized on ingest and clamped to PSD when indefinite (flagged in
/// the result). The Euclidean radius is optional (infinity disables it) and is
/// enforced through a scalar dual on H + mu*I, found by a secular iteration.
struct QpSpec {
  SpMat h;          // n x n, may be empty (LP)
  Vec c;            // n
  SpMat a_eq;       // m x n, may have m = 0
  Vec b_eq;         // m
  Vec lower, upper; // n, +-inf where absent
  double radius = kInf;
};

struct QpResult {
  Vec x;
  Vec multipliers;      // equality duals, size m
  Vec bound_dual_lower; // z >= 0
  Vec bound_dual_upper; // w >= 0
  SolveStatus status = SolveStatus::kNumericalFailure;
  double objective = 0.0;
  double kkt_residual = 0.0;
  double complementarity = 0.0;
  /// Farkas-style certificate residual ||A'y + z - w|| / ||(y,z,w)|| for
  /// infeasible problems; 0 otherwise.
  double infeasibility_certificate = 0.0;
  double trust_region_dual = 0.0; // mu on the radius constraint
  bool hessian_clamped = false;
  int iterations = 0;
};

struct IpmOptions {
  int max_iterations = 100;
  double feas_tol = 1e-9;
  double opt_tol = 1e-9;
  double comp_tol = 1e-9;
  double radius_tol = 1e-4; // relative accuracy of ||x|| = radius
};

QpResult solve_qp(const QpSpec& spec, const IpmOptions& opts = {});

struct LpResult {
  Vec x;
  Vec multipliers;
  SolveStatus status;
  double objective;
  double complementarity;
  double infeasibility_certificate;
  int iterations;
};

/// Dense/sparse LP: min c'x s.t. A x = b, lower <= x <= upper.
LpResult solve_lp(const Vec& c, const SpMat& a_eq, const Vec& b_eq,
                  const Vec& lower, const Vec& upper,
                  const IpmOptions& opts = {});

}  // namespace dsched::opt
