#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dsched/common.hpp"
#include "dsched/convex.hpp"

namespace dsched::tra {

using SparseGrad = std::vector<std::pair<int, double>>;

struct Evaluation {
  double f = 0;
  Vec g;
  bool valid = true;  // false when the underlying model could not be evaluated
};

struct Linearization {
  Vec grad;   // objective gradient at the anchor
  SpMat hess; // quadratic model term
  SpMat jac;  // constraint Jacobian
  Evaluation at;
};

/// Equality-constrained smooth problem with simple bounds:
///   min f(x)  s.t.  g(x) = 0,  lower <= x <= upper.
/// True values come from evaluate(); models are rebuilt by linearize() at
/// every accepted anchor.
class NlpFunctions {
 public:
  virtual ~NlpFunctions() = default;
  virtual int num_vars() const = 0;
  virtual int num_constraints() const = 0;
  virtual const Vec& lower() const = 0;
  virtual const Vec& upper() const = 0;
  virtual Evaluation evaluate(const Vec& x) = 0;
  virtual Linearization linearize(const Vec& x) = 0;
  /// multipliers from the previous iteration; implementations may fold them
  /// into the model Hessian (Lagrangian curvature)
  virtual void set_multiplier_hint(const Vec&) {}
};

// ---------------------------------------------------------------------------
// equality-form conversion
// ---------------------------------------------------------------------------

struct SmoothObjective {
  std::function<double(const Vec&)> value;
  std::function<void(const Vec&, SparseGrad*)> gradient;
  std::function<void(const Vec&, std::vector<Eigen::Triplet<double>>*)> hessian;
};

/// One- or two-sided smooth constraint lo <= expr(x) <= hi. A positive
/// soft_weight turns each finite side into a penalized soft constraint with
/// its own violation variable.
struct ConstraintRow {
  std::function<double(const Vec&)> value;
  std::function<void(const Vec&, SparseGrad*)> gradient;
  /// optional curvature of expr; enters the model weighted by the row
  /// multiplier estimate
  std::function<void(const Vec&, std::vector<Eigen::Triplet<double>>*)> hessian;
  double lo = -kInf, hi = kInf;
  double soft_weight = 0;
};

struct ConstrainedProblem {
  int n = 0;
  SmoothObjective objective;
  std::vector<ConstraintRow> rows;
  Vec lower, upper;
  /// called once per trial point before any row/objective callback
  std::function<void(const Vec&)> prepare;
  /// marks evaluations that must be rejected (e.g. diverged physics)
  std::function<bool()> evaluation_valid;
};

/// Indices describing where a converted row landed.
struct RowLayout {
  int g_upper = -1, g_lower = -1;   // emitted equality rows
  int slack_upper = -1, slack_lower = -1;
  int soft_upper = -1, soft_lower = -1;  // penalty variables
};

class EqualityFormProblem : public NlpFunctions {
 public:
  explicit EqualityFormProblem(ConstrainedProblem p);

  int num_vars() const override { return n_total_; }
  int num_constraints() const override { return m_; }
  const Vec& lower() const override { return lower_; }
  const Vec& upper() const override { return upper_; }
  Evaluation evaluate(const Vec& x) override;
  Linearization linearize(const Vec& x) override;
  void set_multiplier_hint(const Vec& lambda) override { lambda_hint_ = lambda; }

  int n_original() const { return p_.n; }
  const std::vector<RowLayout>& layout() const { return layout_; }
  /// largest soft-violation variable in x (0 when there are none)
  double max_penalty(const Vec& x) const;

 private:
  ConstrainedProblem p_;
  int n_total_ = 0, m_ = 0;
  Vec lower_, upper_;
  std::vector<RowLayout> layout_;
  std::vector<int> penalty_vars_;
  std::vector<double> penalty_weights_;
  Vec lambda_hint_;
};

/// Converts inequality rows to equalities with nonnegative slack variables
/// (one per finite side); soft sides additionally get penalty variables that
/// enter the objective with their weight.
std::unique_ptr<EqualityFormProblem> to_equality_form(ConstrainedProblem p);

// ---------------------------------------------------------------------------
// trust-region machinery
// ---------------------------------------------------------------------------

struct TrustRegionOptions {
  double alpha0 = 0.1;
  double alpha_min = 1e-8, alpha_max = 10.0;
  double xi_vertical = 0.8;   // vertical fraction of the radius
  double eps1 = 1e-6, eps2 = 1e-6;
  double accept_ratio = 0.1, shrink_ratio = 0.25, expand_ratio = 0.75;
  double zeta_init = 1.0, zeta_safety = 1.1;
  int max_iterations = 60;
};

/// Feasibility-restoring step: minimizes ||g + J d||2 within the shrunk
/// radius and the variable bounds. Never fails on inconsistent constraints.
Vec vertical_step(const Linearization& lin, const Vec& x, const Vec& lower,
                  const Vec& upper, double radius, Vec* residual = nullptr);

/// Objective step preserving the linearized feasibility gain: minimizes the
/// quadratic model under J d = J d_v, the bounds and the full radius.
Vec horizontal_step(const Linearization& lin, const Vec& x, const Vec& lower,
                    const Vec& upper, double radius, const Vec& d_vertical);

/// phi = f + zeta ||g||2
double merit(double f, const Vec& g, double zeta);

/// Least-squares multipliers: argmin ||grad + J' lambda|| with a 1e-12 ridge.
/// The bounded overload drops coordinates sitting on an active bound, whose
/// stationarity is owned by the bound multiplier.
Vec estimate_multipliers(const Linearization& lin);
Vec estimate_multipliers(const Linearization& lin, const Vec& x, const Vec& lower,
                         const Vec& upper, double activity_tol = 1e-9);

enum class NlpStatus { kConverged, kMaxIterations };

struct IterationRecord {
  int w = 0;
  double alpha = 0, psi = 0, g_norm = 0, f = 0;
  double merit_before = 0, merit_after = 0;
  bool accepted = false;
};

struct NlpResult {
  Vec x;
  double f = 0;
  Vec g;
  Vec multipliers;
  NlpStatus status = NlpStatus::kMaxIterations;
  int iterations = 0;
  double stationarity = kInf, feasibility = kInf;
  std::vector<IterationRecord> trace;
};

/// Byrd-Omojokun trust-region iteration with merit-based acceptance and the
/// two stopping criteria (projected stationarity and constraint norm).
/// Bounds may be overridden per call (branch-and-cut node patches).
NlpResult solve_nlp(NlpFunctions& problem, const Vec& x0,
                    const TrustRegionOptions& opts = {},
                    const Vec* lower_override = nullptr,
                    const Vec* upper_override = nullptr);

}  // namespace dsched::tra
