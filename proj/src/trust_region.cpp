#include "dsched/trust_region.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>

namespace dsched::tra {

// ---------------------------------------------------------------------------
// EqualityFormProblem
// ---------------------------------------------------------------------------

EqualityFormProblem::EqualityFormProblem(ConstrainedProblem p) : p_(std::move(p)) {
  if (p_.lower.size() != p_.n || p_.upper.size() != p_.n)
    throw InvalidInput("to_equality_form: bound dimensions inconsistent");

  std::vector<double> extra_lo, extra_hi;
  int next_var = p_.n;
  int next_row = 0;
  auto new_var = [&](double lo, double hi) {
    extra_lo.push_back(lo);
    extra_hi.push_back(hi);
    return next_var++;
  };

  for (const auto& row : p_.rows) {
    RowLayout lay;
    bool soft = row.soft_weight > 0;
    if (row.lo == row.hi && std::isfinite(row.lo)) {
      // already an equality
      lay.g_upper = next_row++;
      layout_.push_back(lay);
      continue;
    }
    if (std::isfinite(row.hi)) {
      if (soft) {
        lay.soft_upper = new_var(0.0, kInf);
        penalty_vars_.push_back(lay.soft_upper);
        penalty_weights_.push_back(row.soft_weight);
      }
      lay.slack_upper = new_var(0.0, kInf);
      lay.g_upper = next_row++;
    }
    if (std::isfinite(row.lo)) {
      if (soft) {
        lay.soft_lower = new_var(0.0, kInf);
        penalty_vars_.push_back(lay.soft_lower);
        penalty_weights_.push_back(row.soft_weight);
      }
      lay.slack_lower = new_var(0.0, kInf);
      lay.g_lower = next_row++;
    }
    layout_.push_back(lay);
  }

  n_total_ = next_var;
  m_ = next_row;
  lower_.resize(n_total_);
  upper_.resize(n_total_);
  lower_.head(p_.n) = p_.lower;
  upper_.head(p_.n) = p_.upper;
  for (int i = p_.n; i < n_total_; ++i) {
    lower_[i] = extra_lo[i - p_.n];
    upper_[i] = extra_hi[i - p_.n];
  }
}

Evaluation EqualityFormProblem::evaluate(const Vec& x) {
  Vec xo = x.head(p_.n);
  if (p_.prepare) p_.prepare(xo);
  Evaluation ev;
  if (p_.evaluation_valid && !p_.evaluation_valid()) {
    ev.valid = false;
    ev.f = kInf;
    ev.g = Vec::Zero(m_);
    return ev;
  }
  ev.f = p_.objective.value(xo);
  for (std::size_t i = 0; i < penalty_vars_.size(); ++i)
    ev.f += penalty_weights_[i] * x[penalty_vars_[i]];
  ev.g = Vec::Zero(m_);
  for (std::size_t r = 0; r < p_.rows.size(); ++r) {
    const auto& row = p_.rows[r];
    const auto& lay = layout_[r];
    double v = row.value(xo);
    if (lay.g_upper >= 0 && lay.slack_upper < 0) {
      ev.g[lay.g_upper] = v - row.lo;  // plain equality row
      continue;
    }
    if (lay.g_upper >= 0) {
      double e = v + x[lay.slack_upper] - row.hi;
      if (lay.soft_upper >= 0) e -= x[lay.soft_upper];
      ev.g[lay.g_upper] = e;
    }
    if (lay.g_lower >= 0) {
      double e = v - x[lay.slack_lower] - row.lo;
      if (lay.soft_lower >= 0) e += x[lay.soft_lower];
      ev.g[lay.g_lower] = e;
    }
  }
  return ev;
}

Linearization EqualityFormProblem::linearize(const Vec& x) {
  Linearization lin;
  lin.at = evaluate(x);
  Vec xo = x.head(p_.n);

  lin.grad = Vec::Zero(n_total_);
  SparseGrad sg;
  p_.objective.gradient(xo, &sg);
  for (auto& [i, v] : sg) lin.grad[i] += v;
  for (std::size_t i = 0; i < penalty_vars_.size(); ++i)
    lin.grad[penalty_vars_[i]] += penalty_weights_[i];

  std::vector<Eigen::Triplet<double>> ht;
  if (p_.objective.hessian) p_.objective.hessian(xo, &ht);
  // Lagrangian curvature from rows that provide second derivatives
  for (std::size_t r = 0; r < p_.rows.size(); ++r) {
    const auto& row = p_.rows[r];
    if (!row.hessian) continue;
    const auto& lay = layout_[r];
    double lam = 0.0;
    if (lambda_hint_.size() == m_) {
      if (lay.g_upper >= 0) lam += lambda_hint_[lay.g_upper];
      if (lay.g_lower >= 0) lam += lambda_hint_[lay.g_lower];
    }
    if (lam == 0.0) continue;
    std::vector<Eigen::Triplet<double>> rh;
    row.hessian(xo, &rh);
    for (auto& t : rh) ht.emplace_back(t.row(), t.col(), lam * t.value());
  }
  lin.hess.resize(n_total_, n_total_);
  lin.hess.setFromTriplets(ht.begin(), ht.end());

  std::vector<Eigen::Triplet<double>> jt;
  for (std::size_t r = 0; r < p_.rows.size(); ++r) {
    const auto& row = p_.rows[r];
    const auto& lay = layout_[r];
    sg.clear();
    row.gradient(xo, &sg);
    auto spread = [&](int g_row) {
      for (auto& [i, v] : sg) jt.emplace_back(g_row, i, v);
    };
    if (lay.g_upper >= 0 && lay.slack_upper < 0) {  // equality row
      spread(lay.g_upper);
      continue;
    }
    if (lay.g_upper >= 0) {
      spread(lay.g_upper);
      jt.emplace_back(lay.g_upper, lay.slack_upper, 1.0);
      if (lay.soft_upper >= 0) jt.emplace_back(lay.g_upper, lay.soft_upper, -1.0);
    }
    if (lay.g_lower >= 0) {
      spread(lay.g_lower);
      jt.emplace_back(lay.g_lower, lay.slack_lower, -1.0);
      if (lay.soft_lower >= 0) jt.emplace_back(lay.g_lower, lay.soft_lower, 1.0);
    }
  }
  lin.jac.resize(m_, n_total_);
  lin.jac.setFromTriplets(jt.begin(), jt.end());
  return lin;
}

double EqualityFormProblem::max_penalty(const Vec& x) const {
  double m = 0;
  for (int idx : penalty_vars_) m = std::max(m, x[idx]);
  return m;
}

std::unique_ptr<EqualityFormProblem> to_equality_form(ConstrainedProblem p) {
  return std::make_unique<EqualityFormProblem>(std::move(p));
}

// ---------------------------------------------------------------------------
// steps
// ---------------------------------------------------------------------------

namespace {

opt::QpSpec step_bounds(const Vec& x, const Vec& lower, const Vec& upper) {
  opt::QpSpec spec;
  spec.lower = lower - x;
  spec.upper = upper - x;
  // guard tiny negative widths from projections
  for (int i = 0; i < spec.lower.size(); ++i) {
    if (spec.upper[i] < spec.lower[i]) spec.upper[i] = spec.lower[i];
    spec.lower[i] = std::min(spec.lower[i], 0.0);
    spec.upper[i] = std::max(spec.upper[i], 0.0);
  }
  return spec;
}

}  // namespace

Vec vertical_step(const Linearization& lin, const Vec& x, const Vec& lower,
                  const Vec& upper, double radius, Vec* residual) {
  const int n = static_cast<int>(x.size());
  opt::QpSpec spec = step_bounds(x, lower, upper);
  SpMat jt = SpMat(lin.jac.transpose());
  spec.h = SpMat((2.0 * (jt * lin.jac)).pruned());
  spec.c = 2.0 * (jt * lin.at.g);
  spec.a_eq = SpMat(0, n);
  spec.b_eq = Vec(0);
  spec.radius = radius;
  auto res = opt::solve_qp(spec);
  Vec d = (res.status == opt::SolveStatus::kOptimal) ? res.x : Vec(Vec::Zero(n));
  if (residual) *residual = lin.at.g + lin.jac * d;
  return d;
}

Vec horizontal_step(const Linearization& lin, const Vec& x, const Vec& lower,
                    const Vec& upper, double radius, const Vec& d_vertical) {
  opt::QpSpec spec = step_bounds(x, lower, upper);
  spec.h = lin.hess;
  spec.c = lin.grad;
  spec.a_eq = lin.jac;
  spec.b_eq = lin.jac * d_vertical;
  spec.radius = radius;
  auto res = opt::solve_qp(spec);
  if (res.status != opt::SolveStatus::kOptimal) return d_vertical;
  return res.x;
}

double merit(double f, const Vec& g, double zeta) { return f + zeta * g.norm(); }

namespace {

Vec multipliers_from(const SpMat& jac, const Vec& grad) {
  const int m = static_cast<int>(jac.rows());
  if (m == 0) return Vec();
  SpMat jjt = SpMat((jac * SpMat(jac.transpose())).pruned());
  SpMat eye(m, m);
  eye.setIdentity();
  jjt = SpMat(jjt + 1e-12 * eye);
  Eigen::SimplicialLDLT<SpMat> ldlt(jjt);
  if (ldlt.info() != Eigen::Success)
    throw NumericalError("estimate_multipliers: normal equations factorization failed");
  return ldlt.solve(-(jac * grad));
}

}  // namespace

Vec estimate_multipliers(const Linearization& lin) {
  return multipliers_from(lin.jac, lin.grad);
}

Vec estimate_multipliers(const Linearization& lin, const Vec& x, const Vec& lower,
                         const Vec& upper, double activity_tol) {
  const int n = static_cast<int>(x.size());
  std::vector<char> free_var(n, 1);
  bool any_active = false;
  for (int i = 0; i < n; ++i) {
    double span = std::max(1.0, std::abs(x[i]));
    if (x[i] - lower[i] <= activity_tol * span || upper[i] - x[i] <= activity_tol * span) {
      free_var[i] = 0;
      any_active = true;
    }
  }
  if (!any_active) return multipliers_from(lin.jac, lin.grad);
  // zero out active columns; their rows of the stationarity system belong to
  // the bound multipliers
  std::vector<Eigen::Triplet<double>> jt;
  for (int k = 0; k < lin.jac.outerSize(); ++k)
    for (SpMat::InnerIterator it(lin.jac, k); it; ++it)
      if (free_var[it.col()])
        jt.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                        it.value());
  SpMat jf(lin.jac.rows(), n);
  jf.setFromTriplets(jt.begin(), jt.end());
  Vec gf = lin.grad;
  for (int i = 0; i < n; ++i)
    if (!free_var[i]) gf[i] = 0.0;
  return multipliers_from(jf, gf);
}

// ---------------------------------------------------------------------------
// main iteration
// ---------------------------------------------------------------------------

NlpResult solve_nlp(NlpFunctions& problem, const Vec& x0, const TrustRegionOptions& opts,
                    const Vec* lower_override, const Vec* upper_override) {
  const Vec& lower = lower_override ? *lower_override : problem.lower();
  const Vec& upper = upper_override ? *upper_override : problem.upper();
  const int n = problem.num_vars();
  if (x0.size() != n) throw InvalidInput("solve_nlp: start point dimension mismatch");

  Vec x = x0.cwiseMax(lower).cwiseMin(upper);
  Linearization lin = problem.linearize(x);
  if (!lin.at.valid)
    throw NumericalError("solve_nlp: model evaluation failed at the start point");

  NlpResult out;
  double alpha = opts.alpha0;
  double zeta = opts.zeta_init;

  auto stationarity = [&](const Vec& lambda) {
    Vec grad_l = lin.grad;
    if (lambda.size()) grad_l += SpMat(lin.jac.transpose()) * lambda;
    Vec proj = (x - grad_l).cwiseMax(lower).cwiseMin(upper);
    return (proj - x).norm();
  };

  for (int w = 1; w <= opts.max_iterations; ++w) {
    out.iterations = w;
    Vec lambda = estimate_multipliers(lin, x, lower, upper);
    if (lambda.size()) zeta = std::max(zeta, opts.zeta_safety * lambda.cwiseAbs().maxCoeff());

    out.stationarity = stationarity(lambda);
    out.feasibility = lin.at.g.norm();
    if (out.stationarity < opts.eps1 && out.feasibility < opts.eps2) {
      out.status = NlpStatus::kConverged;
      out.multipliers = lambda;
      break;
    }

    Vec d_v = vertical_step(lin, x, lower, upper, opts.xi_vertical * alpha);
    Vec d = horizontal_step(lin, x, lower, upper, alpha, d_v);

    double pred_f = -(lin.grad.dot(d) + 0.5 * d.dot(lin.hess * d));
    double pred_c = lin.at.g.norm() - (lin.at.g + lin.jac * d).norm();
    double pred = pred_f + zeta * pred_c;

    IterationRecord rec;
    rec.w = w;
    rec.alpha = alpha;
    rec.g_norm = lin.at.g.norm();
    rec.f = lin.at.f;
    rec.merit_before = merit(lin.at.f, lin.at.g, zeta);

    bool accepted = false;
    double psi = -kInf;
    if (pred > 0 && d.norm() > 0) {
      Evaluation trial = problem.evaluate(x + d);
      if (trial.valid) {
        double ared = rec.merit_before - merit(trial.f, trial.g, zeta);
        psi = ared / pred;
        if (psi >= opts.accept_ratio) {
          accepted = true;
          x += d;
          problem.set_multiplier_hint(lambda);
          lin = problem.linearize(x);  // re-anchor: all models rebuilt here
          rec.merit_after = merit(lin.at.f, lin.at.g, zeta);
        }
      }
    }
    rec.psi = psi;
    rec.accepted = accepted;
    out.trace.push_back(rec);

    if (accepted) {
      if (psi > opts.expand_ratio && d.norm() >= 0.8 * alpha)
        alpha = std::min(2.0 * alpha, opts.alpha_max);
      else if (psi < opts.shrink_ratio)
        alpha = std::max(0.5 * alpha, opts.alpha_min);
    } else {
      double scale = std::min(alpha, d.norm() > 0 ? d.norm() : alpha);
      alpha = std::max(0.5 * scale, opts.alpha_min);
    }
  }

  if (out.multipliers.size() == 0) out.multipliers = estimate_multipliers(lin);
  out.x = x;
  out.f = lin.at.f;
  out.g = lin.at.g;
  return out;
}

}  // namespace dsched::tra
