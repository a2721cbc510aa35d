#include "dsched/convex.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <vector>

namespace dsched::opt {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::kOptimal: return "optimal";
    case SolveStatus::kInfeasible: return "infeasible";
    case SolveStatus::kUnbounded: return "unbounded";
    case SolveStatus::kMaxIterations: return "max-iterations";
    case SolveStatus::kNumericalFailure: return "numerical-failure";
  }
  return "unknown";
}

namespace {

constexpr double kPrimalReg = 1e-10;
constexpr double kDualReg = 1e-10;
constexpr double kTiny = 1e-300;

// Symmetrize; clamp eigenvalues at 1e-10 when the matrix is indefinite.
// A sparse LLT probe keeps the common PSD case cheap; the dense eigenvalue
// path only runs for genuinely indefinite model Hessians, which stay small.
SpMat prepare_hessian(const SpMat& h_in, int n, bool* clamped) {
  *clamped = false;
  if (h_in.nonZeros() == 0) return SpMat(n, n);
  SpMat h = SpMat(0.5 * (h_in + SpMat(h_in.transpose())));
  SpMat eye(n, n);
  eye.setIdentity();
  double scale = 1.0;
  for (int k = 0; k < h.outerSize(); ++k)
    for (SpMat::InnerIterator it(h, k); it; ++it)
      scale = std::max(scale, std::abs(it.value()));
  Eigen::SimplicialLLT<SpMat> llt(SpMat(h + (1e-12 * scale) * eye));
  if (llt.info() == Eigen::Success) return h;
  *clamped = true;
  if (n <= 2000) {
    Mat hd(h);
    Eigen::SelfAdjointEigenSolver<Mat> es(hd);
    Vec ev = es.eigenvalues().cwiseMax(1e-10);
    Mat fixed = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return fixed.sparseView(scale, 1e-16);
  }
  // large indefinite fallback: Gershgorin shift
  Vec off = Vec::Zero(n), diag = Vec::Zero(n);
  for (int k = 0; k < h.outerSize(); ++k)
    for (SpMat::InnerIterator it(h, k); it; ++it) {
      if (it.row() == it.col()) diag[it.row()] = it.value();
      else off[it.row()] += std::abs(it.value());
    }
  double shift = 0.0;
  for (int i = 0; i < n; ++i) shift = std::max(shift, off[i] - diag[i]);
  return SpMat(h + (shift + 1e-10) * eye);
}

struct IpmWork {
  int n = 0, m = 0;
  SpMat h;
  Vec c;
  SpMat a;
  Vec b;
  Vec lo, hi;
};

struct IpmOut {
  Vec x, y, z, w;
  SolveStatus status = SolveStatus::kNumericalFailure;
  double mu = 0.0;
  double primal_res = 0.0;
  double dual_res = 0.0;
  double certificate = 0.0;
  int iterations = 0;
};

// Mehrotra predictor-corrector for
//   min 1/2 x'Hx + c'x  s.t. Ax = b, lo <= x <= hi.
// Newton systems use the regularized augmented form
//   [H + Sigma + dp*I, A'; A, -dd*I]
// which is quasi-definite, so the no-pivot sparse LDLT is safe under any
// fill-reducing ordering.
IpmOut run_ipm(const IpmWork& p, const IpmOptions& opts) {
  const int n = p.n, m = p.m;
  IpmOut out;
  out.x = Vec::Zero(n);
  out.y = Vec::Zero(m);
  out.z = Vec::Zero(n);
  out.w = Vec::Zero(n);

  std::vector<char> has_lo(n), has_hi(n);
  for (int i = 0; i < n; ++i) {
    has_lo[i] = std::isfinite(p.lo[i]);
    has_hi[i] = std::isfinite(p.hi[i]);
    if (has_lo[i] && has_hi[i] && p.lo[i] > p.hi[i] + 1e-12) {
      out.status = SolveStatus::kInfeasible;
      return out;
    }
  }

  Vec x(n);
  for (int i = 0; i < n; ++i) {
    if (has_lo[i] && has_hi[i]) x[i] = 0.5 * (p.lo[i] + p.hi[i]);
    else if (has_lo[i]) x[i] = p.lo[i] + 1.0;
    else if (has_hi[i]) x[i] = p.hi[i] - 1.0;
    else x[i] = 0.0;
  }
  Vec y = Vec::Zero(m);
  Vec z(n), w(n);
  for (int i = 0; i < n; ++i) {
    z[i] = has_lo[i] ? 1.0 : 0.0;
    w[i] = has_hi[i] ? 1.0 : 0.0;
  }

  const double bscale = 1.0 + std::max(m ? p.b.cwiseAbs().maxCoeff() : 0.0,
                                       n ? p.c.cwiseAbs().maxCoeff() : 0.0);
  int n_bounded = 0;
  for (int i = 0; i < n; ++i) n_bounded += has_lo[i] + has_hi[i];
  const double denom = std::max(1, n_bounded);

  SpMat at = SpMat(p.a.transpose());
  Eigen::SimplicialLDLT<SpMat> ldlt;
  bool analyzed = false;

  Vec pl(n), pu(n);
  auto refresh_slacks = [&]() {
    for (int i = 0; i < n; ++i) {
      pl[i] = has_lo[i] ? x[i] - p.lo[i] : 1.0;
      pu[i] = has_hi[i] ? p.hi[i] - x[i] : 1.0;
    }
  };

  double best_primal = kInf;
  int stall = 0;

  for (int it = 0; it < opts.max_iterations; ++it) {
    out.iterations = it + 1;
    refresh_slacks();

    Vec rd = p.h * x + p.c - at * y - z + w;
    Vec rp = p.a * x - p.b;
    double mu = 0.0;
    for (int i = 0; i < n; ++i) {
      if (has_lo[i]) mu += pl[i] * z[i];
      if (has_hi[i]) mu += pu[i] * w[i];
    }
    mu /= denom;

    double rpn = m ? rp.cwiseAbs().maxCoeff() : 0.0;
    double rdn = n ? rd.cwiseAbs().maxCoeff() : 0.0;
#ifdef DSCHED_IPM_TRACE
    fprintf(stderr, "[ipm] it=%d rpn=%.3e rdn=%.3e mu=%.3e |x|=%.3e |y|=%.3e\n", it,
            rpn, rdn, mu, x.norm(), m ? y.cwiseAbs().maxCoeff() : 0.0);
#endif
    out.mu = mu;
    out.primal_res = rpn;
    out.dual_res = rdn;

    if (rpn <= opts.feas_tol * bscale && rdn <= 10 * opts.opt_tol * bscale &&
        (n_bounded == 0 || mu <= opts.comp_tol * bscale)) {
      out.status = SolveStatus::kOptimal;
      out.x = x; out.y = y; out.z = z; out.w = w;
      return out;
    }

    if (x.cwiseAbs().maxCoeff() > 1e9 * bscale ||
        (n_bounded > 0 && p.c.dot(x) + 0.5 * x.dot(p.h * x) < -1e10 * bscale)) {
      out.status = SolveStatus::kUnbounded;
      out.x = x; out.y = y; out.z = z; out.w = w;
      return out;
    }
    if (rpn < best_primal * 0.999) { best_primal = rpn; stall = 0; }
    else ++stall;
    double dual_norm = std::max({m ? y.cwiseAbs().maxCoeff() : 0.0,
                                 n ? z.maxCoeff() : 0.0, n ? w.maxCoeff() : 0.0});
    bool divergent_duals = dual_norm > 1e10 && rpn > 10 * opts.feas_tol * bscale;
    bool not_finite = !x.allFinite() || (m && !y.allFinite());
    if (not_finite) {
      out.status = rpn > 1e3 * opts.feas_tol * bscale ? SolveStatus::kInfeasible
                                                      : SolveStatus::kNumericalFailure;
      return out;
    }
    if (divergent_duals ||
        (stall > 12 && rpn > 1e3 * opts.feas_tol * bscale &&
         mu < 1e-4 * (1.0 + best_primal))) {
      out.status = SolveStatus::kInfeasible;
      double ynorm = std::sqrt(y.squaredNorm() + z.squaredNorm() + w.squaredNorm());
      out.certificate = (at * y + z - w).norm() / std::max(ynorm, kTiny);
      out.x = x; out.y = y; out.z = z; out.w = w;
      return out;
    }

    Vec sigma = Vec::Constant(n, kPrimalReg);
    for (int i = 0; i < n; ++i) {
      if (has_lo[i]) sigma[i] += z[i] / std::max(pl[i], kTiny);
      if (has_hi[i]) sigma[i] += w[i] / std::max(pu[i], kTiny);
      if (!std::isfinite(sigma[i])) sigma[i] = 1e14;
      sigma[i] = std::min(sigma[i], 1e14);
    }

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(p.h.nonZeros() + 2 * p.a.nonZeros() + n + m));
    for (int k = 0; k < p.h.outerSize(); ++k)
      for (SpMat::InnerIterator itH(p.h, k); itH; ++itH)
        trips.emplace_back(static_cast<int>(itH.row()), static_cast<int>(itH.col()),
                           itH.value());
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, sigma[i]);
    for (int k = 0; k < p.a.outerSize(); ++k)
      for (SpMat::InnerIterator itA(p.a, k); itA; ++itA) {
        trips.emplace_back(n + static_cast<int>(itA.row()), static_cast<int>(itA.col()),
                           itA.value());
        trips.emplace_back(static_cast<int>(itA.col()), n + static_cast<int>(itA.row()),
                           itA.value());
      }
    for (int j = 0; j < m; ++j) trips.emplace_back(n + j, n + j, -kDualReg);
    SpMat kkt(n + m, n + m);
    kkt.setFromTriplets(trips.begin(), trips.end());

    if (!analyzed) { ldlt.analyzePattern(kkt); analyzed = true; }
    ldlt.factorize(kkt);
    if (ldlt.info() != Eigen::Success) {
      bool near_optimal = rpn <= 1e2 * opts.feas_tol * bscale &&
                          rdn <= 1e3 * opts.opt_tol * bscale && mu <= 1e-5 * bscale;
      out.status = near_optimal ? SolveStatus::kOptimal
                                : SolveStatus::kNumericalFailure;
      out.x = x; out.y = y; out.z = z; out.w = w;
      return out;
    }

    auto solve_kkt = [&](const Vec& rx, const Vec& ry, Vec& dx, Vec& dy) {
      Vec rhs(n + m);
      rhs.head(n) = rx;
      if (m) rhs.tail(m) = ry;
      Vec sol = ldlt.solve(rhs);
      Vec resid = rhs - kkt * sol;
      sol += ldlt.solve(resid);
      dx = sol.head(n);
      // system is solved for (dx, -dy)
      dy = m ? Vec(-sol.tail(m)) : Vec();
    };

    auto step_lengths = [&](const Vec& dx, const Vec& dz, const Vec& dw,
                            double* ap, double* ad) {
      double a_p = 1.0, a_d = 1.0;
      for (int i = 0; i < n; ++i) {
        if (has_lo[i] && dx[i] < 0) a_p = std::min(a_p, -pl[i] / dx[i]);
        if (has_hi[i] && dx[i] > 0) a_p = std::min(a_p, pu[i] / dx[i]);
        if (has_lo[i] && dz[i] < 0) a_d = std::min(a_d, -z[i] / dz[i]);
        if (has_hi[i] && dw[i] < 0) a_d = std::min(a_d, -w[i] / dw[i]);
      }
      *ap = a_p;
      *ad = a_d;
    };

    // predictor: complementarity target 0
    Vec rx = -rd, ry = -rp;
    for (int i = 0; i < n; ++i) {
      if (has_lo[i]) rx[i] -= z[i];
      if (has_hi[i]) rx[i] += w[i];
    }
    Vec dx_a, dy_a;
    solve_kkt(rx, ry, dx_a, dy_a);
    Vec dz_a = Vec::Zero(n), dw_a = Vec::Zero(n);
    for (int i = 0; i < n; ++i) {
      if (has_lo[i])
        dz_a[i] = (-pl[i] * z[i] - z[i] * dx_a[i]) / std::max(pl[i], kTiny);
      if (has_hi[i])
        dw_a[i] = (-pu[i] * w[i] + w[i] * dx_a[i]) / std::max(pu[i], kTiny);
    }
    double ap_a, ad_a;
    step_lengths(dx_a, dz_a, dw_a, &ap_a, &ad_a);
    double mu_aff = 0.0;
    for (int i = 0; i < n; ++i) {
      if (has_lo[i]) mu_aff += (pl[i] + ap_a * dx_a[i]) * (z[i] + ad_a * dz_a[i]);
      if (has_hi[i]) mu_aff += (pu[i] - ap_a * dx_a[i]) * (w[i] + ad_a * dw_a[i]);
    }
    mu_aff /= denom;
    double sig = (mu > 0 && n_bounded > 0) ? std::pow(mu_aff / mu, 3.0) : 0.0;
    sig = std::clamp(sig, 0.0, 1.0);

    // corrector: target sig*mu with second-order terms
    rx = -rd;
    ry = -rp;
    for (int i = 0; i < n; ++i) {
      if (has_lo[i])
        rx[i] += (sig * mu - pl[i] * z[i] - dx_a[i] * dz_a[i]) / std::max(pl[i], kTiny);
      if (has_hi[i])
        rx[i] -= (sig * mu - pu[i] * w[i] + dx_a[i] * dw_a[i]) / std::max(pu[i], kTiny);
    }
    Vec dx, dy;
    solve_kkt(rx, ry, dx, dy);
    Vec dz = Vec::Zero(n), dw = Vec::Zero(n);
    for (int i = 0; i < n; ++i) {
      if (has_lo[i])
        dz[i] = (sig * mu - pl[i] * z[i] - dx_a[i] * dz_a[i] - z[i] * dx[i]) /
                std::max(pl[i], kTiny);
      if (has_hi[i])
        dw[i] = (sig * mu - pu[i] * w[i] + dx_a[i] * dw_a[i] + w[i] * dx[i]) /
                std::max(pu[i], kTiny);
    }
    double ap, ad;
    step_lengths(dx, dz, dw, &ap, &ad);
    double frac = (it < 4) ? 0.9 : 0.995;
    ap = std::min(1.0, n_bounded ? frac * ap : 1.0);
    ad = std::min(1.0, n_bounded ? frac * ad : 1.0);

    x += ap * dx;
    if (m) y += ad * dy;
    for (int i = 0; i < n; ++i) {
      if (has_lo[i]) z[i] = std::max(z[i] + ad * dz[i], kTiny);
      if (has_hi[i]) w[i] = std::max(w[i] + ad * dw[i], kTiny);
    }
  }

  out.status = (out.primal_res > 1e3 * opts.feas_tol * bscale)
                   ? SolveStatus::kInfeasible
                   : SolveStatus::kMaxIterations;
  if (out.status == SolveStatus::kInfeasible) {
    double ynorm = std::sqrt(y.squaredNorm() + z.squaredNorm() + w.squaredNorm());
    out.certificate = (at * y + z - w).norm() / std::max(ynorm, kTiny);
  }
  out.x = x; out.y = y; out.z = z; out.w = w;
  return out;
}

double quad_objective(const SpMat& h, const Vec& c, const Vec& x) {
  if (h.nonZeros() == 0) return c.dot(x);
  return 0.5 * x.dot(h * x) + c.dot(x);
}

}  // namespace

QpResult solve_qp(const QpSpec& spec, const IpmOptions& opts) {
  const int n = static_cast<int>(spec.c.size());
  const int m = static_cast<int>(spec.b_eq.size());
  if (spec.lower.size() != n || spec.upper.size() != n)
    throw InvalidInput("solve_qp: bound dimensions inconsistent with c");
  if (spec.a_eq.rows() != m || (m > 0 && spec.a_eq.cols() != n))
    throw InvalidInput("solve_qp: equality system dimensions inconsistent");
  if (spec.h.size() != 0 && (spec.h.rows() != n || spec.h.cols() != n))
    throw InvalidInput("solve_qp: Hessian dimension inconsistent");
  if (!(spec.radius > 0))
    throw InvalidInput("solve_qp: trust-region radius must be positive");

  QpResult res;
  SpMat h_full = prepare_hessian(spec.h, n, &res.hessian_clamped);

  // eliminate variables pinned by equal bounds
  std::vector<char> fixed(n, 0);
  std::vector<int> keep;
  keep.reserve(n);
  int n_fixed = 0;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(spec.lower[i]) && std::isfinite(spec.upper[i]) &&
        std::abs(spec.upper[i] - spec.lower[i]) <= 1e-12 &&
        spec.upper[i] >= spec.lower[i] - 1e-12) {
      fixed[i] = 1;
      ++n_fixed;
    } else {
      keep.push_back(i);
    }
  }

  IpmWork work;
  Vec x_fix = Vec::Zero(n);
  double radius = spec.radius;
  if (n_fixed == 0) {
    work.n = n;
    work.m = m;
    work.h = h_full;
    work.c = spec.c;
    work.a = spec.a_eq;
    work.b = spec.b_eq;
    work.lo = spec.lower;
    work.hi = spec.upper;
  } else {
    const int nr = static_cast<int>(keep.size());
    for (int i = 0; i < n; ++i)
      if (fixed[i]) x_fix[i] = 0.5 * (spec.lower[i] + spec.upper[i]);
    std::vector<int> col_of(n, -1);
    for (int j = 0; j < nr; ++j) col_of[keep[j]] = j;
    std::vector<Eigen::Triplet<double>> ht, at;
    Vec c_red(nr);
    Vec hxf = h_full * x_fix;
    for (int j = 0; j < nr; ++j) c_red[j] = spec.c[keep[j]] + hxf[keep[j]];
    for (int k = 0; k < h_full.outerSize(); ++k)
      for (SpMat::InnerIterator it(h_full, k); it; ++it)
        if (!fixed[it.row()] && !fixed[it.col()])
          ht.emplace_back(col_of[it.row()], col_of[it.col()], it.value());
    Vec b_red = spec.b_eq - spec.a_eq * x_fix;
    for (int k = 0; k < spec.a_eq.outerSize(); ++k)
      for (SpMat::InnerIterator it(spec.a_eq, k); it; ++it)
        if (!fixed[it.col()])
          at.emplace_back(static_cast<int>(it.row()), col_of[it.col()], it.value());
    work.n = nr;
    work.m = m;
    work.h.resize(nr, nr);
    work.h.setFromTriplets(ht.begin(), ht.end());
    work.c = c_red;
    work.a.resize(m, nr);
    work.a.setFromTriplets(at.begin(), at.end());
    work.b = b_red;
    work.lo.resize(nr);
    work.hi.resize(nr);
    for (int j = 0; j < nr; ++j) {
      work.lo[j] = spec.lower[keep[j]];
      work.hi[j] = spec.upper[keep[j]];
    }
    if (std::isfinite(radius)) {
      double used = x_fix.squaredNorm();
      if (used >= radius * radius)
        radius = 1e-12;
      else
        radius = std::sqrt(radius * radius - used);
    }
  }

  auto expand = [&](const Vec& xr) {
    Vec full = x_fix;
    for (std::size_t j = 0; j < keep.size(); ++j) full[keep[j]] = xr[j];
    return full;
  };
  auto expand_duals = [&](const Vec& zr) {
    Vec full = Vec::Zero(n);
    for (std::size_t j = 0; j < keep.size(); ++j) full[keep[j]] = zr[j];
    return full;
  };

  auto finish = [&](const IpmOut& out, double mu_tr) {
    res.x = expand(out.x);
    res.multipliers = out.y;
    res.bound_dual_lower = expand_duals(out.z);
    res.bound_dual_upper = expand_duals(out.w);
    res.status = out.status;
    res.iterations += out.iterations;
    res.objective = quad_objective(h_full, spec.c, res.x);
    res.kkt_residual = std::max(out.primal_res, out.dual_res);
    res.complementarity = out.mu;
    res.infeasibility_certificate = out.certificate;
    res.trust_region_dual = mu_tr;
  };

  IpmOut out = run_ipm(work, opts);
  res.iterations = 0;
  bool needs_radius =
      std::isfinite(radius) &&
      (out.status == SolveStatus::kUnbounded ||
       (out.status == SolveStatus::kOptimal && out.x.norm() > radius * (1.0 + 1e-9)));
  if (!needs_radius) {
    finish(out, 0.0);
    return res;
  }
  if (out.status == SolveStatus::kUnbounded) out.x.setConstant(kInf);

  // Secular iteration on mu: x(mu) solves the QP with H + mu*I and
  // ||x(mu)||2 decreases monotonically; find ||x(mu)|| = radius.
  SpMat eye(work.n, work.n);
  eye.setIdentity();
  auto solve_mu = [&](double mu) {
    IpmWork wm = work;
    wm.h = SpMat(work.h + mu * eye);
    IpmOut o = run_ipm(wm, opts);
    res.iterations += o.iterations;
    return o;
  };

  double mu_lo = 0.0, norm_lo = out.x.norm();
  double mu_hi = std::max(1.0, work.c.norm() / radius);
  IpmOut hi_out = solve_mu(mu_hi);
  int guard = 0;
  while ((hi_out.status != SolveStatus::kOptimal || hi_out.x.norm() > radius) &&
         guard++ < 60) {
    mu_hi *= 4.0;
    hi_out = solve_mu(mu_hi);
  }
  if (hi_out.status != SolveStatus::kOptimal) {
    finish(hi_out, mu_hi);
    res.status = SolveStatus::kNumericalFailure;
    return res;
  }

  IpmOut best = hi_out;
  double mu_best = mu_hi;
  double norm_hi = hi_out.x.norm();
  for (int it = 0; it < 60; ++it) {
    if (std::abs(best.x.norm() - radius) <= opts.radius_tol * radius) break;
    double psi_lo = 1.0 / radius - 1.0 / std::max(norm_lo, kTiny);
    double psi_hi = 1.0 / radius - 1.0 / std::max(norm_hi, kTiny);
    double mu_next = (psi_hi != psi_lo)
                         ? mu_hi - psi_hi * (mu_hi - mu_lo) / (psi_hi - psi_lo)
                         : 0.5 * (mu_lo + mu_hi);
    if (!(mu_next > mu_lo && mu_next < mu_hi)) mu_next = 0.5 * (mu_lo + mu_hi);
    IpmOut trial = solve_mu(mu_next);
    if (trial.status != SolveStatus::kOptimal) break;
    double nn = trial.x.norm();
    if (nn > radius) {
      mu_lo = mu_next;
      norm_lo = nn;
    } else {
      mu_hi = mu_next;
      norm_hi = nn;
      best = trial;
      mu_best = mu_next;
    }
    if (std::abs(nn - radius) <= opts.radius_tol * radius) break;
  }
  finish(best, mu_best);
  return res;
}

LpResult solve_lp(const Vec& c, const SpMat& a_eq, const Vec& b_eq,
                  const Vec& lower, const Vec& upper, const IpmOptions& opts) {
  QpSpec spec;
  spec.h = SpMat(c.size(), c.size());
  spec.c = c;
  spec.a_eq = a_eq;
  spec.b_eq = b_eq;
  spec.lower = lower;
  spec.upper = upper;
  QpResult q = solve_qp(spec, opts);
  LpResult r;
  r.x = q.x;
  r.multipliers = q.multipliers;
  r.status = q.status;
  r.objective = q.objective;
  r.complementarity = q.complementarity;
  r.infeasibility_certificate = q.infeasibility_certificate;
  r.iterations = q.iterations;
  return r;
}

}  // namespace dsched::opt
