#include "dsched/branch_cut.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace dsched::bc {

namespace {

double frac_distance(double v) { return std::abs(v - std::round(v)); }

int most_fractional(const Vec& x, const std::vector<int>& discrete, const Vec& lo,
                    const Vec& hi, double tol_int) {
  int arg = -1;
  double best = tol_int;
  for (int idx : discrete) {
    if (hi[idx] - lo[idx] < tol_int) continue;  // already fixed
    double d = frac_distance(x[idx]);
    if (d > best + 1e-15) {
      best = d;
      arg = idx;
    }
  }
  return arg;
}

bool integral_point(const Vec& x, const std::vector<int>& discrete, double tol_int) {
  for (int idx : discrete)
    if (frac_distance(x[idx]) > tol_int) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// MilpModel / solve_milp
// ---------------------------------------------------------------------------

int MilpModel::add_var(double lo, double hi, bool is_integral, double cost) {
  int idx = n();
  c.conservativeResize(idx + 1);
  lower.conservativeResize(idx + 1);
  upper.conservativeResize(idx + 1);
  c[idx] = cost;
  lower[idx] = lo;
  upper[idx] = hi;
  integral.push_back(is_integral);
  return idx;
}

int MilpModel::add_block(const dev::MilpBlock& block) {
  int offset = n();
  for (const auto& v : block.vars) add_var(v.lo, v.hi, v.integral);
  for (const auto& row : block.rows) {
    dev::LinearRow shifted = row;
    for (auto& [idx, val] : shifted.terms) idx += offset;
    rows.push_back(std::move(shifted));
  }
  return offset;
}

namespace {

// ranged rows become equalities with one boxed slack each
struct MilpLpForm {
  SpMat a;
  Vec b;
  Vec lo, hi;
  Vec c;
  int n_structural = 0;

  explicit MilpLpForm(const MilpModel& m) {
    n_structural = m.n();
    const int mr = static_cast<int>(m.rows.size());
    const int nv = n_structural + mr;
    c = Vec::Zero(nv);
    c.head(n_structural) = m.c;
    lo.resize(nv);
    hi.resize(nv);
    lo.head(n_structural) = m.lower;
    hi.head(n_structural) = m.upper;
    std::vector<Eigen::Triplet<double>> trips;
    for (int r = 0; r < mr; ++r) {
      for (auto& [idx, val] : m.rows[r].terms) trips.emplace_back(r, idx, val);
      trips.emplace_back(r, n_structural + r, -1.0);
      lo[n_structural + r] = m.rows[r].lo;
      hi[n_structural + r] = m.rows[r].hi;
    }
    a.resize(mr, nv);
    a.setFromTriplets(trips.begin(), trips.end());
    b = Vec::Zero(mr);
  }

  opt::LpResult solve(const Vec& lo_patch, const Vec& hi_patch) const {
    Vec l = lo, h = hi;
    l.head(n_structural) = lo_patch;
    h.head(n_structural) = hi_patch;
    return opt::solve_lp(c, a, b, l, h);
  }
};

}  // namespace

MilpResult solve_milp(const MilpModel& model, const MilpOptions& opts) {
  MilpLpForm form(model);
  std::vector<int> discrete;
  for (int i = 0; i < model.n(); ++i)
    if (model.integral[i]) discrete.push_back(i);

  struct Node {
    Vec lo, hi;
    double bound;
    int depth;
    long seq;
  };
  auto cmp = [](const Node& a, const Node& b) {
    if (a.bound != b.bound) return a.bound > b.bound;
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.seq > b.seq;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(cmp)> open(cmp);
  open.push({model.lower, model.upper, -kInf, 0, 0});

  MilpResult best;
  best.status = opt::SolveStatus::kInfeasible;
  long seq = 0;
  while (!open.empty() && best.node_count < opts.node_limit) {
    Node node = open.top();
    open.pop();
    if (node.bound >= best.objective - opts.prune_slack) continue;
    ++best.node_count;
    auto lp = form.solve(node.lo, node.hi);
    if (lp.status != opt::SolveStatus::kOptimal) continue;
    double bound = std::max(node.bound, lp.objective);
    if (bound >= best.objective - opts.prune_slack) continue;
    Vec x = lp.x.head(model.n());
    int branch = most_fractional(x, discrete, node.lo, node.hi, opts.tol_int);
    if (branch < 0) {
      if (lp.objective < best.objective) {
        best.objective = lp.objective;
        best.x = x;
        for (int idx : discrete) best.x[idx] = std::round(best.x[idx]);
        best.status = opt::SolveStatus::kOptimal;
      }
      continue;
    }
    Node down = node, up = node;
    down.hi[branch] = std::floor(x[branch]);
    up.lo[branch] = std::ceil(x[branch]);
    down.bound = up.bound = bound;
    down.depth = up.depth = node.depth + 1;
    down.seq = ++seq;
    up.seq = ++seq;
    if (down.hi[branch] >= down.lo[branch] - 1e-12) open.push(down);
    if (up.hi[branch] >= up.lo[branch] - 1e-12) open.push(up);
  }
  return best;
}

// ---------------------------------------------------------------------------
// heuristics
// ---------------------------------------------------------------------------

namespace {

struct PolishResult {
  tra::NlpResult res;
  bool clean = false;  // constraints met and soft penalties inactive
};

PolishResult polish_with_fixed_discretes(const MinlpProblem& problem, Vec start,
                                         const Vec& lo, const Vec& hi,
                                         const BcOptions& opts) {
  Vec l = lo, h = hi;
  for (int idx : problem.discrete) {
    double v = std::round(std::clamp(start[idx], lo[idx], hi[idx]));
    v = std::clamp(v, lo[idx], hi[idx]);
    l[idx] = h[idx] = v;
    start[idx] = v;
  }
  if (problem.presolve_bounds) problem.presolve_bounds(&l, &h);
  PolishResult out;
  out.res = tra::solve_nlp(*problem.nlp, start, opts.tra, &l, &h);
  double penalty = problem.max_penalty ? problem.max_penalty(out.res.x) : 0.0;
  out.clean = out.res.feasibility <= 10 * opts.tra.eps2 && penalty <= opts.penalty_tol;
  return out;
}

}  // namespace

std::optional<Incumbent> root_heuristic(const MinlpProblem& problem, const Vec& x0,
                                        const BcOptions& opts, int* passes) {
  std::optional<Incumbent> best;
  Vec anchor = x0.cwiseMax(problem.lower).cwiseMin(problem.upper);
  int done = 0;
  for (int pass = 0; pass < opts.w_bar_lp; ++pass) {
    ++done;
    // simplified problem: linearization at the anchor, no trust region
    tra::Linearization lin = problem.nlp->linearize(anchor);
    if (!lin.at.valid) break;
    opt::QpSpec spec;
    const int n = problem.nlp->num_vars();
    spec.h = SpMat(n, n);
    spec.c = lin.grad;
    spec.a_eq = lin.jac;
    spec.b_eq = -lin.at.g;
    // generous box keeps the heuristic LP bounded
    spec.lower = (problem.lower - anchor).cwiseMax(-1e3);
    spec.upper = (problem.upper - anchor).cwiseMin(1e3);
    auto lp = opt::solve_qp(spec);
    if (lp.status != opt::SolveStatus::kOptimal) break;
    Vec x_lp = anchor + lp.x;

    auto polish = polish_with_fixed_discretes(problem, x_lp, problem.lower,
                                              problem.upper, opts);
    if (polish.clean && (!best || polish.res.f < best->f))
      best = Incumbent{polish.res.x, polish.res.f};
    // integral relaxation: one pass suffices
    if (integral_point(x_lp, problem.discrete, opts.tol_int)) break;
    anchor = polish.res.x;
  }
  if (passes) *passes = done;
  return best;
}

std::optional<Incumbent> milp_bound(const MinlpProblem& problem, const Vec& x0,
                                    const BcOptions& opts) {
  if (!problem.milp_builder || !problem.milp_to_start) return std::nullopt;
  MilpModel model = problem.milp_builder();
  MilpResult milp = solve_milp(model, opts.milp);
  if (milp.status != opt::SolveStatus::kOptimal) return std::nullopt;
  Vec start = problem.milp_to_start(milp.x, x0);
  auto polish =
      polish_with_fixed_discretes(problem, start, problem.lower, problem.upper, opts);
  if (!polish.clean) return std::nullopt;
  return Incumbent{polish.res.x, polish.res.f};
}

// ---------------------------------------------------------------------------
// branch and cut
// ---------------------------------------------------------------------------

BcResult solve_bc(const MinlpProblem& problem, const Vec& x0, const BcOptions& opts) {
  if (!problem.nlp) throw InvalidInput("solve_bc: missing relaxation problem");
  BcResult out;

  struct Node {
    Vec lo, hi;
    Vec start;
    double bound;
    int depth;
    int parent;
    long seq;
  };
  auto cmp = [](const Node& a, const Node& b) {
    if (a.bound != b.bound) return a.bound > b.bound;
    if (a.depth != b.depth) return a.depth < b.depth;  // ties depth-first
    return a.seq > b.seq;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(cmp)> open(cmp);

  Vec root_lo = problem.lower, root_hi = problem.upper;
  if (problem.presolve_bounds) problem.presolve_bounds(&root_lo, &root_hi);
  open.push({root_lo, root_hi, x0, -kInf, 0, -1, 0});

  std::optional<Incumbent> incumbent;
  auto offer = [&](const Vec& x, double f) {
    if (!incumbent || f < incumbent->f) incumbent = Incumbent{x, f};
  };

  // expediting passes before any branching
  if (opts.w_bar_lp > 0) {
    int passes = 0;
    if (auto inc = root_heuristic(problem, x0, opts, &passes)) offer(inc->x, inc->f);
    out.heuristic_passes = passes;
  }
  if (opts.use_milp_bound)
    if (auto inc = milp_bound(problem, x0, opts)) offer(inc->x, inc->f);

  long seq = 0;
  while (!open.empty() && out.node_count < opts.node_limit) {
    Node node = open.top();
    open.pop();
    if (incumbent && node.bound >= incumbent->f - opts.prune_slack) {
      NodeRecord rec;
      rec.id = out.node_count;
      rec.parent = node.parent;
      rec.depth = node.depth;
      rec.bound = node.bound;
      rec.pruned = true;
      out.trace.push_back(rec);
      continue;
    }
    int id = out.node_count++;
    Vec lo = node.lo, hi = node.hi;
    if (problem.presolve_bounds) problem.presolve_bounds(&lo, &hi);
    tra::NlpResult relax =
        tra::solve_nlp(*problem.nlp, node.start, opts.tra, &lo, &hi);
    ++out.nlp_solves;

    NodeRecord rec;
    rec.id = id;
    rec.parent = node.parent;
    rec.depth = node.depth;
    rec.relaxation = relax.f;
    rec.bound = std::max(node.bound, relax.f);
    double bound = rec.bound;

    if (relax.feasibility > 10 * opts.tra.eps2) {
      // relaxation did not reach feasibility: keep the node value as a
      // heuristic bound only, do not fathom the lattice under it
      bound = node.bound;
      rec.bound = bound;
    }

    if (incumbent && bound >= incumbent->f - opts.prune_slack) {
      rec.pruned = true;
      out.trace.push_back(rec);
      continue;
    }

    if (integral_point(relax.x, problem.discrete, opts.tol_int) &&
        relax.feasibility <= 10 * opts.tra.eps2) {
      rec.integral = true;
      out.trace.push_back(rec);
      Vec snapped = relax.x;
      for (int idx : problem.discrete) snapped[idx] = std::round(snapped[idx]);
      offer(snapped, relax.f);
      continue;
    }

    int branch = most_fractional(relax.x, problem.discrete, lo, hi, opts.tol_int);
    if (branch < 0) {
      // discrete values integral but constraints unmet; nothing to branch on
      out.trace.push_back(rec);
      continue;
    }
    rec.branch_var = branch;
    out.trace.push_back(rec);

    Node down{node.lo, node.hi, relax.x, bound, node.depth + 1, id, ++seq};
    down.hi[branch] = std::floor(relax.x[branch]);
    down.start[branch] = down.hi[branch];
    Node up{node.lo, node.hi, relax.x, bound, node.depth + 1, id, ++seq};
    up.lo[branch] = std::ceil(relax.x[branch]);
    up.start[branch] = up.lo[branch];
    if (down.hi[branch] >= down.lo[branch] - 1e-12) open.push(down);
    if (up.hi[branch] >= up.lo[branch] - 1e-12) open.push(up);
  }

  out.best_bound = open.empty() ? (incumbent ? incumbent->f : -kInf)
                                : open.top().bound;
  if (incumbent) {
    out.x = incumbent->x;
    out.f = incumbent->f;
    out.status = open.empty() ? BcStatus::kOptimal : BcStatus::kNodeLimit;
  } else {
    out.status = BcStatus::kInfeasible;
  }
  return out;
}

}  // namespace dsched::bc
