#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsched/convex.hpp"
#include "dsched/devices.hpp"
#include "dsched/trust_region.hpp"

namespace dsched::bc {

// ---------------------------------------------------------------------------
// mixed-integer linear models (exact device blocks + coupling rows)
// ---------------------------------------------------------------------------

struct MilpModel {
  Vec c;
  std::vector<dev::LinearRow> rows;
  Vec lower, upper;
  std::vector<char> integral;

  int n() const { return static_cast<int>(c.size()); }
  int add_var(double lo, double hi, bool is_integral, double cost = 0.0);
  /// appends every variable and row of the block; returns the index offset
  int add_block(const dev::MilpBlock& block);
};

struct MilpResult {
  Vec x;
  double objective = kInf;
  opt::SolveStatus status = opt::SolveStatus::kInfeasible;
  int node_count = 0;
};

struct MilpOptions {
  int node_limit = 5000;
  double tol_int = 1e-6;
  double prune_slack = 1e-9;
};

/// LP-based branch and bound over the integral variables.
MilpResult solve_milp(const MilpModel& model, const MilpOptions& opts = {});

// ---------------------------------------------------------------------------
// branch and cut over nonlinear relaxations
// ---------------------------------------------------------------------------

struct MinlpProblem {
  tra::NlpFunctions* nlp = nullptr;
  std::vector<int> discrete;
  Vec lower, upper;  // root bounds

  /// optional bound-tightening hook run on every node's bound patch
  std::function<void(Vec* lo, Vec* hi)> presolve_bounds;
  /// optional exact-linear counterpart used by the bound heuristic
  std::function<MilpModel()> milp_builder;
  /// maps a MILP solution onto the discrete entries of an NLP point
  std::function<Vec(const Vec&, const Vec&)> milp_to_start;
  /// largest soft-constraint violation of a solved point (feasibility gate)
  std::function<double(const Vec&)> max_penalty;
};

struct Incumbent {
  Vec x;
  double f = kInf;
};

struct BcOptions {
  int node_limit = 20000;
  double tol_int = 1e-6;
  double prune_slack = 1e-9;
  double penalty_tol = 1e-6;
  int w_bar_lp = 2;  // expediting passes
  bool use_milp_bound = true;
  tra::TrustRegionOptions tra;
  MilpOptions milp;
};

enum class BcStatus { kOptimal, kNodeLimit, kInfeasible };

struct NodeRecord {
  int id = 0, parent = -1, depth = 0;
  double relaxation = 0, bound = 0;
  int branch_var = -1;
  bool integral = false, pruned = false;
};

struct BcResult {
  Vec x;
  double f = kInf;
  BcStatus status = BcStatus::kInfeasible;
  int node_count = 0;
  int nlp_solves = 0;
  int heuristic_passes = 0;
  double best_bound = -kInf;
  std::vector<NodeRecord> trace;
  bool has_incumbent() const { return std::isfinite(f); }
};

/// Repeated linearized-LP + round-off + continuous polish passes; each pass
/// warm-starts from the previous one. Candidates with active soft penalties
/// or unmet constraints are discarded.
std::optional<Incumbent> root_heuristic(const MinlpProblem& problem, const Vec& x0,
                                        const BcOptions& opts, int* passes = nullptr);

/// Solves the exact-linear counterpart and polishes its discrete assignment
/// through the nonlinear relaxation; absence of an improvement is normal.
std::optional<Incumbent> milp_bound(const MinlpProblem& problem, const Vec& x0,
                                    const BcOptions& opts);

/// Best-bound branch and cut; nonlinear relaxations are solved by the
/// trust-region algorithm, warm-started from the parent node.
BcResult solve_bc(const MinlpProblem& problem, const Vec& x0, const BcOptions& opts = {});

}  // namespace dsched::bc
