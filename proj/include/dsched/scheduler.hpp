#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dsched/branch_cut.hpp"
#include "dsched/devices.hpp"
#include "dsched/loads.hpp"
#include "dsched/network.hpp"
#include "dsched/scenarios.hpp"
#include "dsched/trust_region.hpp"

namespace dsched::rhc {

/// Every tolerance and cap used anywhere in the pipeline; reachable from the
/// case file and echoed into the resolved-config dump.
struct SolverConfig {
  // trust region
  double tra_alpha0 = 0.1, tra_alpha_min = 1e-8, tra_alpha_max = 10.0;
  double tra_xi_vertical = 0.8;
  double tra_eps1 = 1e-6, tra_eps2 = 1e-6;
  double tra_accept = 0.1, tra_shrink = 0.25, tra_expand = 0.75;
  double tra_zeta_safety = 1.1;
  int tra_max_iterations = 60;
  // branch and cut
  int bc_node_limit = 20000;
  double bc_tol_int = 1e-6;
  double bc_prune_slack = 1e-9;
  int bc_w_bar_lp = 2;
  double bc_penalty_tol = 1e-6;
  int milp_binary_cap = 60;
  int milp_node_limit = 5000;
  // nonlinear operating-point solver
  double ac_tolerance = 1e-9;
  int ac_max_iterations = 50;
  double condition_limit = 1e12;
  // device models
  double envelope_v_bound = 1.3;
  int der_polygon_lines = 5;
  // model updates
  double load_update_tol = 1e-3;
  double load_v_diff_min = 1e-4;
  double model_drift_tol = 1e-3;
  double thevenin_residual_tol = 1e-10;
  int max_resolves_per_window = 1;
  // scenario generation
  int candidate_pool = 200;
  int max_cov_pairs = 64;
  double sigma0_frac = 0.02;
  double sigma_growth = 0.1;
  // scheduling
  double eta_default = 1e4;
  double discount_decay = 0.98;
  double voltage_row_margin = 0.05;
  int voltage_track_min = 8;
  int voltage_track_all_below = 12;
  double current_row_margin = 0.7;
  int tap_ops_cap = 6;
  int cb_ops_cap = 6;
  int horizon = 20;
  int windows = 24;
  int scenarios = 5;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct UncertaintyConfig {
  double cross_bus_load_corr = 0.8;
  double load_autocorr = 0.7;
  double vth_autocorr = 0.9;
  double zth_autocorr = 0.8;
  double rho_a_autocorr = 0.9;
  double rho_r_autocorr = 0.9;
};

/// Static system description shared by the scheduler model and the plant.
struct SystemModel {
  double base_mva = 10.0;
  std::vector<net::Bus> buses;
  std::vector<net::Line> lines;
  std::vector<net::Shunt> shunts;
  dev::OltcGroup oltc;
  std::vector<dev::CapacitorBank> cbs;
  std::vector<dev::DispatchableDer> ders;
  std::vector<dev::ResUnit> res_units;
  std::vector<dev::SvrUnit> svrs;
  /// per-bus ZIP coefficients at peak demand (p0/q0 in pu)
  std::vector<load::ZipModel> zip;
  /// 24-point profiles, wrap-around beyond the end
  Vec load_factor, price_a, price_r, v_th_profile, pv_factor;
  Complex z_th_true{0.01, 0.05};
  UncertaintyConfig uncertainty;
  SolverConfig solver;

  int n_bus() const { return static_cast<int>(buses.size()); }
  double profile(const Vec& p, int hour) const {
    return p[((hour % p.size()) + p.size()) % p.size()];
  }
};

/// Index layout of one control block: taps, capacitor steps, DER (P, Q),
/// RES Q, SVR Q, then the change indicators.
struct ControlLayout {
  int n_taps = 0, n_cbs = 0, n_ders = 0, n_res = 0, n_svrs = 0;
  int physical() const { return n_taps + n_cbs + 2 * n_ders + n_res + n_svrs; }
  int with_indicators() const { return physical() + n_taps + n_cbs; }
  int tap(int k) const { return k; }
  int cb(int k) const { return n_taps + k; }
  int der_p(int k) const { return n_taps + n_cbs + 2 * k; }
  int der_q(int k) const { return n_taps + n_cbs + 2 * k + 1; }
  int res_q(int k) const { return n_taps + n_cbs + 2 * n_ders + k; }
  int svr_q(int k) const { return n_taps + n_cbs + 2 * n_ders + n_res + k; }
  int u_tap(int k) const { return physical() + k; }
  int u_cb(int k) const { return physical() + n_taps + k; }
};

/// Realized uncertain parameters of one (period, scenario) cell.
struct BlockData {
  Vec p_base, q_base;  // per-bus demand at nominal voltage (pu)
  Vec ap, aq;          // believed impedance shares per bus
  double rho_a = 0, rho_r = 0;
  double v_th = 1.0;
  Complex z_th{0, 0};
  Vec res_p;           // available production per RES unit (pu)
};

/// Applied control settings (absolute values).
struct ControlSettings {
  Vec taps;      // per tap variable
  Vec cb_steps;  // per bank
  Vec der_p, der_q;
  Vec res_q;
  Vec svr_q;
};

/// Believed (model-side) state carried between windows.
struct BeliefState {
  std::vector<load::ZpModel> load_shape;  // per-bus shares; p0/q0 unused here
  dev::TheveninEquivalent thevenin;
  bool thevenin_fixed_to_measured = false;  // inaccurate-upstream mode
};

struct SystemState {
  const SystemModel* model = nullptr;
  int hour = 0;  // index of the next period to schedule
  ControlSettings applied;
  BeliefState belief;
  std::vector<load::ZpModel> plant_load_shape;  // true shares
  dev::TheveninEquivalent plant_thevenin;       // true upstream (v_th from profile)
};

// ---------------------------------------------------------------------------
// problem assembly
// ---------------------------------------------------------------------------

struct DspMap {
  ControlLayout layout;
  int n_control_blocks = 0;
  int nc = 0;  // variables per control block
  std::vector<int> parent;       // control-block chain (-1: previous applied state)
  std::vector<double> weight;    // probability weight per control block
  std::vector<int> scenario_of;  // -1 for the shared first period
  std::vector<int> period_of;    // 1-based offset within the window

  struct StateBlock {
    int control_block = 0;
    int scenario = 0;
    int period = 1;
    double weight = 1.0;
    BlockData data;
    std::vector<int> tracked_buses;  // buses with voltage rows
    std::vector<int> tracked_lines;
  };
  std::vector<StateBlock> states;

  int var(int block, int offset) const { return block * nc + offset; }
  int n_vars() const { return n_control_blocks * nc; }
};

class DspEvaluator;  // per-x cache of operating points and sensitivities

struct DspProblem {
  std::shared_ptr<tra::EqualityFormProblem> nlp;
  std::shared_ptr<DspEvaluator> evaluator;
  bc::MinlpProblem minlp;
  DspMap map;
  Vec x0;  // anchored at the applied state, slacks closed
};

/// Scenario-expanded problem over the given tree; the first period is shared
/// across scenarios. A one-path tree degenerates to the deterministic
/// multi-period problem.
DspProblem build_stochastic_dsp(const SystemState& state, const scen::ScenarioTree& tree,
                                bool dcc_in_objective = true);

/// Deterministic problem from the forecast means over `horizon` periods.
DspProblem build_deterministic_dsp(const SystemState& state, int horizon = 1,
                                   bool dcc_in_objective = true);

/// Uncertainty descriptor + stage means used for tree construction; exposed
/// for the statistics checks.
scen::UncertaintyDescriptor uncertainty_descriptor(const SystemState& state);
std::function<Vec(int)> stage_mean_fn(const SystemState& state);
Vec realized_values(const SystemState& state, int hour);
scen::ScenarioTree window_tree(const SystemState& state, int horizon, int n_scenarios,
                               std::uint64_t seed);

// ---------------------------------------------------------------------------
// receding-horizon loop
// ---------------------------------------------------------------------------

struct RunConfig {
  int horizon = 20;
  int windows = 24;
  int scenarios = 5;
  std::uint64_t seed = 1;
  bool include_dcc_in_objective = true;  // study mode 3 turns this off
  bool update_thevenin = true;
  bool update_load_model = true;
  bool model_ignores_upstream_impedance = false;  // study mode 0
  bool model_neglects_voltage_dependence = false; // study mode 5
  double price_scale = 1.0;    // chi on energy prices
  double demand_scale = 1.0;   // chi on demands
  std::string trace_path;      // empty: no trace
};

struct WindowResult {
  int window = 0;
  ControlSettings applied;
  double oc = 0, dcc = 0, total = 0;
  double losses_mwh = 0;
  Vec voltage_profile;  // plant |V| per bus after application
  int min_voltage_bus = 0;
  int violations = 0;
  double objective_model = 0;
  int bc_nodes = 0, nlp_solves = 0, resolves = 0;
  double wall_seconds = 0;
  bool thevenin_updated = false, load_model_updated = false;
};

WindowResult run_window(SystemState& state, const RunConfig& cfg);
std::vector<WindowResult> run_rhc(SystemState state, const RunConfig& cfg,
                                  std::vector<WindowResult>* out = nullptr);

struct Costs {
  double oc = 0, dcc = 0, total = 0, losses_mwh = 0;
  int violations = 0;
};
Costs compute_costs(const std::vector<WindowResult>& windows);

/// Plant-side fixed point at the given hour and settings (true parameters).
net::OperatingPoint plant_resolve(const SystemState& state, int hour,
                                  const ControlSettings& settings,
                                  double demand_scale = 1.0);

/// Initial state from a system model: paper-style start with the configured
/// initial settings.
SystemState initial_state(const SystemModel& model, const ControlSettings& initial);

}  // namespace dsched::rhc
