#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dsched/common.hpp"

namespace dsched::dev {

/// Upstream grid seen as a single source behind an impedance.
struct TheveninEquivalent {
  Complex v_th{1.0, 0.0};
  Complex z_th{0.0, 0.0};
};

/// First-order device model dI = A dV + B dU around an anchor operating
/// point; one B column per scalar control of the device.
struct PerturbedPair {
  Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
  Mat b;  // 2 x k
  Complex v_anchor{0.0, 0.0};
  Complex i_anchor{0.0, 0.0};
};

/// Constant-PQ injection: A from the anchor current, B mapping (dP, dQ)
/// to current. Devices with reactive control only use the second column.
PerturbedPair der_perturbed_pair(Complex v_hat, Complex i_hat);

struct DispatchableDer {
  int bus = 0;
  double s_max = 0;      // apparent power cap (pu)
  double p_max = 0, q_max = 0;
  double theta_max = 0;  // max power angle (rad)
  double price = 0;      // currency/MWh
  int polygon_lines = 5; // n-bar
};

enum class ResKind { kPv, kWind };

struct ResUnit {
  int bus = 0;
  double s_max = 0;
  ResKind kind = ResKind::kPv;
  double alpha_max = 0;    // pv: max power angle (rad)
  double q_min_wind = 0;   // wind: reactive floor (<= 0 allowed)
};

struct SvrUnit {
  int bus = 0;
  double q_max = 0;
};

/// Inner polygonal approximation of the apparent-power arc between power
/// angles -theta..theta. Entries are (slope, intercept) of the lower
/// half-plane family Q >= m P + b; mirrored partners Q <= -m P - b complete
/// the symmetric polygon, and |Q| <= tan(theta) P closes the wedge.
struct CapacityPolygon {
  std::vector<std::pair<double, double>> halfplanes;  // 2*n_bar entries
  double wedge_tan = 0;
  double max_error = 0;
};
CapacityPolygon capacity_polygon(double s_max, double theta, int n_bar);

/// Reactive capability at the current production level.
std::pair<double, double> res_reactive_bounds(const ResUnit& unit, double p_now);

struct OltcTransformer {
  Complex z_sr_n{0.0, 0.0};  // nominal series impedance (pu)
  double r_c_n = kInf;       // core resistance (pu); inf = lossless core
  double x_m_n = kInf;       // magnetizing reactance (pu); inf = none
  int tap_min = 0, tap_max = 0;
  double delta_u = 0.01;     // voltage step per tap (pu)
  double tap_change_cost = 0;
  int max_tap_jump = 0;         // 0 = full range
  int max_ops_per_horizon = -1; // per-window actuation cap; < 0 = unlimited

  int range_jump() const { return max_tap_jump > 0 ? max_tap_jump : tap_max - tap_min; }
};

struct PiAdmittances {
  Complex y_sr{0, 0}, y_p{0, 0}, y_s{0, 0};
};

/// Tap-dependent admittances of the two-port equivalent. The turn ratio is
/// r = 1 + tap*delta_u; taps may be fractional inside relaxations.
PiAdmittances oltc_pi_admittances(double tap, const OltcTransformer& xfmr);

/// One or more parallel transformers between the upstream system and a
/// single secondary bus. Parallel units stamp as the sum of their
/// admittances; with ganged == true a single tap variable drives all units.
struct OltcGroup {
  int secondary_bus = 0;
  std::vector<OltcTransformer> units;
  bool ganged = true;

  int n_tap_vars() const { return ganged ? 1 : static_cast<int>(units.size()); }
  double tap_of_unit(const Vec& taps, int unit) const {
    return ganged ? taps[0] : taps[unit];
  }
  PiAdmittances combined_pi(const Vec& taps) const;
  double tap_lo(int var) const;
  double tap_hi(int var) const;
};

/// I = C(tap) V + D(tap) V_th at the secondary bus, obtained by reducing the
/// Thevenin + pi circuit; derivative coefficients are analytic in the taps.
struct UpstreamCurrentMap {
  Complex i{0, 0};
  Complex c{0, 0}, d{0, 0};
  std::vector<Complex> dc_dtap, dd_dtap;
  Complex v_primary{0, 0};
  Complex i_primary{0, 0};  // current entering the primary node from upstream
};
UpstreamCurrentMap oltc_current_map(const Vec& taps, Complex v_secondary,
                                    const OltcGroup& group,
                                    const TheveninEquivalent& th);

PerturbedPair oltc_perturbed_pair(const Vec& taps_hat, Complex v_hat,
                                  const OltcGroup& group, const TheveninEquivalent& th);

struct CapacitorBank {
  int bus = 0;
  double y_step = 0;  // admittance per step (pu)
  int st_min = 0, st_max = 0;
  double step_change_cost = 0;
  int max_step_jump = 0;  // 0 = full range

  int range_jump() const { return max_step_jump > 0 ? max_step_jump : st_max - st_min; }
};

/// Injected current -j y st V around the anchor; B column is the step
/// sensitivity.
PerturbedPair cb_perturbed_pair(double st_hat, Complex v_hat, const CapacitorBank& cb);

// ---------------------------------------------------------------------------
// Exact mixed-integer device models (auxiliary binary variables)
// ---------------------------------------------------------------------------

struct LinearRow {
  std::vector<std::pair<int, double>> terms;
  double lo = -kInf, hi = kInf;
};

struct MilpVar {
  std::string name;
  double lo = -kInf, hi = kInf;
  bool integral = false;
};

struct MilpBlock {
  std::vector<MilpVar> vars;
  std::vector<LinearRow> rows;
  std::map<std::string, int> named;

  int add_var(const std::string& name, double lo, double hi, bool integral);
  int var(const std::string& name) const;
  void add_row(LinearRow row) { rows.push_back(std::move(row)); }
};

/// Emits the five-row linear family that pins gamma_m = nu_m * v for a binary
/// nu_m, |v| <= v_bound and a sign indicator sigma (sigma = 1 iff v >= 0).
void bilinear_integer_envelope(MilpBlock& block, int nu, int v, int sigma,
                               double v_bound, int gamma);

/// Mixed-integer transformer block: series R+jX, core conductance, turn
/// ratio written over ordered dummy binaries, both r*Vs and r*Ip products
/// expanded exactly per real/imaginary component.
/// Terminal variables: v_x/v_y (internal EMF), v_p_x/v_p_y, v_s_x/v_s_y,
/// i_p_x/i_p_y, i_s_x/i_s_y, r, tap.
MilpBlock oltc_exact_model(const OltcTransformer& xfmr, double v_bound);

/// Mixed-integer capacitor block for the device current I = j y st V with st
/// in unary binaries. Terminal variables: v_x/v_y, i_x/i_y, st.
MilpBlock cb_exact_model(const CapacitorBank& cb, double v_bound);

// ---------------------------------------------------------------------------
// Upstream identification
// ---------------------------------------------------------------------------

struct PrimaryMeasurement {
  double v_mag = 0;   // |V_p|
  double i_mag = 0;   // |I_p|
  double phi_iv = 0;  // angle(I_p) - angle(V_p)
};

struct TheveninFit {
  TheveninEquivalent equivalent;
  std::array<double, 3> v_angles{};  // recovered primary angles
  double residual = 0;
};

/// Recovers (V_th, Z_th) from three operating conditions by solving the
/// six-equation real/imaginary system with a damped least-squares Newton.
/// Throws when the conditions are indistinguishable.
TheveninFit estimate_thevenin(const std::array<PrimaryMeasurement, 3>& meas,
                              double residual_tol = 1e-10);

}  // namespace dsched::dev
