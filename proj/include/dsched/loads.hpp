#pragma once

#include <utility>

#include "dsched/common.hpp"

namespace dsched::load {

/// Polynomial voltage-dependent demand with impedance/current/power shares.
/// Shares sum to one per row.
struct ZipModel {
  double a_p = 0, b_p = 0, c_p = 1;
  double a_q = 0, b_q = 0, c_q = 1;
  double p0 = 0, q0 = 0;
  double v0 = 1.0;
  void validate() const;
};

/// Two-term model obtained by replacing the |V|/V0 current term with
/// 0.5(1 + |V|^2/V0^2): only impedance and power shares remain.
struct ZpModel {
  double ap = 0, cp = 1;
  double aq = 0, cq = 1;
  double p0 = 0, q0 = 0;
  double v0 = 1.0;
};

ZpModel zip_to_zp(const ZipModel& zip);

/// Demand (p, q) drawn at complex voltage v. |v| must be in (0, 2).
std::pair<double, double> zp_demand(const ZpModel& m, Complex v);

/// First-order map dI = A dV of the injected load current around the anchor
/// (v_hat, i_hat). The anchor must satisfy the demand sign convention
/// -v_hat * conj(i_hat) = p_hat + j q_hat to 1e-8.
Eigen::Matrix2d load_perturbed_matrix(const ZpModel& m, Complex v_hat, Complex i_hat);

struct Measurement {
  double v_mag = 1.0;
  double p_d = 0.0;
  double q_d = 0.0;
};

struct UpdateResult {
  ZpModel model;
  bool updated = false;
};

/// Re-identifies (a', P_d0) and (a'_q, Q_d0) from two measurement sets taken
/// before and after a control change. Keeps the prior when the voltage
/// magnitudes are indistinguishable or when no coefficient moved by more
/// than change_tol (relative).
UpdateResult update_load_model(const ZpModel& prior, const Measurement& before,
                               const Measurement& after, double change_tol = 1e-3,
                               double v_diff_min = 1e-4);

}  // namespace dsched::load
