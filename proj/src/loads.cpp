#include "dsched/loads.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace dsched::load {

void ZipModel::validate() const {
  if (std::abs(a_p + b_p + c_p - 1.0) > 1e-12 || std::abs(a_q + b_q + c_q - 1.0) > 1e-12)
    throw InvalidInput("ZIP shares must sum to 1 per row");
  if (v0 <= 0) throw InvalidInput("ZIP nominal voltage must be positive");
}

ZpModel zip_to_zp(const ZipModel& zip) {
  zip.validate();
  ZpModel m;
  m.ap = zip.a_p + 0.5 * zip.b_p;
  m.cp = zip.c_p + 0.5 * zip.b_p;
  m.aq = zip.a_q + 0.5 * zip.b_q;
  m.cq = zip.c_q + 0.5 * zip.b_q;
  m.p0 = zip.p0;
  m.q0 = zip.q0;
  m.v0 = zip.v0;
  return m;
}

std::pair<double, double> zp_demand(const ZpModel& m, Complex v) {
  double mag = std::abs(v);
  if (!(mag > 0.0 && mag < 2.0))
    throw InvalidInput("zp_demand: |v| outside sanity range (0, 2)");
  double w = (mag * mag) / (m.v0 * m.v0);
  return {m.p0 * (m.ap * w + m.cp), m.q0 * (m.aq * w + m.cq)};
}

Eigen::Matrix2d load_perturbed_matrix(const ZpModel& m, Complex v_hat, Complex i_hat) {
  if (std::abs(v_hat) <= 0.0)
    throw InvalidInput("load_perturbed_matrix: zero voltage anchor");
  auto [p_hat, q_hat] = zp_demand(m, v_hat);
  Complex s_anchor = -v_hat * std::conj(i_hat);
  if (std::abs(s_anchor - Complex(p_hat, q_hat)) > 1e-8)
    throw InvalidInput("load_perturbed_matrix: anchor violates demand sign convention");

  const double vx = v_hat.real(), vy = v_hat.imag();
  const double ix = i_hat.real(), iy = i_hat.imag();
  const double kp = 2.0 * m.ap * m.p0 / (m.v0 * m.v0);
  const double kq = 2.0 * m.aq * m.q0 / (m.v0 * m.v0);

  Eigen::Matrix2d mm;
  mm << vx, vy, vy, -vx;
  Eigen::Matrix2d nn;
  nn << -kp * vx - ix, -kp * vy - iy,
        iy - kq * vx, -ix - kq * vy;
  return mm.inverse() * nn;
}

UpdateResult update_load_model(const ZpModel& prior, const Measurement& before,
                               const Measurement& after, double change_tol,
                               double v_diff_min) {
  UpdateResult res{prior, false};
  if (std::abs(before.v_mag - after.v_mag) < v_diff_min) return res;

  const double x1 = (before.v_mag * before.v_mag) / (prior.v0 * prior.v0);
  const double x2 = (after.v_mag * after.v_mag) / (prior.v0 * prior.v0);

  // P = (a'*P0) x + (c'*P0); with a' + c' = 1 the pair is identified exactly
  auto solve_row = [&](double y1, double y2, double prior_share, double prior_base,
                       double* share, double* base) {
    double slope = (y1 - y2) / (x1 - x2);
    double inter = y1 - slope * x1;
    double total = slope + inter;
    if (std::abs(total) < 1e-14) {
      *share = prior_share;
      *base = 0.0;
      return;
    }
    *share = slope / total;
    *base = total;
    (void)prior_base;
  };

  ZpModel next = prior;
  double ap, p0, aq, q0;
  solve_row(before.p_d, after.p_d, prior.ap, prior.p0, &ap, &p0);
  solve_row(before.q_d, after.q_d, prior.aq, prior.q0, &aq, &q0);
  next.ap = ap;
  next.cp = 1.0 - ap;
  next.aq = aq;
  next.cq = 1.0 - aq;
  next.p0 = p0;
  next.q0 = q0;

  auto rel = [](double nu, double old) {
    return std::abs(nu - old) / std::max(1e-9, std::abs(old));
  };
  double change = std::max({rel(next.ap, prior.ap), rel(next.aq, prior.aq),
                            rel(next.p0, prior.p0), rel(next.q0, prior.q0)});
  if (change < change_tol) return res;

  res.model = next;
  res.updated = true;
  return res;
}

}  // namespace dsched::load
