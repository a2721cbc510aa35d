#include "dsched/devices.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace dsched::dev {

namespace {

Eigen::Matrix2d voltage_matrix(Complex v) {
  Eigen::Matrix2d m;
  m << v.real(), v.imag(), v.imag(), -v.real();
  return m;
}

}  // namespace

PerturbedPair der_perturbed_pair(Complex v_hat, Complex i_hat) {
  if (std::abs(v_hat) <= 0.0)
    throw InvalidInput("der_perturbed_pair: singular anchor, |v| = 0");
  Eigen::Matrix2d m = voltage_matrix(v_hat);
  Eigen::Matrix2d cur;
  cur << i_hat.real(), i_hat.imag(), -i_hat.imag(), i_hat.real();
  Eigen::Matrix2d minv = m.inverse();
  PerturbedPair pair;
  pair.a = -minv * cur;
  pair.b = minv;
  pair.v_anchor = v_hat;
  pair.i_anchor = i_hat;
  return pair;
}

CapacityPolygon capacity_polygon(double s_max, double theta, int n_bar) {
  if (!(theta > 0.0 && theta < M_PI / 2))
    throw InvalidInput("capacity_polygon: theta must lie in (0, pi/2)");
  if (n_bar < 1) throw InvalidInput("capacity_polygon: n_bar must be >= 1");
  if (!(s_max > 0.0)) throw InvalidInput("capacity_polygon: s_max must be positive");

  CapacityPolygon poly;
  poly.wedge_tan = std::tan(theta);
  poly.max_error = (1.0 - std::cos(theta / (4.0 * n_bar))) * s_max;

  // chords of the lower arc [-theta, 0], each spanning theta/(2 n_bar);
  // mirrored partners cover the upper arc
  const int n_chords = 2 * n_bar;
  const double span = theta / (2.0 * n_bar);
  for (int k = 0; k < n_chords; ++k) {
    double a1 = -theta + k * span;
    double a2 = a1 + span;
    double x1 = s_max * std::cos(a1), y1 = s_max * std::sin(a1);
    double x2 = s_max * std::cos(a2), y2 = s_max * std::sin(a2);
    double m = (y2 - y1) / (x2 - x1);
    double b = y1 - m * x1;
    poly.halfplanes.emplace_back(m, b);
  }
  return poly;
}

std::pair<double, double> res_reactive_bounds(const ResUnit& unit, double p_now) {
  if (p_now < 0.0 || p_now > unit.s_max + 1e-12)
    throw InvalidInput("res_reactive_bounds: production outside [0, s_max]");
  double q_cap = std::sqrt(std::max(0.0, unit.s_max * unit.s_max - p_now * p_now));
  if (unit.kind == ResKind::kPv) {
    double q_angle = std::tan(unit.alpha_max) * p_now;
    double q = std::min(q_cap, q_angle);
    return {-q, q};
  }
  return {std::max(unit.q_min_wind, -q_cap), q_cap};
}

PiAdmittances oltc_pi_admittances(double tap, const OltcTransformer& xfmr) {
  double r = 1.0 + tap * xfmr.delta_u;
  if (r <= 0.0) throw InvalidInput("oltc_pi_admittances: non-positive turn ratio");
  if (xfmr.z_sr_n == Complex(0.0, 0.0))
    throw InvalidInput("oltc_pi_admittances: zero series impedance");
  PiAdmittances y;
  y.y_sr = 1.0 / (r * xfmr.z_sr_n);
  y.y_p = (1.0 - r) / (r * r * xfmr.z_sr_n);
  if (std::isfinite(xfmr.r_c_n)) y.y_p += 1.0 / (r * r * xfmr.r_c_n);
  if (std::isfinite(xfmr.x_m_n)) y.y_p -= Complex(0.0, 1.0) / (r * r * xfmr.x_m_n);
  y.y_s = (r - 1.0) / (r * xfmr.z_sr_n);
  return y;
}

PiAdmittances OltcGroup::combined_pi(const Vec& taps) const {
  if (taps.size() != n_tap_vars())
    throw InvalidInput("OltcGroup: tap vector size mismatch");
  PiAdmittances total;
  for (std::size_t u = 0; u < units.size(); ++u) {
    PiAdmittances y = oltc_pi_admittances(tap_of_unit(taps, static_cast<int>(u)), units[u]);
    total.y_sr += y.y_sr;
    total.y_p += y.y_p;
    total.y_s += y.y_s;
  }
  return total;
}

double OltcGroup::tap_lo(int var) const {
  if (!ganged) return units[var].tap_min;
  double lo = -kInf;
  for (const auto& u : units) lo = std::max(lo, static_cast<double>(u.tap_min));
  return lo;
}

double OltcGroup::tap_hi(int var) const {
  if (!ganged) return units[var].tap_max;
  double hi = kInf;
  for (const auto& u : units) hi = std::min(hi, static_cast<double>(u.tap_max));
  return hi;
}

namespace {

struct PiDerivative {
  Complex dy_sr{0, 0}, dy_p{0, 0}, dy_s{0, 0};
};

PiDerivative pi_tap_derivative(double tap, const OltcTransformer& x) {
  double r = 1.0 + tap * x.delta_u;
  PiDerivative d;
  Complex z = x.z_sr_n;
  d.dy_sr = -1.0 / (r * r * z);
  d.dy_p = (r - 2.0) / (r * r * r) / z;
  if (std::isfinite(x.r_c_n)) d.dy_p += -2.0 / (r * r * r * x.r_c_n);
  if (std::isfinite(x.x_m_n)) d.dy_p += Complex(0.0, 2.0) / (r * r * r * x.x_m_n);
  d.dy_s = 1.0 / (r * r * z);
  d.dy_sr *= x.delta_u;
  d.dy_p *= x.delta_u;
  d.dy_s *= x.delta_u;
  return d;
}

}  // namespace

UpstreamCurrentMap oltc_current_map(const Vec& taps, Complex v_secondary,
                                    const OltcGroup& group,
                                    const TheveninEquivalent& th) {
  PiAdmittances y = group.combined_pi(taps);
  const int nt = group.n_tap_vars();
  std::vector<PiDerivative> dtot(nt);
  for (std::size_t u = 0; u < group.units.size(); ++u) {
    int var = group.ganged ? 0 : static_cast<int>(u);
    PiDerivative d = pi_tap_derivative(group.tap_of_unit(taps, static_cast<int>(u)),
                                       group.units[u]);
    dtot[var].dy_sr += d.dy_sr;
    dtot[var].dy_p += d.dy_p;
    dtot[var].dy_s += d.dy_s;
  }

  UpstreamCurrentMap map;
  map.dc_dtap.resize(nt);
  map.dd_dtap.resize(nt);

  if (th.z_th == Complex(0.0, 0.0)) {
    // stiff source: primary clamped at V_th
    map.c = -(y.y_sr + y.y_s);
    map.d = y.y_sr;
    map.v_primary = th.v_th;
    for (int k = 0; k < nt; ++k) {
      map.dc_dtap[k] = -(dtot[k].dy_sr + dtot[k].dy_s);
      map.dd_dtap[k] = dtot[k].dy_sr;
    }
    map.i = map.c * v_secondary + map.d * th.v_th;
    map.i_primary = y.y_p * th.v_th + (th.v_th - v_secondary) * y.y_sr;
    return map;
  }

  Complex y_th = 1.0 / th.z_th;
  Complex s = y_th + y.y_p + y.y_sr;
  if (std::abs(s) < 1e-12)
    throw NumericalError("oltc_current_map: degenerate upstream circuit");
  map.c = y.y_sr * y.y_sr / s - y.y_sr - y.y_s;
  map.d = y.y_sr * y_th / s;
  for (int k = 0; k < nt; ++k) {
    Complex ds = dtot[k].dy_p + dtot[k].dy_sr;
    map.dc_dtap[k] = (2.0 * y.y_sr * dtot[k].dy_sr * s - y.y_sr * y.y_sr * ds) / (s * s) -
                     dtot[k].dy_sr - dtot[k].dy_s;
    map.dd_dtap[k] = y_th * (dtot[k].dy_sr * s - y.y_sr * ds) / (s * s);
  }
  map.i = map.c * v_secondary + map.d * th.v_th;
  map.v_primary = (th.v_th * y_th + y.y_sr * v_secondary) / s;
  map.i_primary = (th.v_th - map.v_primary) * y_th;
  return map;
}

PerturbedPair oltc_perturbed_pair(const Vec& taps_hat, Complex v_hat,
                                  const OltcGroup& group,
                                  const TheveninEquivalent& th) {
  UpstreamCurrentMap map = oltc_current_map(taps_hat, v_hat, group, th);
  PerturbedPair pair;
  pair.a << map.c.real(), -map.c.imag(), map.c.imag(), map.c.real();
  const int nt = group.n_tap_vars();
  pair.b.resize(2, nt);
  for (int k = 0; k < nt; ++k) {
    Complex di = map.dc_dtap[k] * v_hat + map.dd_dtap[k] * th.v_th;
    pair.b(0, k) = di.real();
    pair.b(1, k) = di.imag();
  }
  pair.v_anchor = v_hat;
  pair.i_anchor = map.i;
  return pair;
}

PerturbedPair cb_perturbed_pair(double st_hat, Complex v_hat, const CapacitorBank& cb) {
  PerturbedPair pair;
  double sy = st_hat * cb.y_step;
  pair.a << 0.0, sy, -sy, 0.0;
  pair.b.resize(2, 1);
  pair.b(0, 0) = cb.y_step * v_hat.imag();
  pair.b(1, 0) = -cb.y_step * v_hat.real();
  pair.v_anchor = v_hat;
  pair.i_anchor = Complex(0.0, -1.0) * sy * v_hat;
  return pair;
}

// ---------------------------------------------------------------------------
// exact models
// ---------------------------------------------------------------------------

int MilpBlock::add_var(const std::string& name, double lo, double hi, bool integral) {
  int idx = static_cast<int>(vars.size());
  vars.push_back({name, lo, hi, integral});
  named[name] = idx;
  return idx;
}

int MilpBlock::var(const std::string& name) const {
  auto it = named.find(name);
  if (it == named.end()) throw InvalidInput("MilpBlock: unknown variable " + name);
  return it->second;
}

void bilinear_integer_envelope(MilpBlock& block, int nu, int v, int sigma,
                               double v_bound, int gamma) {
  if (!(v_bound > 0))
    throw InvalidInput("bilinear_integer_envelope: bound must be positive");
  const double vb = v_bound;
  // sign row: (sigma-1) vb <= v <= sigma vb
  block.add_row({{{v, 1.0}, {sigma, -vb}}, -vb, 0.0});
  // magnitude rows: -nu vb <= gamma <= nu vb
  block.add_row({{{gamma, 1.0}, {nu, -vb}}, -kInf, 0.0});
  block.add_row({{{gamma, 1.0}, {nu, vb}}, 0.0, kInf});
  // sign-split offset row: v - sigma vb <= gamma <= v + (1 - sigma) vb
  block.add_row({{{gamma, 1.0}, {v, -1.0}, {sigma, vb}}, 0.0, vb});
  // gamma sign row: (sigma-1) vb <= gamma <= sigma vb
  block.add_row({{{gamma, 1.0}, {sigma, -vb}}, -vb, 0.0});
  // product rows: v - (1-nu) vb <= gamma <= v + (1-nu) vb
  block.add_row({{{gamma, 1.0}, {v, -1.0}, {nu, -vb}}, -vb, kInf});
  block.add_row({{{gamma, 1.0}, {v, -1.0}, {nu, vb}}, -kInf, vb});
}

namespace {

// expands product = (r_lo + step * sum(nu)) * v into rows of the block,
// creating one gamma per binary; returns the row tying `product`
void add_discrete_product(MilpBlock& block, const std::string& tag,
                          const std::vector<int>& nus, int v, int sigma, int product,
                          double r_lo, double step, double v_bound) {
  LinearRow tie;
  tie.terms.push_back({product, 1.0});
  tie.terms.push_back({v, -r_lo});
  for (std::size_t m = 0; m < nus.size(); ++m) {
    int g = block.add_var(tag + "_gamma_" + std::to_string(m + 1), -v_bound, v_bound,
                          false);
    bilinear_integer_envelope(block, nus[m], v, sigma, v_bound, g);
    tie.terms.push_back({g, -step});
  }
  tie.lo = tie.hi = 0.0;
  block.add_row(tie);
}

}  // namespace

MilpBlock oltc_exact_model(const OltcTransformer& xfmr, double v_bound) {
  if (!(v_bound > 0)) throw InvalidInput("oltc_exact_model: bound must be positive");
  MilpBlock block;
  const int n_m = xfmr.tap_max - xfmr.tap_min;
  const int n_neg = -xfmr.tap_min;
  const double r_lo = 1.0 - n_neg * xfmr.delta_u;
  const double r_hi = 1.0 + xfmr.tap_max * xfmr.delta_u;
  const double ib = v_bound;      // current component bound
  const double eb = 2.0 * v_bound;  // internal EMF / primary bound

  int vx = block.add_var("v_x", -eb, eb, false);
  int vy = block.add_var("v_y", -eb, eb, false);
  int vpx = block.add_var("v_p_x", -eb, eb, false);
  int vpy = block.add_var("v_p_y", -eb, eb, false);
  int vsx = block.add_var("v_s_x", -v_bound, v_bound, false);
  int vsy = block.add_var("v_s_y", -v_bound, v_bound, false);
  int ipx = block.add_var("i_p_x", -ib, ib, false);
  int ipy = block.add_var("i_p_y", -ib, ib, false);
  int isx = block.add_var("i_s_x", -3.0 * ib, 3.0 * ib, false);
  int isy = block.add_var("i_s_y", -3.0 * ib, 3.0 * ib, false);
  int r = block.add_var("r", r_lo, r_hi, false);
  int tap = block.add_var("tap", xfmr.tap_min, xfmr.tap_max, true);

  std::vector<int> nus;
  for (int m = 1; m <= n_m; ++m)
    nus.push_back(block.add_var("nu_" + std::to_string(m), 0.0, 1.0, true));
  for (int m = 1; m < n_m; ++m)
    block.add_row({{{nus[m], 1.0}, {nus[m - 1], -1.0}}, -kInf, 0.0});

  // r = r_lo + step * sum(nu); tap = sum(nu) - n_neg
  LinearRow r_row{{{r, 1.0}}, r_lo, r_lo};
  LinearRow tap_row{{{tap, 1.0}}, -static_cast<double>(n_neg),
                    -static_cast<double>(n_neg)};
  for (int g : nus) {
    r_row.terms.push_back({g, -xfmr.delta_u});
    tap_row.terms.push_back({g, -1.0});
  }
  block.add_row(r_row);
  block.add_row(tap_row);

  int s_vsx = block.add_var("sigma_v_s_x", 0.0, 1.0, true);
  int s_vsy = block.add_var("sigma_v_s_y", 0.0, 1.0, true);
  int s_ipx = block.add_var("sigma_i_p_x", 0.0, 1.0, true);
  int s_ipy = block.add_var("sigma_i_p_y", 0.0, 1.0, true);

  // V = r Vs, expanded per component
  add_discrete_product(block, "rvs_x", nus, vsx, s_vsx, vx, r_lo, xfmr.delta_u, v_bound);
  add_discrete_product(block, "rvs_y", nus, vsy, s_vsy, vy, r_lo, xfmr.delta_u, v_bound);

  // Is = r Ip + Gc Vs
  const double g_c = std::isfinite(xfmr.r_c_n) ? 1.0 / xfmr.r_c_n : 0.0;
  {
    // product variable p = r*Ip per component, then the Is tie row
    int rix = block.add_var("r_i_p_x", -2.0 * ib, 2.0 * ib, false);
    int riy = block.add_var("r_i_p_y", -2.0 * ib, 2.0 * ib, false);
    add_discrete_product(block, "rip_x", nus, ipx, s_ipx, rix, r_lo, xfmr.delta_u, ib);
    add_discrete_product(block, "rip_y", nus, ipy, s_ipy, riy, r_lo, xfmr.delta_u, ib);
    block.add_row({{{isx, 1.0}, {rix, -1.0}, {vsx, -g_c}}, 0.0, 0.0});
    block.add_row({{{isy, 1.0}, {riy, -1.0}, {vsy, -g_c}}, 0.0, 0.0});
  }

  // V = Vp + (Rs + jXs) Ip with Rs + jXs = nominal series impedance
  const double rs = xfmr.z_sr_n.real(), xs = xfmr.z_sr_n.imag();
  block.add_row({{{vx, 1.0}, {vpx, -1.0}, {ipx, -rs}, {ipy, xs}}, 0.0, 0.0});
  block.add_row({{{vy, 1.0}, {vpy, -1.0}, {ipy, -rs}, {ipx, -xs}}, 0.0, 0.0});
  return block;
}

MilpBlock cb_exact_model(const CapacitorBank& cb, double v_bound) {
  if (!(v_bound > 0)) throw InvalidInput("cb_exact_model: bound must be positive");
  if (cb.st_min < 0 || cb.st_min > cb.st_max)
    throw InvalidInput("cb_exact_model: invalid step range");
  MilpBlock block;
  const int n_m = cb.st_max - cb.st_min;
  const double ib = v_bound * cb.y_step * cb.st_max + 1.0;

  int vx = block.add_var("v_x", -v_bound, v_bound, false);
  int vy = block.add_var("v_y", -v_bound, v_bound, false);
  int ix = block.add_var("i_x", -ib, ib, false);
  int iy = block.add_var("i_y", -ib, ib, false);
  int st = block.add_var("st", cb.st_min, cb.st_max, true);

  std::vector<int> mus;
  for (int m = 1; m <= n_m; ++m)
    mus.push_back(block.add_var("mu_" + std::to_string(m), 0.0, 1.0, true));
  for (int m = 1; m < n_m; ++m)
    block.add_row({{{mus[m], 1.0}, {mus[m - 1], -1.0}}, -kInf, 0.0});

  LinearRow st_row{{{st, 1.0}}, static_cast<double>(cb.st_min),
                   static_cast<double>(cb.st_min)};
  for (int g : mus) st_row.terms.push_back({g, -1.0});
  block.add_row(st_row);

  int s_vx = block.add_var("sigma_v_x", 0.0, 1.0, true);
  int s_vy = block.add_var("sigma_v_y", 0.0, 1.0, true);

  // st*Vx and st*Vy products
  int stvx = block.add_var("st_v_x", -v_bound * cb.st_max, v_bound * cb.st_max, false);
  int stvy = block.add_var("st_v_y", -v_bound * cb.st_max, v_bound * cb.st_max, false);
  add_discrete_product(block, "stv_x", mus, vx, s_vx, stvx,
                       static_cast<double>(cb.st_min), 1.0, v_bound);
  add_discrete_product(block, "stv_y", mus, vy, s_vy, stvy,
                       static_cast<double>(cb.st_min), 1.0, v_bound);

  // device current I = j y st V: Ix = -y st Vy, Iy = y st Vx
  block.add_row({{{ix, 1.0}, {stvy, cb.y_step}}, 0.0, 0.0});
  block.add_row({{{iy, 1.0}, {stvx, -cb.y_step}}, 0.0, 0.0});
  return block;
}

// ---------------------------------------------------------------------------
// Thevenin identification
// ---------------------------------------------------------------------------

TheveninFit estimate_thevenin(const std::array<PrimaryMeasurement, 3>& meas,
                              double residual_tol) {
  // reject indistinguishable operating conditions up front
  double spread = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      spread = std::max(spread, std::abs(meas[a].v_mag - meas[b].v_mag));
      spread = std::max(spread, std::abs(meas[a].i_mag - meas[b].i_mag));
      spread = std::max(spread, std::abs(meas[a].phi_iv - meas[b].phi_iv));
    }
  if (spread < 1e-12)
    throw NumericalError(
        "estimate_thevenin: operating conditions are indistinguishable "
        "(insufficient excitation)");

  // unknowns: |V_th| (angle reference 0), |Z_th|, angle(Z_th), three primary
  // voltage angles
  Vec u(6);
  u[0] = meas[0].v_mag;
  Complex i0 = meas[0].i_mag * std::exp(Complex(0, meas[0].phi_iv));
  Complex i1 = meas[1].i_mag * std::exp(Complex(0, meas[1].phi_iv));
  Complex z_init(0.01, 0.0);
  if (std::abs(i1 - i0) > 1e-9)
    z_init = (meas[0].v_mag - meas[1].v_mag) / (i1 - i0);
  u[1] = std::abs(z_init);
  u[2] = std::arg(z_init == Complex(0, 0) ? Complex(1e-6, 0) : z_init);
  u[3] = u[4] = u[5] = 0.0;

  auto residual = [&](const Vec& uu, Vec& f) {
    f.resize(6);
    for (int k = 0; k < 3; ++k) {
      Complex ev = std::exp(Complex(0, uu[3 + k]));
      Complex drop = uu[1] * std::exp(Complex(0, uu[2])) * meas[k].i_mag *
                     std::exp(Complex(0, uu[3 + k] + meas[k].phi_iv));
      Complex r = Complex(uu[0], 0.0) - meas[k].v_mag * ev - drop;
      f[2 * k] = r.real();
      f[2 * k + 1] = r.imag();
    }
  };
  auto jacobian = [&](const Vec& uu, Mat& j) {
    j = Mat::Zero(6, 6);
    const Complex jc(0, 1);
    for (int k = 0; k < 3; ++k) {
      Complex ev = std::exp(Complex(0, uu[3 + k]));
      Complex zi = std::exp(Complex(0, uu[2])) * meas[k].i_mag *
                   std::exp(Complex(0, uu[3 + k] + meas[k].phi_iv));
      Complex d_vth(1.0, 0.0);
      Complex d_zmag = -zi;
      Complex d_zang = -uu[1] * jc * zi;
      Complex d_dk = -meas[k].v_mag * jc * ev - uu[1] * jc * zi;
      j(2 * k, 0) = d_vth.real();
      j(2 * k + 1, 0) = d_vth.imag();
      j(2 * k, 1) = d_zmag.real();
      j(2 * k + 1, 1) = d_zmag.imag();
      j(2 * k, 2) = d_zang.real();
      j(2 * k + 1, 2) = d_zang.imag();
      j(2 * k, 3 + k) = d_dk.real();
      j(2 * k + 1, 3 + k) = d_dk.imag();
    }
  };

  Vec f;
  residual(u, f);
  double fn = f.norm();
  for (int it = 0; it < 200 && fn > residual_tol; ++it) {
    Mat j;
    jacobian(u, j);
    Vec step = j.colPivHouseholderQr().solve(-f);
    double damp = 1.0;
    Vec u_next;
    Vec f_next;
    double fn_next = kInf;
    for (int back = 0; back < 40; ++back) {
      u_next = u + damp * step;
      residual(u_next, f_next);
      fn_next = f_next.norm();
      if (fn_next < fn || fn_next < residual_tol) break;
      damp *= 0.5;  // damped correction on divergence
    }
    if (!(fn_next < fn) && fn_next > residual_tol) break;
    u = u_next;
    f = f_next;
    fn = fn_next;
  }
  if (fn > residual_tol * 10 && fn > 1e-8)
    throw NumericalError(
        "estimate_thevenin: no consistent upstream equivalent found "
        "(insufficient excitation)");

  if (u[1] < 0) {
    u[1] = -u[1];
    u[2] += M_PI;
  }
  TheveninFit fit;
  fit.equivalent.v_th = Complex(u[0], 0.0);
  fit.equivalent.z_th = u[1] * std::exp(Complex(0, u[2]));
  fit.v_angles = {u[3], u[4], u[5]};
  fit.residual = fn;
  return fit;
}

}  // namespace dsched::dev
