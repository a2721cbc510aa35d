#include "dsched/scheduler.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

namespace dsched::rhc {

namespace {

ControlLayout layout_of(const SystemModel& m) {
  ControlLayout lay;
  lay.n_taps = m.oltc.units.empty() ? 0 : m.oltc.n_tap_vars();
  lay.n_cbs = static_cast<int>(m.cbs.size());
  lay.n_ders = static_cast<int>(m.ders.size());
  lay.n_res = static_cast<int>(m.res_units.size());
  lay.n_svrs = static_cast<int>(m.svrs.size());
  return lay;
}

Vec controls_to_vector(const ControlLayout& lay, const ControlSettings& s) {
  Vec v = Vec::Zero(lay.physical());
  for (int k = 0; k < lay.n_taps; ++k) v[lay.tap(k)] = s.taps[k];
  for (int k = 0; k < lay.n_cbs; ++k) v[lay.cb(k)] = s.cb_steps[k];
  for (int k = 0; k < lay.n_ders; ++k) {
    v[lay.der_p(k)] = s.der_p[k];
    v[lay.der_q(k)] = s.der_q[k];
  }
  for (int k = 0; k < lay.n_res; ++k) v[lay.res_q(k)] = s.res_q[k];
  for (int k = 0; k < lay.n_svrs; ++k) v[lay.svr_q(k)] = s.svr_q[k];
  return v;
}

ControlSettings vector_to_controls(const ControlLayout& lay, const Vec& v) {
  ControlSettings s;
  s.taps.resize(lay.n_taps);
  s.cb_steps.resize(lay.n_cbs);
  s.der_p.resize(lay.n_ders);
  s.der_q.resize(lay.n_ders);
  s.res_q.resize(lay.n_res);
  s.svr_q.resize(lay.n_svrs);
  for (int k = 0; k < lay.n_taps; ++k) s.taps[k] = v[lay.tap(k)];
  for (int k = 0; k < lay.n_cbs; ++k) s.cb_steps[k] = v[lay.cb(k)];
  for (int k = 0; k < lay.n_ders; ++k) {
    s.der_p[k] = v[lay.der_p(k)];
    s.der_q[k] = v[lay.der_q(k)];
  }
  for (int k = 0; k < lay.n_res; ++k) s.res_q[k] = v[lay.res_q(k)];
  for (int k = 0; k < lay.n_svrs; ++k) s.svr_q[k] = v[lay.svr_q(k)];
  return s;
}

net::AcSystem make_ac_system(const SystemModel& m, const BlockData& data,
                             const ControlLayout& lay, const Vec& ctl) {
  net::AcSystem sys;
  sys.n_bus = m.n_bus();
  sys.lines = m.lines;
  sys.shunts = m.shunts;
  for (int k = 0; k < lay.n_ders; ++k)
    sys.injections.push_back({m.ders[k].bus, ctl[lay.der_p(k)], ctl[lay.der_q(k)]});
  for (int k = 0; k < lay.n_res; ++k)
    sys.injections.push_back({m.res_units[k].bus, data.res_p[k], ctl[lay.res_q(k)]});
  for (int k = 0; k < lay.n_svrs; ++k)
    sys.injections.push_back({m.svrs[k].bus, 0.0, ctl[lay.svr_q(k)]});
  for (int k = 0; k < lay.n_cbs; ++k)
    sys.cbs.push_back({m.cbs[k].bus, ctl[lay.cb(k)] * m.cbs[k].y_step});
  for (int b = 0; b < m.n_bus(); ++b) {
    if (data.p_base[b] == 0.0 && data.q_base[b] == 0.0) continue;
    load::ZpModel zp;
    zp.ap = data.ap[b];
    zp.cp = 1.0 - data.ap[b];
    zp.aq = data.aq[b];
    zp.cq = 1.0 - data.aq[b];
    zp.p0 = data.p_base[b];
    zp.q0 = data.q_base[b];
    zp.v0 = m.buses[b].v_nominal;
    sys.loads.push_back({b, zp});
  }
  if (!m.oltc.units.empty()) {
    sys.oltc = &m.oltc;
    sys.taps.resize(lay.n_taps);
    for (int k = 0; k < lay.n_taps; ++k) sys.taps[k] = ctl[lay.tap(k)];
  }
  return sys;
}

}  // namespace

// ---------------------------------------------------------------------------
// evaluator: per-point operating points and sensitivities
// ---------------------------------------------------------------------------

class DspEvaluator {
 public:
  DspEvaluator(const SystemModel& model, DspMap map)
      : model_(model), map_(std::move(map)) {}

  const DspMap& map() const { return map_; }

  void prepare(const Vec& x) {
    if (ops_valid_ && x.size() == x_.size() && x == x_) return;
    x_ = x;
    ops_valid_ = true;
    sens_valid_ = false;
    eval_ok_ = true;
    const int nb = static_cast<int>(map_.states.size());
    ops_.assign(nb, {});
    ok_.assign(nb, 1);
    int threads = std::min(model_.solver.threads, nb);
    auto worker = [&](int begin, int end) {
      for (int i = begin; i < end; ++i) {
        try {
          ops_[i] = resolve_block(i, x);
        } catch (const std::exception&) {
          ok_[i] = 0;
        }
      }
    };
    if (threads > 1) {
      std::vector<std::thread> pool;
      int chunk = (nb + threads - 1) / threads;
      for (int t = 0; t < threads; ++t)
        pool.emplace_back(worker, t * chunk, std::min(nb, (t + 1) * chunk));
      for (auto& th : pool) th.join();
    } else {
      worker(0, nb);
    }
    for (char o : ok_)
      if (!o) eval_ok_ = false;
  }

  bool valid() const { return eval_ok_; }

  const net::OperatingPoint& op(int state_block) const { return ops_[state_block]; }

  /// 2N x n_physical sensitivity of the state block, built lazily
  const Mat& sensitivity(int state_block) {
    ensure_sens();
    return sens_[state_block];
  }

  const dev::UpstreamCurrentMap& upstream(int state_block) {
    ensure_sens();
    return ups_[state_block];
  }

  /// complex voltage delta map at a bus: row pair of the sensitivity
  Complex dv_bus(int state_block, int bus, int control) {
    const Mat& s = sensitivity(state_block);
    return Complex(s(bus, control), s(model_.n_bus() + bus, control));
  }

  dev::TheveninEquivalent block_thevenin(int state_block) const {
    const auto& d = map_.states[state_block].data;
    return {Complex(d.v_th, 0.0), d.z_th};
  }

 private:
  net::OperatingPoint resolve_block(int i, const Vec& x) const {
    const auto& sb = map_.states[i];
    Vec ctl = x.segment(map_.var(sb.control_block, 0), map_.layout.physical());
    net::AcSystem sys = make_ac_system(model_, sb.data, map_.layout, ctl);
    net::AcOptions opts;
    opts.tolerance = model_.solver.ac_tolerance;
    opts.max_iterations = model_.solver.ac_max_iterations;
    auto op = net::ac_resolve(sys, block_thevenin_of(sb), opts);
    op.controls = ctl;
    return op;
  }

  dev::TheveninEquivalent block_thevenin_of(const DspMap::StateBlock& sb) const {
    return {Complex(sb.data.v_th, 0.0), sb.data.z_th};
  }

  void ensure_sens() {
    if (sens_valid_) return;
    if (!ops_valid_)
      throw NumericalError("DspEvaluator: sensitivities requested before prepare");
    const int nb = static_cast<int>(map_.states.size());
    sens_.assign(nb, Mat());
    ups_.assign(nb, {});
    const int np = map_.layout.physical();
    net::AdmittanceBlocks ybus =
        net::assemble_ybus(model_.n_bus(), model_.lines, model_.shunts);
    for (int i = 0; i < nb; ++i) {
      const auto& sb = map_.states[i];
      const auto& op = ops_[i];
      std::vector<net::DeviceStamp> devices;
      const auto& lay = map_.layout;
      // canonical control order: taps, cb steps, der P/Q, res Q, svr Q
      if (lay.n_taps > 0) {
        auto pair = dev::oltc_perturbed_pair(op.controls.head(lay.n_taps),
                                             op.v[model_.oltc.secondary_bus],
                                             model_.oltc, block_thevenin_of(sb));
        devices.push_back({model_.oltc.secondary_bus, pair.a, pair.b});
      }
      for (int k = 0; k < lay.n_cbs; ++k) {
        auto pair = dev::cb_perturbed_pair(op.controls[lay.cb(k)],
                                           op.v[m_bus(model_.cbs[k].bus)], model_.cbs[k]);
        devices.push_back({model_.cbs[k].bus, pair.a, pair.b});
      }
      for (int k = 0; k < lay.n_ders; ++k) {
        Complex vb = op.v[model_.ders[k].bus];
        Complex s(op.controls[lay.der_p(k)], op.controls[lay.der_q(k)]);
        auto pair = dev::der_perturbed_pair(vb, std::conj(s / vb));
        devices.push_back({model_.ders[k].bus, pair.a, pair.b});
      }
      for (int k = 0; k < lay.n_res; ++k) {
        Complex vb = op.v[model_.res_units[k].bus];
        Complex s(sb.data.res_p[k], op.controls[lay.res_q(k)]);
        auto pair = dev::der_perturbed_pair(vb, std::conj(s / vb));
        devices.push_back({model_.res_units[k].bus, pair.a, pair.b.col(1)});
      }
      for (int k = 0; k < lay.n_svrs; ++k) {
        Complex vb = op.v[model_.svrs[k].bus];
        Complex s(0.0, op.controls[lay.svr_q(k)]);
        auto pair = dev::der_perturbed_pair(vb, std::conj(s / vb));
        devices.push_back({model_.svrs[k].bus, pair.a, pair.b.col(1)});
      }
      std::vector<net::LoadStamp> loads;
      for (int b = 0; b < model_.n_bus(); ++b) {
        if (sb.data.p_base[b] == 0.0 && sb.data.q_base[b] == 0.0) continue;
        load::ZpModel zp;
        zp.ap = sb.data.ap[b];
        zp.cp = 1.0 - sb.data.ap[b];
        zp.aq = sb.data.aq[b];
        zp.cq = 1.0 - sb.data.aq[b];
        zp.p0 = sb.data.p_base[b];
        zp.q0 = sb.data.q_base[b];
        zp.v0 = model_.buses[b].v_nominal;
        Complex vb = op.v[b];
        auto [p, q] = load::zp_demand(zp, vb);
        Complex iv = -std::conj(Complex(p, q)) / std::conj(vb);
        loads.push_back({b, load::load_perturbed_matrix(zp, vb, iv)});
      }
      auto sens = net::build_sensitivity(ybus, devices, loads,
                                         model_.solver.condition_limit);
      // reorder device columns into the canonical physical layout
      Mat s_full = Mat::Zero(2 * model_.n_bus(), np);
      int col = 0;
      auto take = [&](int target, int count) {
        s_full.middleCols(target, count) = sens.s.middleCols(col, count);
        col += count;
      };
      if (lay.n_taps) take(lay.tap(0), lay.n_taps);
      dev::UpstreamCurrentMap up;
      if (lay.n_taps)
        up = dev::oltc_current_map(op.controls.head(lay.n_taps),
                                   op.v[model_.oltc.secondary_bus], model_.oltc,
                                   block_thevenin_of(sb));
      for (int k = 0; k < lay.n_cbs; ++k) take(lay.cb(k), 1);
      for (int k = 0; k < lay.n_ders; ++k) take(lay.der_p(k), 2);
      for (int k = 0; k < lay.n_res; ++k) take(lay.res_q(k), 1);
      for (int k = 0; k < lay.n_svrs; ++k) take(lay.svr_q(k), 1);
      sens_[i] = std::move(s_full);
      ups_[i] = up;
    }
    sens_valid_ = true;
  }

  int m_bus(int b) const { return b; }

  const SystemModel& model_;
  DspMap map_;
  Vec x_;
  bool ops_valid_ = false, sens_valid_ = false, eval_ok_ = true;
  std::vector<net::OperatingPoint> ops_;
  std::vector<char> ok_;
  std::vector<Mat> sens_;
  std::vector<dev::UpstreamCurrentMap> ups_;
};

// ---------------------------------------------------------------------------
// upstream power sensitivities for the objective
// ---------------------------------------------------------------------------

namespace {

struct UpstreamPower {
  double p = 0, q = 0;
  Vec dp, dq;   // per physical control of the block
  Mat hp, hq;   // second-order product terms
};

UpstreamPower upstream_power(const SystemModel& model, DspEvaluator& ev,
                             int state_block) {
  const auto& lay = ev.map().layout;
  const int np = lay.physical();
  UpstreamPower out;
  out.dp = Vec::Zero(np);
  out.dq = Vec::Zero(np);
  out.hp = Mat::Zero(np, np);
  out.hq = Mat::Zero(np, np);
  if (lay.n_taps == 0) return out;

  const auto& op = ev.op(state_block);
  const auto& up = ev.upstream(state_block);
  dev::TheveninEquivalent th = ev.block_thevenin(state_block);
  const int sec = model.oltc.secondary_bus;

  Complex v_p = up.v_primary, i_p = up.i_primary;
  Complex s = v_p * std::conj(i_p);
  out.p = s.real();
  out.q = s.imag();

  Vec taps = op.controls.head(lay.n_taps);
  dev::PiAdmittances pi = model.oltc.combined_pi(taps);
  Complex v_s = op.v[sec];

  // central differences of the combined admittances in each tap variable
  auto pi_derivative = [&](int k) {
    const double h = 1e-7;
    Vec tp = taps, tm = taps;
    tp[k] += h;
    tm[k] -= h;
    dev::PiAdmittances pp = model.oltc.combined_pi(tp);
    dev::PiAdmittances pm = model.oltc.combined_pi(tm);
    return std::array<Complex, 3>{(pp.y_sr - pm.y_sr) / (2 * h),
                                  (pp.y_p - pm.y_p) / (2 * h),
                                  (pp.y_s - pm.y_s) / (2 * h)};
  };

  std::vector<Complex> dvp(np, Complex(0, 0)), dip(np, Complex(0, 0));
  if (th.z_th == Complex(0, 0)) {
    // stiff source: V_p is clamped, I_p = Y_p V_th + (V_th - V_s) Y_sr
    for (int c = 0; c < np; ++c) {
      Complex dvs = ev.dv_bus(state_block, sec, c);
      dip[c] = -pi.y_sr * dvs;
      if (c < lay.n_taps) {
        auto d = pi_derivative(c);
        dip[c] += d[1] * th.v_th + d[0] * (th.v_th - v_s);
      }
    }
  } else {
    Complex y_th = 1.0 / th.z_th;
    Complex den = y_th + pi.y_p + pi.y_sr;
    for (int c = 0; c < np; ++c) {
      Complex dvs = ev.dv_bus(state_block, sec, c);
      Complex dn = pi.y_sr * dvs;
      Complex dden(0, 0);
      if (c < lay.n_taps) {
        auto d = pi_derivative(c);
        dn += d[0] * v_s;
        dden = d[1] + d[0];
      }
      dvp[c] = (dn - v_p * dden) / den;
      dip[c] = -y_th * dvp[c];
    }
  }

  for (int c = 0; c < np; ++c) {
    Complex ds = dvp[c] * std::conj(i_p) + v_p * std::conj(dip[c]);
    out.dp[c] = ds.real();
    out.dq[c] = ds.imag();
  }
  // exact curvature of the bilinear product in the first-order maps
  for (int c1 = 0; c1 < np; ++c1)
    for (int c2 = c1; c2 < np; ++c2) {
      Complex dd = dvp[c1] * std::conj(dip[c2]) + dvp[c2] * std::conj(dip[c1]);
      out.hp(c1, c2) = out.hp(c2, c1) = dd.real();
      out.hq(c1, c2) = out.hq(c2, c1) = dd.imag();
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// problem assembly
// ---------------------------------------------------------------------------

namespace {

BlockData block_data_from_values(const SystemState& state, const Vec& values,
                                 int hour_of_block);

/// uncertain-vector layout: per-bus demand bases, then a'_p shift, a'_q
/// shift, |V_th|, Z_th scale, rho_A, rho_R, then per-RES production
struct UncertainLayout {
  int n_load = 0, n_res = 0;
  int ap_shift() const { return n_load; }
  int aq_shift() const { return n_load + 1; }
  int v_th() const { return n_load + 2; }
  int z_scale() const { return n_load + 3; }
  int rho_a() const { return n_load + 4; }
  int rho_r() const { return n_load + 5; }
  int res(int k) const { return n_load + 6 + k; }
  int dim() const { return n_load + 6 + n_res; }
};

UncertainLayout uncertain_layout(const SystemModel& m) {
  UncertainLayout ul;
  for (const auto& z : m.zip)
    if (z.p0 != 0.0 || z.q0 != 0.0) ++ul.n_load;
  ul.n_res = static_cast<int>(m.res_units.size());
  return ul;
}

std::vector<int> load_buses(const SystemModel& m) {
  std::vector<int> idx;
  for (int b = 0; b < m.n_bus(); ++b)
    if (m.zip[b].p0 != 0.0 || m.zip[b].q0 != 0.0) idx.push_back(b);
  return idx;
}

double pv_available(const SystemModel& m, int k, int hour) {
  return m.res_units[k].s_max * m.profile(m.pv_factor, hour);
}

}  // namespace

scen::UncertaintyDescriptor uncertainty_descriptor(const SystemState& state) {
  const SystemModel& m = *state.model;
  UncertainLayout ul = uncertain_layout(m);
  scen::UncertaintyDescriptor d;
  const int n = ul.dim();
  d.autocorr = Vec::Zero(n);
  d.cross_corr = Mat::Identity(n, n);
  d.lo = Vec::Constant(n, -kInf);
  d.hi = Vec::Constant(n, kInf);
  auto lb = load_buses(m);
  for (int i = 0; i < ul.n_load; ++i) {
    d.names.push_back("load_bus_" + std::to_string(m.buses[lb[i]].id));
    d.autocorr[i] = m.uncertainty.load_autocorr;
    d.lo[i] = 0.0;
    for (int j = 0; j < ul.n_load; ++j)
      if (i != j) d.cross_corr(i, j) = m.uncertainty.cross_bus_load_corr;
  }
  d.names.resize(n);
  d.names[ul.ap_shift()] = "load_ap_share";
  d.names[ul.aq_shift()] = "load_aq_share";
  d.names[ul.v_th()] = "v_th";
  d.names[ul.z_scale()] = "z_th_scale";
  d.names[ul.rho_a()] = "price_active";
  d.names[ul.rho_r()] = "price_reactive";
  d.lo[ul.ap_shift()] = 0.0;
  d.hi[ul.ap_shift()] = 1.0;
  d.lo[ul.aq_shift()] = 0.0;
  d.hi[ul.aq_shift()] = 1.0;
  d.lo[ul.v_th()] = 0.5;
  d.lo[ul.z_scale()] = 0.0;
  d.lo[ul.rho_a()] = 0.0;
  d.lo[ul.rho_r()] = 0.0;
  d.autocorr[ul.v_th()] = m.uncertainty.vth_autocorr;
  d.autocorr[ul.z_scale()] = m.uncertainty.zth_autocorr;
  d.autocorr[ul.rho_a()] = m.uncertainty.rho_a_autocorr;
  d.autocorr[ul.rho_r()] = m.uncertainty.rho_r_autocorr;
  for (int k = 0; k < ul.n_res; ++k) {
    d.names[ul.res(k)] = "res_" + std::to_string(k);
    d.lo[ul.res(k)] = 0.0;
  }
  d.sigma0_frac = m.solver.sigma0_frac;
  d.growth = m.solver.sigma_growth;
  return d;
}

std::function<Vec(int)> stage_mean_fn(const SystemState& state) {
  const SystemState* st = &state;
  return [st](int offset) {
    const SystemModel& m = *st->model;
    UncertainLayout ul = uncertain_layout(m);
    auto lb = load_buses(m);
    int hour = st->hour + offset;
    Vec mu(ul.dim());
    double lf = m.profile(m.load_factor, hour);
    for (int i = 0; i < ul.n_load; ++i) mu[i] = m.zip[lb[i]].p0 * lf;
    // believed impedance shares drift around the current belief
    double ap = 0, aq = 0;
    if (!st->belief.load_shape.empty()) {
      for (int b : lb) {
        ap += st->belief.load_shape[b].ap;
        aq += st->belief.load_shape[b].aq;
      }
      ap /= lb.size();
      aq /= lb.size();
    }
    mu[ul.ap_shift()] = ap;
    mu[ul.aq_shift()] = aq;
    mu[ul.v_th()] = m.profile(m.v_th_profile, hour);
    mu[ul.z_scale()] = 1.0;
    mu[ul.rho_a()] = m.profile(m.price_a, hour);
    mu[ul.rho_r()] = m.profile(m.price_r, hour);
    for (int k = 0; k < ul.n_res; ++k) mu[ul.res(k)] = pv_available(m, k, hour);
    return mu;
  };
}

Vec realized_values(const SystemState& state, int hour) {
  const SystemModel& m = *state.model;
  UncertainLayout ul = uncertain_layout(m);
  auto lb = load_buses(m);
  Vec v(ul.dim());
  double lf = m.profile(m.load_factor, hour);
  for (int i = 0; i < ul.n_load; ++i) v[i] = m.zip[lb[i]].p0 * lf;
  double ap = 0, aq = 0;
  if (!state.belief.load_shape.empty()) {
    for (int b : lb) {
      ap += state.belief.load_shape[b].ap;
      aq += state.belief.load_shape[b].aq;
    }
    ap /= lb.size();
    aq /= lb.size();
  }
  v[ul.ap_shift()] = ap;
  v[ul.aq_shift()] = aq;
  v[ul.v_th()] = m.profile(m.v_th_profile, hour);
  v[ul.z_scale()] = 1.0;
  v[ul.rho_a()] = m.profile(m.price_a, hour);
  v[ul.rho_r()] = m.profile(m.price_r, hour);
  for (int k = 0; k < ul.n_res; ++k) v[ul.res(k)] = pv_available(m, k, hour);
  return v;
}

scen::ScenarioTree window_tree(const SystemState& state, int horizon, int n_scenarios,
                               std::uint64_t seed) {
  scen::TreeConfig cfg;
  cfg.branching = {std::max(1, n_scenarios)};
  for (int t = 1; t < horizon; ++t) cfg.branching.push_back(1);
  cfg.candidate_pool = state.model->solver.candidate_pool;
  cfg.max_cov_pairs = state.model->solver.max_cov_pairs;
  return scen::build_tree(realized_values(state, state.hour - 1), horizon,
                          uncertainty_descriptor(state), stage_mean_fn(state), cfg,
                          seed);
}

namespace {

BlockData block_data_from_values(const SystemState& state, const Vec& values,
                                 int /*hour_of_block*/) {
  const SystemModel& m = *state.model;
  UncertainLayout ul = uncertain_layout(m);
  auto lb = load_buses(m);
  BlockData d;
  d.p_base = Vec::Zero(m.n_bus());
  d.q_base = Vec::Zero(m.n_bus());
  d.ap = Vec::Zero(m.n_bus());
  d.aq = Vec::Zero(m.n_bus());
  for (int i = 0; i < ul.n_load; ++i) {
    int b = lb[i];
    double p = std::max(0.0, values[i]);
    d.p_base[b] = p;
    d.q_base[b] = m.zip[b].p0 != 0.0 ? p * (m.zip[b].q0 / m.zip[b].p0) : 0.0;
  }
  double ap_shift = std::clamp(values[ul.ap_shift()], 0.0, 1.0);
  double aq_shift = std::clamp(values[ul.aq_shift()], 0.0, 1.0);
  double ap_mean = 0, aq_mean = 0;
  for (int b : lb) {
    ap_mean += state.belief.load_shape[b].ap;
    aq_mean += state.belief.load_shape[b].aq;
  }
  ap_mean /= lb.size();
  aq_mean /= lb.size();
  for (int b = 0; b < m.n_bus(); ++b) {
    d.ap[b] = std::clamp(state.belief.load_shape[b].ap + (ap_shift - ap_mean), 0.0, 1.0);
    d.aq[b] = std::clamp(state.belief.load_shape[b].aq + (aq_shift - aq_mean), 0.0, 1.0);
  }
  d.rho_a = std::max(0.0, values[ul.rho_a()]);
  d.rho_r = std::max(0.0, values[ul.rho_r()]);
  d.v_th = values[ul.v_th()];
  Complex z_base = state.belief.thevenin.z_th;
  d.z_th = z_base * std::max(0.0, values[ul.z_scale()]);
  d.res_p = Vec::Zero(ul.n_res);
  for (int k = 0; k < ul.n_res; ++k)
    d.res_p[k] = std::clamp(values[ul.res(k)], 0.0, m.res_units[k].s_max);
  return d;
}

struct BuildScratch {
  std::vector<dev::CapacityPolygon> polygons;
};

DspProblem assemble_dsp(const SystemState& state, DspMap map,
                        bool dcc_in_objective) {
  const SystemModel& m = *state.model;
  const SolverConfig& cfg = m.solver;
  const ControlLayout& lay = map.layout;
  const int np = lay.physical();
  const int nc = map.nc;
  const int n_bus = m.n_bus();

  DspProblem out;

  // anchor every block at the applied settings to pick tracked rows
  Vec ctl0 = controls_to_vector(lay, state.applied);
  for (auto& sb : map.states) {
    net::AcSystem sys = make_ac_system(m, sb.data, lay, ctl0);
    net::AcOptions aopts;
    aopts.tolerance = cfg.ac_tolerance;
    aopts.max_iterations = cfg.ac_max_iterations;
    net::OperatingPoint op;
    bool solved = true;
    try {
      op = net::ac_resolve(sys, {Complex(sb.data.v_th, 0.0), sb.data.z_th}, aopts);
    } catch (const std::exception&) {
      solved = false;
    }
    if (n_bus <= cfg.voltage_track_all_below || !solved) {
      sb.tracked_buses.resize(n_bus);
      for (int b = 0; b < n_bus; ++b) sb.tracked_buses[b] = b;
    } else {
      std::vector<std::pair<double, int>> mag(n_bus);
      for (int b = 0; b < n_bus; ++b) mag[b] = {std::abs(op.v[b]), b};
      std::vector<char> in(n_bus, 0);
      for (int b = 0; b < n_bus; ++b) {
        if (mag[b].first <= m.buses[b].v_min + cfg.voltage_row_margin) in[b] = 1;
        if (mag[b].first >= m.buses[b].v_max - cfg.voltage_row_margin) in[b] = 1;
      }
      std::sort(mag.begin(), mag.end());
      for (int k = 0; k < std::min(cfg.voltage_track_min, n_bus); ++k) {
        in[mag[k].second] = 1;
        in[mag[n_bus - 1 - k].second] = 1;
      }
      for (int b = 0; b < n_bus; ++b)
        if (in[b]) sb.tracked_buses.push_back(b);
    }
    if (solved) {
      for (std::size_t l = 0; l < m.lines.size(); ++l) {
        const auto& ln = m.lines[l];
        if (!std::isfinite(ln.i_max)) continue;
        Complex i = (op.v[ln.from] - op.v[ln.to]) / Complex(ln.r, ln.x);
        if (std::abs(i) >= cfg.current_row_margin * ln.i_max)
          sb.tracked_lines.push_back(static_cast<int>(l));
      }
    }
  }

  auto evaluator = std::make_shared<DspEvaluator>(m, map);
  const DspMap& mp = evaluator->map();

  tra::ConstrainedProblem p;
  p.n = mp.n_vars();
  p.lower = Vec::Constant(p.n, -kInf);
  p.upper = Vec::Constant(p.n, kInf);

  // bounds: controls and indicators per control block
  for (int cb = 0; cb < mp.n_control_blocks; ++cb) {
    for (int k = 0; k < lay.n_taps; ++k) {
      p.lower[mp.var(cb, lay.tap(k))] = m.oltc.tap_lo(k);
      p.upper[mp.var(cb, lay.tap(k))] = m.oltc.tap_hi(k);
    }
    for (int k = 0; k < lay.n_cbs; ++k) {
      p.lower[mp.var(cb, lay.cb(k))] = m.cbs[k].st_min;
      p.upper[mp.var(cb, lay.cb(k))] = m.cbs[k].st_max;
    }
    for (int k = 0; k < lay.n_ders; ++k) {
      p.lower[mp.var(cb, lay.der_p(k))] = 0.0;
      p.upper[mp.var(cb, lay.der_p(k))] = m.ders[k].p_max;
      p.lower[mp.var(cb, lay.der_q(k))] = -m.ders[k].q_max;
      p.upper[mp.var(cb, lay.der_q(k))] = m.ders[k].q_max;
    }
    for (int k = 0; k < lay.n_svrs; ++k) {
      p.lower[mp.var(cb, lay.svr_q(k))] = -m.svrs[k].q_max;
      p.upper[mp.var(cb, lay.svr_q(k))] = m.svrs[k].q_max;
    }
    for (int k = 0; k < lay.n_taps; ++k) {
      p.lower[mp.var(cb, lay.u_tap(k))] = 0.0;
      p.upper[mp.var(cb, lay.u_tap(k))] = 1.0;
    }
    for (int k = 0; k < lay.n_cbs; ++k) {
      p.lower[mp.var(cb, lay.u_cb(k))] = 0.0;
      p.upper[mp.var(cb, lay.u_cb(k))] = 1.0;
    }
  }
  // RES reactive bounds depend on each block's available production
  for (const auto& sb : mp.states) {
    for (int k = 0; k < lay.n_res; ++k) {
      auto [qlo, qhi] = dev::res_reactive_bounds(m.res_units[k], sb.data.res_p[k]);
      int idx = mp.var(sb.control_block, lay.res_q(k));
      p.lower[idx] = std::max(p.lower[idx] == -kInf ? qlo : p.lower[idx], qlo);
      p.upper[idx] = std::min(p.upper[idx] == kInf ? qhi : p.upper[idx], qhi);
    }
  }

  // objective: probability- and discount-weighted operation cost plus
  // actuation charges; soft voltage penalties enter via the rows
  DspEvaluator* ev = evaluator.get();
  const double base = m.base_mva;
  std::vector<double> disc(mp.n_control_blocks);
  for (int cb = 0; cb < mp.n_control_blocks; ++cb)
    disc[cb] = std::pow(cfg.discount_decay, mp.period_of[cb] - 1);

  const double dcc_w = dcc_in_objective ? 1.0 : 0.0;

  p.prepare = [ev](const Vec& x) { ev->prepare(x); };
  p.evaluation_valid = [ev]() { return ev->valid(); };

  p.objective.value = [ev, &m, base, dcc_w](const Vec& x) {
    const DspMap& mp2 = ev->map();
    const ControlLayout& lay2 = mp2.layout;
    double f = 0;
    for (std::size_t i = 0; i < mp2.states.size(); ++i) {
      const auto& sb = mp2.states[i];
      const auto& op = ev->op(i);
      double d = std::pow(m.solver.discount_decay, sb.period - 1);
      double oc = sb.data.rho_a * op.p_upstream + sb.data.rho_r * op.q_upstream;
      for (int k = 0; k < lay2.n_ders; ++k)
        oc += m.ders[k].price * x[mp2.var(sb.control_block, lay2.der_p(k))];
      f += sb.weight * d * oc * base;
    }
    for (int cb = 0; cb < mp2.n_control_blocks; ++cb) {
      double w = mp2.weight[cb] * dcc_w;
      for (int k = 0; k < lay2.n_taps; ++k)
        f += w * m.oltc.units.front().tap_change_cost * x[mp2.var(cb, lay2.u_tap(k))];
      for (int k = 0; k < lay2.n_cbs; ++k)
        f += w * m.cbs[k].step_change_cost * x[mp2.var(cb, lay2.u_cb(k))];
    }
    return f;
  };

  p.objective.gradient = [ev, &m, base, dcc_w](const Vec& x, tra::SparseGrad* g) {
    const DspMap& mp2 = ev->map();
    const ControlLayout& lay2 = mp2.layout;
    const int np2 = lay2.physical();
    (void)x;
    for (std::size_t i = 0; i < mp2.states.size(); ++i) {
      const auto& sb = mp2.states[i];
      double d = std::pow(m.solver.discount_decay, sb.period - 1);
      double w = sb.weight * d * base;
      UpstreamPower upw = upstream_power(m, *ev, static_cast<int>(i));
      for (int c = 0; c < np2; ++c) {
        double val = w * (sb.data.rho_a * upw.dp[c] + sb.data.rho_r * upw.dq[c]);
        if (val != 0.0) g->push_back({mp2.var(sb.control_block, c), val});
      }
      for (int k = 0; k < lay2.n_ders; ++k)
        g->push_back({mp2.var(sb.control_block, lay2.der_p(k)), w * m.ders[k].price});
    }
    for (int cb = 0; cb < mp2.n_control_blocks; ++cb) {
      double w = mp2.weight[cb] * dcc_w;
      for (int k = 0; k < lay2.n_taps; ++k)
        g->push_back({mp2.var(cb, lay2.u_tap(k)),
                      w * m.oltc.units.front().tap_change_cost});
      for (int k = 0; k < lay2.n_cbs; ++k)
        g->push_back({mp2.var(cb, lay2.u_cb(k)), w * m.cbs[k].step_change_cost});
    }
  };

  p.objective.hessian = [ev, &m, base](const Vec& x,
                                       std::vector<Eigen::Triplet<double>>* h) {
    (void)x;
    const DspMap& mp2 = ev->map();
    const ControlLayout& lay2 = mp2.layout;
    const int np2 = lay2.physical();
    // per-control-block accumulated product curvature, clamped PSD
    std::vector<Mat> acc(mp2.n_control_blocks, Mat::Zero(np2, np2));
    for (std::size_t i = 0; i < mp2.states.size(); ++i) {
      const auto& sb = mp2.states[i];
      double d = std::pow(m.solver.discount_decay, sb.period - 1);
      double w = sb.weight * d * base;
      UpstreamPower upw = upstream_power(m, *ev, static_cast<int>(i));
      acc[sb.control_block] += w * (sb.data.rho_a * upw.hp + sb.data.rho_r * upw.hq);
    }
    for (int cb = 0; cb < mp2.n_control_blocks; ++cb) {
      Eigen::SelfAdjointEigenSolver<Mat> es(acc[cb]);
      Vec ev2 = es.eigenvalues().cwiseMax(0.0);
      Mat psd = es.eigenvectors() * ev2.asDiagonal() * es.eigenvectors().transpose();
      for (int a = 0; a < np2; ++a)
        for (int b = 0; b < np2; ++b)
          if (psd(a, b) != 0.0)
            h->push_back({mp2.var(cb, a), mp2.var(cb, b), psd(a, b)});
    }
  };

  // rows
  std::vector<tra::ConstraintRow> rows;

  // voltage rows (soft, two-sided)
  for (std::size_t i = 0; i < mp.states.size(); ++i) {
    const auto& sb = mp.states[i];
    for (int b : sb.tracked_buses) {
      tra::ConstraintRow row;
      int sbi = static_cast<int>(i);
      row.value = [ev, sbi, b](const Vec&) { return std::norm(ev->op(sbi).v[b]); };
      row.gradient = [ev, sbi, b, np, &m](const Vec&, tra::SparseGrad* g) {
        const DspMap& mp2 = ev->map();
        const auto& op = ev->op(sbi);
        const Mat& s = ev->sensitivity(sbi);
        double vx = op.v[b].real(), vy = op.v[b].imag();
        int n2 = m.n_bus();
        for (int c = 0; c < np; ++c) {
          double val = 2 * vx * s(b, c) + 2 * vy * s(n2 + b, c);
          if (val != 0.0)
            g->push_back({mp2.var(mp2.states[sbi].control_block, c), val});
        }
      };
      row.lo = m.buses[b].v_min * m.buses[b].v_min;
      row.hi = m.buses[b].v_max * m.buses[b].v_max;
      double eta = m.buses[b].penalty_weight > 0 ? m.buses[b].penalty_weight
                                                 : cfg.eta_default;
      row.soft_weight = eta * sb.weight;
      rows.push_back(std::move(row));
    }
    // current rows (hard, upper side)
    for (int l : sb.tracked_lines) {
      const auto& ln = m.lines[l];
      tra::ConstraintRow row;
      int sbi = static_cast<int>(i);
      int from = ln.from, to = ln.to;
      row.value = [ev, sbi, from, to](const Vec&) {
        const auto& op = ev->op(sbi);
        return std::norm(op.v[from] - op.v[to]);
      };
      row.gradient = [ev, sbi, from, to, np, &m](const Vec&, tra::SparseGrad* g) {
        const DspMap& mp2 = ev->map();
        const auto& op = ev->op(sbi);
        const Mat& s = ev->sensitivity(sbi);
        Complex dv = op.v[from] - op.v[to];
        int n2 = m.n_bus();
        for (int c = 0; c < np; ++c) {
          double val = 2 * dv.real() * (s(from, c) - s(to, c)) +
                       2 * dv.imag() * (s(n2 + from, c) - s(n2 + to, c));
          if (val != 0.0)
            g->push_back({mp2.var(mp2.states[sbi].control_block, c), val});
        }
      };
      row.hi = (ln.r * ln.r + ln.x * ln.x) * ln.i_max * ln.i_max;
      rows.push_back(std::move(row));
    }
  }

  // capacity polygons per DER per control block (linear, hard)
  BuildScratch scratch;
  for (const auto& der : m.ders)
    scratch.polygons.push_back(
        dev::capacity_polygon(der.s_max, der.theta_max, der.polygon_lines));
  for (int cb = 0; cb < mp.n_control_blocks; ++cb) {
    for (int k = 0; k < lay.n_ders; ++k) {
      const auto& poly = scratch.polygons[k];
      int ip = mp.var(cb, lay.der_p(k));
      int iq = mp.var(cb, lay.der_q(k));
      for (auto& [slope, intercept] : poly.halfplanes) {
        double mm = slope, bb = intercept;
        tra::ConstraintRow lo_row;
        lo_row.value = [ip, iq, mm](const Vec& x) { return mm * x[ip] - x[iq]; };
        lo_row.gradient = [ip, iq, mm](const Vec&, tra::SparseGrad* g) {
          g->push_back({ip, mm});
          g->push_back({iq, -1.0});
        };
        lo_row.hi = -bb;
        rows.push_back(std::move(lo_row));
        tra::ConstraintRow hi_row;
        hi_row.value = [ip, iq, mm](const Vec& x) { return mm * x[ip] + x[iq]; };
        hi_row.gradient = [ip, iq, mm](const Vec&, tra::SparseGrad* g) {
          g->push_back({ip, mm});
          g->push_back({iq, 1.0});
        };
        hi_row.hi = -bb;
        rows.push_back(std::move(hi_row));
      }
      double wt = poly.wedge_tan;
      tra::ConstraintRow w1;
      w1.value = [ip, iq, wt](const Vec& x) { return x[iq] - wt * x[ip]; };
      w1.gradient = [ip, iq, wt](const Vec&, tra::SparseGrad* g) {
        g->push_back({iq, 1.0});
        g->push_back({ip, -wt});
      };
      w1.hi = 0.0;
      rows.push_back(std::move(w1));
      tra::ConstraintRow w2;
      w2.value = [ip, iq, wt](const Vec& x) { return -x[iq] - wt * x[ip]; };
      w2.gradient = [ip, iq, wt](const Vec&, tra::SparseGrad* g) {
        g->push_back({iq, -1.0});
        g->push_back({ip, -wt});
      };
      w2.hi = 0.0;
      rows.push_back(std::move(w2));
    }
  }

  // change-indicator coupling rows (hard): |x_t - x_{t-1}| <= u * jump
  auto add_change_rows = [&](int cb, int var_off, int u_off, double prev_const,
                             int prev_var, double jump) {
    int xv = mp.var(cb, var_off);
    int uv = mp.var(cb, u_off);
    tra::ConstraintRow up;
    up.value = [xv, uv, prev_var, jump](const Vec& x) {
      double prev = prev_var >= 0 ? x[prev_var] : 0.0;
      return x[xv] - prev - jump * x[uv];
    };
    up.gradient = [xv, uv, prev_var, jump](const Vec&, tra::SparseGrad* g) {
      g->push_back({xv, 1.0});
      if (prev_var >= 0) g->push_back({prev_var, -1.0});
      g->push_back({uv, -jump});
    };
    up.hi = prev_var >= 0 ? 0.0 : prev_const;
    rows.push_back(std::move(up));
    tra::ConstraintRow dn;
    dn.value = [xv, uv, prev_var, jump](const Vec& x) {
      double prev = prev_var >= 0 ? x[prev_var] : 0.0;
      return prev - x[xv] - jump * x[uv];
    };
    dn.gradient = [xv, uv, prev_var, jump](const Vec&, tra::SparseGrad* g) {
      g->push_back({xv, -1.0});
      if (prev_var >= 0) g->push_back({prev_var, 1.0});
      g->push_back({uv, -jump});
    };
    dn.hi = prev_var >= 0 ? 0.0 : -prev_const;
    rows.push_back(std::move(dn));
  };

  for (int cb = 0; cb < mp.n_control_blocks; ++cb) {
    int parent = mp.parent[cb];
    for (int k = 0; k < lay.n_taps; ++k) {
      double jump = m.oltc.units.front().range_jump();
      if (parent < 0)
        add_change_rows(cb, lay.tap(k), lay.u_tap(k), state.applied.taps[k], -1, jump);
      else
        add_change_rows(cb, lay.tap(k), lay.u_tap(k), 0.0,
                        mp.var(parent, lay.tap(k)), jump);
    }
    for (int k = 0; k < lay.n_cbs; ++k) {
      double jump = m.cbs[k].range_jump();
      if (parent < 0)
        add_change_rows(cb, lay.cb(k), lay.u_cb(k), state.applied.cb_steps[k], -1, jump);
      else
        add_change_rows(cb, lay.cb(k), lay.u_cb(k), 0.0, mp.var(parent, lay.cb(k)),
                        jump);
    }
  }

  // per-scenario actuation caps
  {
    int n_scen = 0;
    for (int cb = 0; cb < mp.n_control_blocks; ++cb)
      n_scen = std::max(n_scen, mp.scenario_of[cb] + 1);
    auto add_cap_row = [&](const std::vector<int>& u_vars, double cap) {
      tra::ConstraintRow row;
      auto vars = u_vars;
      row.value = [vars](const Vec& x) {
        double s = 0;
        for (int v : vars) s += x[v];
        return s;
      };
      row.gradient = [vars](const Vec&, tra::SparseGrad* g) {
        for (int v : vars) g->push_back({v, 1.0});
      };
      row.hi = cap;
      rows.push_back(std::move(row));
    };
    int tap_cap = m.oltc.units.empty() ? -1 : m.oltc.units.front().max_ops_per_horizon;
    for (int s = 0; s < std::max(1, n_scen); ++s) {
      for (int k = 0; k < lay.n_taps; ++k) {
        if (tap_cap < 0) continue;
        std::vector<int> u_vars;
        for (int cb = 0; cb < mp.n_control_blocks; ++cb)
          if (mp.scenario_of[cb] == -1 || mp.scenario_of[cb] == s)
            u_vars.push_back(mp.var(cb, lay.u_tap(k)));
        add_cap_row(u_vars, tap_cap);
      }
      for (int k = 0; k < lay.n_cbs; ++k) {
        if (cfg.cb_ops_cap < 0) continue;
        std::vector<int> u_vars;
        for (int cb = 0; cb < mp.n_control_blocks; ++cb)
          if (mp.scenario_of[cb] == -1 || mp.scenario_of[cb] == s)
            u_vars.push_back(mp.var(cb, lay.u_cb(k)));
        add_cap_row(u_vars, cfg.cb_ops_cap);
      }
    }
  }

  p.rows = std::move(rows);
  out.nlp = tra::to_equality_form(std::move(p));
  out.evaluator = evaluator;
  out.map = mp;

  // start point: applied settings everywhere, slacks closing the rows
  Vec x0 = Vec::Zero(out.nlp->num_vars());
  for (int cb = 0; cb < mp.n_control_blocks; ++cb) {
    x0.segment(mp.var(cb, 0), np) = ctl0;
    // clamp RES bounds
    for (int k = 0; k < lay.n_res; ++k) {
      int idx = mp.var(cb, lay.res_q(k));
      x0[idx] = std::clamp(x0[idx], out.nlp->lower()[idx], out.nlp->upper()[idx]);
    }
  }
  // close slacks against the evaluated rows
  {
    auto ev0 = out.nlp->evaluate(x0);
    const auto& layrows = out.nlp->layout();
    for (std::size_t r = 0; r < layrows.size(); ++r) {
      const auto& lr = layrows[r];
      if (lr.g_upper >= 0 && lr.slack_upper >= 0) {
        double resid = -ev0.g[lr.g_upper];  // g = expr + s - hi at s = 0
        if (resid >= 0) {
          x0[lr.slack_upper] = resid;
        } else if (lr.soft_upper >= 0) {
          x0[lr.soft_upper] = -resid;
        }
      }
      if (lr.g_lower >= 0 && lr.slack_lower >= 0) {
        double resid = ev0.g[lr.g_lower];  // g = expr - s - lo at s = 0
        if (resid >= 0) {
          x0[lr.slack_lower] = resid;
        } else if (lr.soft_lower >= 0) {
          x0[lr.soft_lower] = -resid;
        }
      }
    }
  }
  out.x0 = x0;

  // branch-and-cut wiring
  out.minlp.nlp = out.nlp.get();
  out.minlp.lower = out.nlp->lower();
  out.minlp.upper = out.nlp->upper();
  for (int cb = 0; cb < mp.n_control_blocks; ++cb) {
    for (int k = 0; k < lay.n_taps; ++k) {
      out.minlp.discrete.push_back(mp.var(cb, lay.tap(k)));
      out.minlp.discrete.push_back(mp.var(cb, lay.u_tap(k)));
    }
    for (int k = 0; k < lay.n_cbs; ++k) {
      out.minlp.discrete.push_back(mp.var(cb, lay.cb(k)));
      out.minlp.discrete.push_back(mp.var(cb, lay.u_cb(k)));
    }
  }
  auto nlp_ptr = out.nlp;
  out.minlp.max_penalty = [nlp_ptr](const Vec& x) { return nlp_ptr->max_penalty(x); };

  // implied change indicators once tap/step variables are pinned
  {
    DspMap map_copy = mp;
    ControlSettings applied = state.applied;
    out.minlp.presolve_bounds = [map_copy, applied](Vec* lo, Vec* hi) {
      const ControlLayout& l2 = map_copy.layout;
      auto pinned = [&](int idx, double* value) {
        if ((*hi)[idx] - (*lo)[idx] <= 1e-9) {
          *value = 0.5 * ((*lo)[idx] + (*hi)[idx]);
          return true;
        }
        return false;
      };
      for (int cb = 0; cb < map_copy.n_control_blocks; ++cb) {
        int parent = map_copy.parent[cb];
        auto fix_u = [&](int var_off, int u_off, double prev_applied) {
          int xv = map_copy.var(cb, var_off);
          double here, there = prev_applied;
          if (!pinned(xv, &here)) return;
          if (parent >= 0 && !pinned(map_copy.var(parent, var_off), &there)) return;
          int uv = map_copy.var(cb, u_off);
          if (std::abs(here - there) > 1e-9) {
            (*lo)[uv] = std::max((*lo)[uv], 1.0);
          } else {
            (*hi)[uv] = std::min((*hi)[uv], (*lo)[uv] > 0.5 ? (*hi)[uv] : 0.0);
          }
        };
        for (int k = 0; k < l2.n_taps; ++k)
          fix_u(l2.tap(k), l2.u_tap(k), applied.taps[k]);
        for (int k = 0; k < l2.n_cbs; ++k)
          fix_u(l2.cb(k), l2.u_cb(k), applied.cb_steps[k]);
      }
    };
  }

  out.minlp.milp_builder = nullptr;
  out.minlp.milp_to_start = nullptr;
  return out;
}

DspMap make_map(const SystemState& state, const scen::ScenarioTree& tree) {
  const SystemModel& m = *state.model;
  DspMap map;
  map.layout = layout_of(m);
  map.nc = map.layout.with_indicators();
  const int n_scen = static_cast<int>(tree.paths.size());
  const int horizon = tree.horizon;

  // control blocks: 0 = shared first period; then per (scenario, period>=2)
  map.n_control_blocks = 1 + (horizon - 1) * n_scen;
  map.parent.assign(map.n_control_blocks, -1);
  map.weight.assign(map.n_control_blocks, 1.0);
  map.scenario_of.assign(map.n_control_blocks, -1);
  map.period_of.assign(map.n_control_blocks, 1);
  auto block_of = [&](int s, int t) {  // t = 1..horizon
    if (t == 1) return 0;
    return 1 + s * (horizon - 1) + (t - 2);
  };
  for (int s = 0; s < n_scen; ++s) {
    for (int t = 2; t <= horizon; ++t) {
      int cb = block_of(s, t);
      map.parent[cb] = block_of(s, t - 1);
      map.weight[cb] = tree.paths[s].probability;
      map.scenario_of[cb] = s;
      map.period_of[cb] = t;
    }
  }

  for (int s = 0; s < n_scen; ++s) {
    for (int t = 1; t <= horizon; ++t) {
      DspMap::StateBlock sb;
      sb.control_block = block_of(s, t);
      sb.scenario = s;
      sb.period = t;
      sb.weight = tree.paths[s].probability;
      const auto& node = tree.nodes[tree.paths[s].nodes[t - 1]];
      sb.data = block_data_from_values(state, node.values, state.hour + t - 1);
      map.states.push_back(std::move(sb));
    }
  }
  return map;
}

}  // namespace

DspProblem build_stochastic_dsp(const SystemState& state, const scen::ScenarioTree& tree,
                                bool dcc_in_objective) {
  if (tree.paths.empty()) throw InvalidInput("build_stochastic_dsp: empty tree");
  return assemble_dsp(state, make_map(state, tree), dcc_in_objective);
}

DspProblem build_deterministic_dsp(const SystemState& state, int horizon,
                                   bool dcc_in_objective) {
  // degenerate one-path tree through the forecast means
  scen::TreeConfig cfg;
  cfg.branching = {1};
  auto tree = scen::build_tree(realized_values(state, state.hour - 1), horizon,
                               uncertainty_descriptor(state), stage_mean_fn(state),
                               cfg, state.model->solver.seed);
  return build_stochastic_dsp(state, tree, dcc_in_objective);
}

// ---------------------------------------------------------------------------
// plant and receding-horizon loop
// ---------------------------------------------------------------------------

net::OperatingPoint plant_resolve(const SystemState& state, int hour,
                                  const ControlSettings& settings, double demand_scale) {
  const SystemModel& m = *state.model;
  const ControlLayout lay = layout_of(m);
  BlockData data;
  data.p_base = Vec::Zero(m.n_bus());
  data.q_base = Vec::Zero(m.n_bus());
  data.ap = Vec::Zero(m.n_bus());
  data.aq = Vec::Zero(m.n_bus());
  double lf = m.profile(m.load_factor, hour) * demand_scale;
  for (int b = 0; b < m.n_bus(); ++b) {
    data.p_base[b] = m.zip[b].p0 * lf;
    data.q_base[b] = m.zip[b].q0 * lf;
    data.ap[b] = state.plant_load_shape[b].ap;
    data.aq[b] = state.plant_load_shape[b].aq;
  }
  data.v_th = m.profile(m.v_th_profile, hour);
  data.z_th = m.z_th_true;
  data.res_p = Vec::Zero(lay.n_res);
  for (int k = 0; k < lay.n_res; ++k) data.res_p[k] = pv_available(m, k, hour);

  net::AcSystem sys = make_ac_system(m, data, lay, controls_to_vector(lay, settings));
  net::AcOptions opts;
  opts.tolerance = m.solver.ac_tolerance;
  opts.max_iterations = m.solver.ac_max_iterations;
  return net::ac_resolve(sys, {Complex(data.v_th, 0.0), data.z_th}, opts);
}

SystemState initial_state(const SystemModel& model, const ControlSettings& initial) {
  SystemState st;
  st.model = &model;
  st.hour = 1;
  st.applied = initial;
  st.plant_load_shape.resize(model.n_bus());
  for (int b = 0; b < model.n_bus(); ++b)
    st.plant_load_shape[b] = load::zip_to_zp(model.zip[b]);
  st.plant_thevenin = {Complex(model.profile(model.v_th_profile, 0), 0.0),
                       model.z_th_true};
  st.belief.load_shape = st.plant_load_shape;
  st.belief.thevenin = st.plant_thevenin;
  return st;
}

Costs compute_costs(const std::vector<WindowResult>& windows) {
  Costs c;
  for (const auto& w : windows) {
    c.oc += w.oc;
    c.dcc += w.dcc;
    c.total += w.total;
    c.losses_mwh += w.losses_mwh;
    c.violations += w.violations;
  }
  return c;
}

namespace {

double count_dcc(const SystemModel& m, const ControlSettings& prev,
                 const ControlSettings& next) {
  double dcc = 0;
  for (int k = 0; k < prev.taps.size(); ++k)
    if (std::lround(prev.taps[k]) != std::lround(next.taps[k]))
      dcc += m.oltc.units.front().tap_change_cost;
  for (int k = 0; k < prev.cb_steps.size(); ++k)
    if (std::lround(prev.cb_steps[k]) != std::lround(next.cb_steps[k]))
      dcc += m.cbs[k].step_change_cost;
  return dcc;
}

struct PlantMeasurements {
  dev::PrimaryMeasurement upstream;
  std::vector<load::Measurement> loads;  // per bus
};

PlantMeasurements measure(const SystemModel& m, const net::OperatingPoint& op,
                          const SystemState& state, int hour, double demand_scale) {
  PlantMeasurements meas;
  meas.upstream = {std::abs(op.v_primary), std::abs(op.i_primary),
                   std::arg(op.i_primary) - std::arg(op.v_primary)};
  meas.loads.resize(m.n_bus());
  double lf = m.profile(m.load_factor, hour) * demand_scale;
  for (int b = 0; b < m.n_bus(); ++b) {
    load::ZpModel zp = state.plant_load_shape[b];
    zp.p0 = m.zip[b].p0 * lf;
    zp.q0 = m.zip[b].q0 * lf;
    double mag = std::abs(op.v[b]);
    load::Measurement mm;
    mm.v_mag = mag;
    if (zp.p0 != 0.0 || zp.q0 != 0.0) {
      auto [pd, qd] = load::zp_demand(zp, op.v[b]);
      mm.p_d = pd;
      mm.q_d = qd;
    }
    meas.loads[b] = mm;
  }
  return meas;
}

}  // namespace

WindowResult run_window(SystemState& state, const RunConfig& cfg) {
  const SystemModel& m = *state.model;
  const ControlLayout lay = layout_of(m);
  auto t_start = std::chrono::steady_clock::now();
  WindowResult res;
  res.window = state.hour;

  // study-mode belief overrides
  SystemState solve_state = state;
  if (cfg.model_neglects_voltage_dependence) {
    for (auto& zp : solve_state.belief.load_shape) {
      zp.ap = 0.0;
      zp.cp = 1.0;
      zp.aq = 0.0;
      zp.cq = 1.0;
    }
  }
  if (cfg.model_ignores_upstream_impedance) {
    // believe a stiff source pinned at the measured primary voltage
    auto op0 = plant_resolve(state, state.hour, state.applied, cfg.demand_scale);
    solve_state.belief.thevenin = {Complex(std::abs(op0.v_primary), 0.0),
                                   Complex(0.0, 0.0)};
    solve_state.belief.thevenin_fixed_to_measured = true;
  }

  auto solve_once = [&](std::uint64_t seed, const Vec* warm) {
    // scale profiles through a shadow model is avoided: scaling enters the
    // block data through demand_scale/price_scale at tree evaluation time
    auto tree = window_tree(solve_state, cfg.horizon, cfg.scenarios, seed);
    // apply study scalings to every node
    for (auto& node : tree.nodes) {
      UncertainLayout ul = uncertain_layout(m);
      for (int i = 0; i < ul.n_load; ++i) node.values[i] *= cfg.demand_scale;
      node.values[ul.rho_a()] *= cfg.price_scale;
      node.values[ul.rho_r()] *= cfg.price_scale;
    }
    // inaccurate-upstream mode: the model believes a stiff source pinned at
    // the measured primary voltage
    if (cfg.model_ignores_upstream_impedance) {
      UncertainLayout ul = uncertain_layout(m);
      for (auto& node : tree.nodes) {
        node.values[ul.v_th()] = std::abs(solve_state.belief.thevenin.v_th);
        node.values[ul.z_scale()] = 0.0;
      }
    }
    DspProblem prob =
        build_stochastic_dsp(solve_state, tree, cfg.include_dcc_in_objective);
    bc::BcOptions opts;
    opts.node_limit = m.solver.bc_node_limit;
    opts.tol_int = m.solver.bc_tol_int;
    opts.prune_slack = m.solver.bc_prune_slack;
    opts.w_bar_lp = m.solver.bc_w_bar_lp;
    opts.penalty_tol = m.solver.bc_penalty_tol;
    opts.tra.alpha0 = m.solver.tra_alpha0;
    opts.tra.alpha_min = m.solver.tra_alpha_min;
    opts.tra.alpha_max = m.solver.tra_alpha_max;
    opts.tra.xi_vertical = m.solver.tra_xi_vertical;
    opts.tra.eps1 = m.solver.tra_eps1;
    opts.tra.eps2 = m.solver.tra_eps2;
    opts.tra.accept_ratio = m.solver.tra_accept;
    opts.tra.shrink_ratio = m.solver.tra_shrink;
    opts.tra.expand_ratio = m.solver.tra_expand;
    opts.tra.zeta_safety = m.solver.tra_zeta_safety;
    opts.tra.max_iterations = m.solver.tra_max_iterations;
    Vec x0 = prob.x0;
    if (warm && warm->size() == x0.size()) x0 = *warm;
    auto bc_res = bc::solve_bc(prob.minlp, x0, opts);
    return std::make_pair(std::move(prob), std::move(bc_res));
  };

  std::uint64_t seed = mix_seed(cfg.seed, state.hour);
  auto [prob, bc_res] = solve_once(seed, nullptr);
  res.bc_nodes = bc_res.node_count;
  res.nlp_solves = bc_res.nlp_solves;
  res.resolves = 1;

  Vec solution = bc_res.has_incumbent() ? bc_res.x : prob.x0;
  res.objective_model = bc_res.f;

  auto extract = [&](const DspProblem& pr, const Vec& x) {
    Vec ctl = x.segment(pr.map.var(0, 0), lay.physical());
    ControlSettings s = vector_to_controls(lay, ctl);
    for (int k = 0; k < s.taps.size(); ++k) s.taps[k] = std::round(s.taps[k]);
    for (int k = 0; k < s.cb_steps.size(); ++k) s.cb_steps[k] = std::round(s.cb_steps[k]);
    return s;
  };
  ControlSettings plan = extract(prob, solution);

  // plant application in stages: measurement, discrete moves, continuous moves
  auto op_before = plant_resolve(state, state.hour, state.applied, cfg.demand_scale);
  ControlSettings staged = state.applied;
  staged.taps = plan.taps;
  staged.cb_steps = plan.cb_steps;
  auto op_mid = plant_resolve(state, state.hour, staged, cfg.demand_scale);
  auto op_after = plant_resolve(state, state.hour, plan, cfg.demand_scale);

  // model updates from the simulated measurements
  bool drifted = false;
  auto m0 = measure(m, op_before, state, state.hour, cfg.demand_scale);
  auto m1 = measure(m, op_mid, state, state.hour, cfg.demand_scale);
  auto m2 = measure(m, op_after, state, state.hour, cfg.demand_scale);
  if (cfg.update_thevenin && !cfg.model_ignores_upstream_impedance) {
    try {
      auto fit = dev::estimate_thevenin({m0.upstream, m1.upstream, m2.upstream},
                                        m.solver.thevenin_residual_tol);
      auto& th = state.belief.thevenin;
      double dv = std::abs(std::abs(fit.equivalent.v_th) - std::abs(th.v_th)) /
                  std::max(1e-9, std::abs(th.v_th));
      double dz = std::abs(fit.equivalent.z_th - th.z_th) /
                  std::max(1e-9, std::abs(th.z_th));
      if (dv > m.solver.model_drift_tol || dz > m.solver.model_drift_tol) {
        drifted = true;
        res.thevenin_updated = true;
      }
      th = fit.equivalent;
    } catch (const std::exception&) {
      // insufficient excitation: keep the prior
    }
  }
  if (cfg.update_load_model) {
    for (int b = 0; b < m.n_bus(); ++b) {
      if (m.zip[b].p0 == 0.0 && m.zip[b].q0 == 0.0) continue;
      auto upd = load::update_load_model(state.belief.load_shape[b], m0.loads[b],
                                         m2.loads[b], m.solver.load_update_tol,
                                         m.solver.load_v_diff_min);
      if (upd.updated) {
        state.belief.load_shape[b].ap = upd.model.ap;
        state.belief.load_shape[b].cp = upd.model.cp;
        state.belief.load_shape[b].aq = upd.model.aq;
        state.belief.load_shape[b].cq = upd.model.cq;
        drifted = true;
        res.load_model_updated = true;
      }
    }
  }

  // one warm-started re-solve when the models moved
  if (drifted && m.solver.max_resolves_per_window > 0) {
    solve_state.belief = state.belief;
    if (cfg.model_neglects_voltage_dependence)
      for (auto& zp : solve_state.belief.load_shape) {
        zp.ap = 0.0;
        zp.cp = 1.0;
        zp.aq = 0.0;
        zp.cq = 1.0;
      }
    auto [prob2, bc2] = solve_once(mix_seed(seed, 0x5eed), &solution);
    res.bc_nodes += bc2.node_count;
    res.nlp_solves += bc2.nlp_solves;
    res.resolves += 1;
    if (bc2.has_incumbent()) {
      plan = extract(prob2, bc2.x);
      res.objective_model = bc2.f;
      staged = state.applied;
      staged.taps = plan.taps;
      staged.cb_steps = plan.cb_steps;
      op_after = plant_resolve(state, state.hour, plan, cfg.demand_scale);
    }
  }

  // plant-truth accounting for the applied hour
  double rho_a = m.profile(m.price_a, state.hour) * cfg.price_scale;
  double rho_r = m.profile(m.price_r, state.hour) * cfg.price_scale;
  double p_der = 0, der_cost = 0, p_res = 0, p_load = 0;
  for (int k = 0; k < lay.n_ders; ++k) {
    p_der += plan.der_p[k];
    der_cost += m.ders[k].price * plan.der_p[k];
  }
  for (int k = 0; k < lay.n_res; ++k) p_res += pv_available(m, k, state.hour);
  {
    double lf = m.profile(m.load_factor, state.hour) * cfg.demand_scale;
    for (int b = 0; b < m.n_bus(); ++b) {
      if (m.zip[b].p0 == 0.0 && m.zip[b].q0 == 0.0) continue;
      load::ZpModel zp = state.plant_load_shape[b];
      zp.p0 = m.zip[b].p0 * lf;
      zp.q0 = m.zip[b].q0 * lf;
      auto [pd, qd] = load::zp_demand(zp, op_after.v[b]);
      (void)qd;
      p_load += pd;
    }
  }
  res.oc = (rho_a * op_after.p_upstream + rho_r * op_after.q_upstream + der_cost) *
           m.base_mva;
  res.dcc = count_dcc(m, state.applied, plan);
  res.total = res.oc + res.dcc;
  res.losses_mwh = (op_after.p_upstream + p_der + p_res - p_load) * m.base_mva;
  res.voltage_profile = op_after.v.cwiseAbs();
  res.min_voltage_bus = 0;
  double vmin = kInf;
  for (int b = 0; b < m.n_bus(); ++b) {
    double mag = std::abs(op_after.v[b]);
    if (mag < vmin) {
      vmin = mag;
      res.min_voltage_bus = m.buses[b].id;
    }
    if (mag < m.buses[b].v_min - 1e-6 || mag > m.buses[b].v_max + 1e-6)
      ++res.violations;
  }
  res.applied = plan;

  state.applied = plan;
  state.hour += 1;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

std::vector<WindowResult> run_rhc(SystemState state, const RunConfig& cfg,
                                  std::vector<WindowResult>* out) {
  std::vector<WindowResult> local;
  std::vector<WindowResult>& results = out ? *out : local;
  for (int w = 0; w < cfg.windows; ++w) {
    try {
      results.push_back(run_window(state, cfg));
    } catch (const std::exception& e) {
      throw NumericalError("window " + std::to_string(w + 1) + ": " + e.what());
    }
  }
  return results;
}

}  // namespace dsched::rhc
