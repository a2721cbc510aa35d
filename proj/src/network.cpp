#include "dsched/network.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>

namespace dsched::net {

void Bus::validate() const {
  if (!(v_min < v_nominal && v_nominal < v_max))
    throw InvalidInput("bus " + std::to_string(id) + ": need v_min < v_nominal < v_max");
  if (penalty_weight < 0)
    throw InvalidInput("bus " + std::to_string(id) + ": negative penalty weight");
}

void Line::validate(int n_bus) const {
  if (from == to) throw InvalidInput("line endpoints coincide");
  if (from < 0 || to < 0 || from >= n_bus || to >= n_bus)
    throw InvalidInput("line endpoint outside bus range");
  if (r < 0) throw InvalidInput("line resistance negative");
  if (!(i_max > 0)) throw InvalidInput("line current limit must be positive");
}

AdmittanceBlocks::AdmittanceBlocks(CMat y) : g_(y.real()), b_(y.imag()) {}

Mat AdmittanceBlocks::full() const {
  const int n = size();
  Mat f(2 * n, 2 * n);
  f.topLeftCorner(n, n) = g_;
  f.topRightCorner(n, n) = -b_;
  f.bottomLeftCorner(n, n) = b_;
  f.bottomRightCorner(n, n) = g_;
  return f;
}

CMat AdmittanceBlocks::complex_matrix() const {
  return g_.cast<Complex>() + Complex(0, 1) * b_.cast<Complex>();
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  void join(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

AdmittanceBlocks assemble_ybus(int n_bus, const std::vector<Line>& lines,
                               const std::vector<Shunt>& shunts,
                               const std::vector<TransformerStamp>& transformers) {
  if (n_bus <= 0) throw InvalidInput("assemble_ybus: empty network");
  CMat y = CMat::Zero(n_bus, n_bus);
  UnionFind uf(n_bus);

  for (const auto& l : lines) {
    l.validate(n_bus);
    Complex z(l.r, l.x);
    if (z == Complex(0, 0))
      throw InvalidInput("assemble_ybus: zero-impedance line between buses " +
                         std::to_string(l.from) + " and " + std::to_string(l.to));
    Complex ys = 1.0 / z;
    y(l.from, l.from) += ys;
    y(l.to, l.to) += ys;
    y(l.from, l.to) -= ys;
    y(l.to, l.from) -= ys;
    uf.join(l.from, l.to);
  }
  for (const auto& s : shunts) {
    if (s.bus < 0 || s.bus >= n_bus) throw InvalidInput("shunt bus outside range");
    y(s.bus, s.bus) += s.y;
  }
  for (const auto& t : transformers) {
    if (t.primary < 0 || t.primary >= n_bus || t.secondary < 0 || t.secondary >= n_bus)
      throw InvalidInput("transformer terminal outside bus range");
    y(t.primary, t.primary) += t.pi.y_sr + t.pi.y_p;
    y(t.secondary, t.secondary) += t.pi.y_sr + t.pi.y_s;
    y(t.primary, t.secondary) -= t.pi.y_sr;
    y(t.secondary, t.primary) -= t.pi.y_sr;
    uf.join(t.primary, t.secondary);
  }

  if (n_bus > 1) {
    int root = uf.find(0);
    for (int i = 1; i < n_bus; ++i)
      if (uf.find(i) != root)
        throw InvalidInput("assemble_ybus: network graph is disconnected");
  }
  return AdmittanceBlocks(std::move(y));
}

SensitivitySystem build_sensitivity(const AdmittanceBlocks& ybus,
                                    const std::vector<DeviceStamp>& devices,
                                    const std::vector<LoadStamp>& loads,
                                    double condition_limit) {
  const int n = ybus.size();
  SensitivitySystem sys;
  sys.a_global = Mat::Zero(2 * n, 2 * n);

  auto stamp_a = [&](int bus, const Eigen::Matrix2d& a) {
    if (bus < 0 || bus >= n) throw InvalidInput("sensitivity stamp outside bus range");
    sys.a_global(bus, bus) += a(0, 0);
    sys.a_global(bus, n + bus) += a(0, 1);
    sys.a_global(n + bus, bus) += a(1, 0);
    sys.a_global(n + bus, n + bus) += a(1, 1);
  };

  int n_controls = 0;
  for (const auto& d : devices) n_controls += static_cast<int>(d.b.cols());
  sys.b_global = Mat::Zero(2 * n, n_controls);

  int col = 0;
  for (const auto& d : devices) {
    stamp_a(d.bus, d.a);
    for (int k = 0; k < d.b.cols(); ++k, ++col) {
      sys.b_global(d.bus, col) = d.b(0, k);
      sys.b_global(n + d.bus, col) = d.b(1, k);
    }
  }
  for (const auto& l : loads) stamp_a(l.bus, l.a);

  Mat m = ybus.full() - sys.a_global;
  Eigen::PartialPivLU<Mat> lu(m);
  Mat minv = lu.inverse();
  double cond = m.cwiseAbs().rowwise().sum().maxCoeff() *
                minv.cwiseAbs().rowwise().sum().maxCoeff();
  if (!std::isfinite(cond) || cond > condition_limit)
    throw NumericalError(
        "build_sensitivity: (Y - A) is ill-conditioned (estimate " +
        std::to_string(cond) + "); operating point is degenerate");

  sys.s = lu.solve(sys.b_global);
  if (n_controls > 0) {
    double resid = (m * sys.s - sys.b_global).norm() /
                   std::max(1.0, sys.b_global.norm());
    if (resid > 1e-10)
      throw NumericalError("build_sensitivity: solve residual " + std::to_string(resid));
  }
  return sys;
}

// ---------------------------------------------------------------------------
// ac_resolve
// ---------------------------------------------------------------------------

namespace {

struct InjectionEval {
  CVec i;          // injected currents
  Mat a;           // 2N x 2N Jacobian of injections w.r.t. (Vx, Vy)
};

InjectionEval eval_injections(const AcSystem& sys, const dev::TheveninEquivalent& th,
                              const CVec& v) {
  const int n = sys.n_bus;
  InjectionEval ev;
  ev.i = CVec::Zero(n);
  ev.a = Mat::Zero(2 * n, 2 * n);

  auto stamp = [&](int bus, const Eigen::Matrix2d& a) {
    ev.a(bus, bus) += a(0, 0);
    ev.a(bus, n + bus) += a(0, 1);
    ev.a(n + bus, bus) += a(1, 0);
    ev.a(n + bus, n + bus) += a(1, 1);
  };

  for (const auto& inj : sys.injections) {
    Complex s(inj.p, inj.q);
    Complex vb = v[inj.bus];
    Complex i = std::conj(s / vb);
    ev.i[inj.bus] += i;
    stamp(inj.bus, dev::der_perturbed_pair(vb, i).a);
  }
  for (const auto& cb : sys.cbs) {
    Complex vb = v[cb.bus];
    ev.i[cb.bus] += Complex(0, -1) * cb.y_total * vb;
    Eigen::Matrix2d a;
    a << 0.0, cb.y_total, -cb.y_total, 0.0;
    stamp(cb.bus, a);
  }
  for (const auto& ld : sys.loads) {
    Complex vb = v[ld.bus];
    auto [p, q] = load::zp_demand(ld.model, vb);
    Complex i = -std::conj(Complex(p, q)) / std::conj(vb);
    ev.i[ld.bus] += i;
    stamp(ld.bus, load::load_perturbed_matrix(ld.model, vb, i));
  }
  if (sys.oltc) {
    auto map = dev::oltc_current_map(sys.taps, v[sys.oltc->secondary_bus], *sys.oltc, th);
    ev.i[sys.oltc->secondary_bus] += map.i;
    Eigen::Matrix2d a;
    a << map.c.real(), -map.c.imag(), map.c.imag(), map.c.real();
    stamp(sys.oltc->secondary_bus, a);
  }
  return ev;
}

}  // namespace

OperatingPoint ac_resolve(const AcSystem& sys, const dev::TheveninEquivalent& th,
                          const AcOptions& opts) {
  const int n = sys.n_bus;
  AdmittanceBlocks ybus = assemble_ybus(n, sys.lines, sys.shunts);
  Mat y_full = ybus.full();
  CMat y_c = ybus.complex_matrix();

  CVec v = CVec::Constant(n, Complex(1.0, 0.0));  // flat start
  double resid = kInf;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    InjectionEval ev = eval_injections(sys, th, v);
    CVec mismatch = y_c * v - ev.i;
    Vec f(2 * n);
    f.head(n) = mismatch.real();
    f.tail(n) = mismatch.imag();
    resid = f.cwiseAbs().maxCoeff();
    if (resid <= opts.tolerance) break;

    Mat jac = y_full - ev.a;
    Vec dv = jac.partialPivLu().solve(-f);
    if (!dv.allFinite())
      throw NumericalError("ac_resolve: Newton step is not finite");
    for (int b = 0; b < n; ++b) v[b] += Complex(dv[b], dv[n + b]);
  }
  if (resid > opts.tolerance)
    throw NumericalError("ac_resolve: no convergence after " +
                         std::to_string(opts.max_iterations) +
                         " iterations (residual " + std::to_string(resid) + ")");

  OperatingPoint op;
  op.v = v;
  InjectionEval ev = eval_injections(sys, th, v);
  op.i_inj = ev.i;
  op.kirchhoff_residual = resid;
  op.iterations = it;
  if (sys.oltc) {
    auto map = dev::oltc_current_map(sys.taps, v[sys.oltc->secondary_bus], *sys.oltc, th);
    op.v_primary = map.v_primary;
    op.i_primary = map.i_primary;
    Complex s = map.v_primary * std::conj(map.i_primary);
    op.p_upstream = s.real();
    op.q_upstream = s.imag();
  }
  return op;
}

}  // namespace dsched::net
