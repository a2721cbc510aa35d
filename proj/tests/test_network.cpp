#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dsched/csv.hpp"
#include "dsched/network.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace dsched;
using namespace dsched::net;

namespace {

dev::OltcTransformer table_transformer() {
  dev::OltcTransformer x;
  x.z_sr_n = Complex(0.01, 0.05);
  x.r_c_n = 100.0;
  x.x_m_n = 95.0;
  x.tap_min = -3;
  x.tap_max = 3;
  x.delta_u = 0.01;
  return x;
}

// two-bus feeder: upstream + transformer at bus 0, a line to bus 1
AcSystem two_bus_system(const dev::OltcGroup& group) {
  AcSystem sys;
  sys.n_bus = 2;
  sys.lines.push_back({0, 1, 0.02, 0.04, 10.0});
  sys.oltc = &group;
  sys.taps = Vec::Zero(1);
  return sys;
}

}  // namespace

TEST_CASE("single line stamp matches complex arithmetic") {
  std::vector<Line> lines{{0, 1, 0.01, 0.05, 1.0}};
  auto y = assemble_ybus(2, lines);
  Complex ys = 1.0 / Complex(0.01, 0.05);
  CHECK(y.y_xx()(0, 0) == doctest::Approx(ys.real()).epsilon(1e-12));
  CHECK(y.y_xx()(0, 0) == doctest::Approx(3.84615384).epsilon(1e-7));
  CHECK(y.y_yx()(0, 0) == doctest::Approx(-19.2307692).epsilon(1e-7));
  CHECK(y.y_xx()(0, 1) == doctest::Approx(-ys.real()).epsilon(1e-12));
  CHECK(y.y_yx()(1, 0) == doctest::Approx(-ys.imag()).epsilon(1e-12));
}

TEST_CASE("shunt-only single bus network") {
  auto y = assemble_ybus(1, {}, {{0, Complex(0.0, 0.1)}});
  CHECK(y.y_xx()(0, 0) == 0.0);
  CHECK(y.y_yx()(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("parallel transformers stamp twice the single admittance") {
  dev::OltcTransformer x = table_transformer();
  auto pi = dev::oltc_pi_admittances(0.0, x);
  auto y1 = assemble_ybus(2, {}, {}, {{0, 1, pi}});
  auto y2 = assemble_ybus(2, {}, {}, {{0, 1, pi}, {0, 1, pi}});
  CHECK((y2.y_xx() - 2.0 * y1.y_xx()).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((y2.y_yx() - 2.0 * y1.y_yx()).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("zero impedance and disconnected graphs are rejected") {
  CHECK_THROWS_AS(assemble_ybus(2, {{0, 1, 0.0, 0.0, 1.0}}), InvalidInput);
  CHECK_THROWS_AS(assemble_ybus(3, {{0, 1, 0.01, 0.02, 1.0}}), InvalidInput);
}

TEST_CASE("block structure: diagonal blocks are identical") {
  std::vector<Line> lines{{0, 1, 0.01, 0.05, 1.0}, {1, 2, 0.02, 0.01, 1.0}};
  auto y = assemble_ybus(3, lines);
  Mat full = y.full();
  CHECK((full.topLeftCorner(3, 3) - full.bottomRightCorner(3, 3)).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK((full.topRightCorner(3, 3) + full.bottomLeftCorner(3, 3)).cwiseAbs().maxCoeff() ==
        0.0);
}

TEST_CASE("sensitivity with no devices is zero") {
  auto y = assemble_ybus(2, {{0, 1, 0.01, 0.05, 1.0}}, {{0, Complex(0, 5.0)}});
  std::vector<DeviceStamp> devices(1);
  devices[0].bus = 1;
  devices[0].a.setZero();
  devices[0].b = Mat::Zero(2, 1);
  auto sys = build_sensitivity(y, devices, {});
  CHECK(sys.s.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sensitivity scales linearly in the control vector") {
  auto y = assemble_ybus(2, {{0, 1, 0.01, 0.05, 1.0}}, {{0, Complex(0, 5.0)}});
  std::vector<DeviceStamp> devices(1);
  devices[0].bus = 1;
  devices[0].a.setZero();
  devices[0].b = Mat::Identity(2, 2);
  auto sys = build_sensitivity(y, devices, {});
  Vec u(2);
  u << 0.02, -0.01;
  Vec dv_full = sys.s * u;
  Vec dv_half = sys.s * (0.5 * u);
  CHECK((dv_half - 0.5 * dv_full).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("flat no-flow solution for an ideal transformer and no load") {
  dev::OltcTransformer x;
  x.z_sr_n = Complex(0.01, 0.05);
  x.tap_min = -3;
  x.tap_max = 3;
  x.delta_u = 0.01;  // lossless core
  dev::OltcGroup group;
  group.units = {x};
  group.secondary_bus = 0;
  AcSystem sys = two_bus_system(group);
  dev::TheveninEquivalent th;
  th.v_th = Complex(1.0, 0.0);
  th.z_th = Complex(0.0, 0.0);
  auto op = ac_resolve(sys, th);
  CHECK(std::abs(op.v[0] - Complex(1, 0)) <= 1e-9);
  CHECK(std::abs(op.v[1] - Complex(1, 0)) <= 1e-9);
  CHECK(op.kirchhoff_residual <= 1e-9);
}

TEST_CASE("doubling a load's impedance share admittance lowers the bus voltage") {
  dev::OltcTransformer x = table_transformer();
  dev::OltcGroup group;
  group.units = {x};
  group.secondary_bus = 0;
  dev::TheveninEquivalent th;
  th.v_th = Complex(1.0, 0.0);
  th.z_th = Complex(0.01, 0.05);

  AcSystem sys = two_bus_system(group);
  load::ZpModel m;
  m.ap = 1.0;
  m.cp = 0.0;
  m.aq = 1.0;
  m.cq = 0.0;
  m.p0 = 0.3;
  m.q0 = 0.1;
  sys.loads.push_back({1, m});
  double v1 = std::abs(ac_resolve(sys, th).v[1]);
  sys.loads[0].model.p0 *= 2.0;
  sys.loads[0].model.q0 *= 2.0;
  double v2 = std::abs(ac_resolve(sys, th).v[1]);
  CHECK(v2 < v1);
}

TEST_CASE("ac_resolve is deterministic") {
  dev::OltcTransformer x = table_transformer();
  dev::OltcGroup group;
  group.units = {x, x};
  group.secondary_bus = 0;
  dev::TheveninEquivalent th;
  th.v_th = Complex(1.01, 0.0);
  th.z_th = Complex(0.01, 0.05);
  AcSystem sys = two_bus_system(group);
  load::ZpModel m;
  m.ap = 0.5;
  m.cp = 0.5;
  m.aq = 0.5;
  m.cq = 0.5;
  m.p0 = 0.25;
  m.q0 = 0.12;
  sys.loads.push_back({1, m});
  auto op1 = ac_resolve(sys, th);
  auto op2 = ac_resolve(sys, th);
  CHECK(std::memcmp(op1.v.data(), op2.v.data(), sizeof(Complex) * op1.v.size()) == 0);
}

TEST_CASE("upstream current map agrees with the solved operating point") {
  dev::OltcTransformer x = table_transformer();
  dev::OltcGroup group;
  group.units = {x};
  group.secondary_bus = 0;
  dev::TheveninEquivalent th;
  th.v_th = Complex(1.0, 0.0);
  th.z_th = Complex(0.01, 0.05);
  AcSystem sys = two_bus_system(group);
  load::ZpModel m;
  m.ap = 0.0;
  m.cp = 1.0;
  m.aq = 0.0;
  m.cq = 1.0;
  m.p0 = 0.2;
  m.q0 = 0.05;
  sys.loads.push_back({1, m});
  auto op = ac_resolve(sys, th);
  auto map = dev::oltc_current_map(sys.taps, op.v[0], group, th);
  // the injection at the secondary must equal C V + D V_th at the solution
  CHECK(std::abs(map.i - (map.c * op.v[0] + map.d * th.v_th)) <= 1e-12);
  // and match the network-side current drawn through the line
  Complex y_line = 1.0 / Complex(0.02, 0.04);
  Complex i_line = (op.v[0] - op.v[1]) * y_line;
  CHECK(std::abs(map.i - i_line) <= 1e-9);
}

TEST_CASE("first-order fidelity: sensitivity error shrinks quadratically") {
  dev::OltcTransformer xf = table_transformer();
  dev::OltcGroup group;
  group.units = {xf, xf};
  group.secondary_bus = 0;
  dev::TheveninEquivalent th;
  th.v_th = Complex(1.0, 0.0);
  th.z_th = Complex(0.01, 0.05);

  AcSystem sys;
  sys.n_bus = 3;
  sys.lines.push_back({0, 1, 0.03, 0.06, 10.0});
  sys.lines.push_back({1, 2, 0.05, 0.05, 10.0});
  sys.oltc = &group;
  sys.taps = Vec::Zero(1);
  load::ZpModel m;
  m.ap = 0.55;
  m.cp = 0.45;
  m.aq = 0.55;
  m.cq = 0.45;
  m.p0 = 0.15;
  m.q0 = 0.06;
  sys.loads.push_back({1, m});
  sys.loads.push_back({2, m});
  sys.injections.push_back({2, 0.05, 0.01});
  sys.cbs.push_back({2, 2 * 0.01});

  auto op = ac_resolve(sys, th);

  // stamps around the anchor, canonical control order: tap, st, der P, der Q
  auto build = [&]() {
    std::vector<DeviceStamp> devices;
    auto up = dev::oltc_perturbed_pair(sys.taps, op.v[0], group, th);
    devices.push_back({0, up.a, up.b});
    dev::CapacitorBank cb;
    cb.y_step = 0.01;
    cb.st_min = 0;
    cb.st_max = 5;
    auto cp = dev::cb_perturbed_pair(2.0, op.v[2], cb);
    devices.push_back({2, cp.a, cp.b});
    Complex i_der = std::conj(Complex(0.05, 0.01) / op.v[2]);
    auto dp = dev::der_perturbed_pair(op.v[2], i_der);
    devices.push_back({2, dp.a, dp.b});
    std::vector<LoadStamp> loads;
    for (const auto& ld : sys.loads) {
      Complex vb = op.v[ld.bus];
      auto [p, q] = load::zp_demand(ld.model, vb);
      Complex i = -std::conj(Complex(p, q)) / std::conj(vb);
      loads.push_back({ld.bus, load::load_perturbed_matrix(ld.model, vb, i)});
    }
    auto ybus = assemble_ybus(sys.n_bus, sys.lines, sys.shunts);
    return build_sensitivity(ybus, devices, loads);
  };
  auto sens = build();
  REQUIRE(sens.n_controls() == 4);

  Vec dir(4);
  dir << 1.0, 1.0, 0.6, -0.8;  // tap, st, dP, dQ

  auto error_at = [&](double eps) {
    Vec u = eps * dir;
    AcSystem moved = sys;
    moved.taps[0] += u[0];
    moved.cbs[0].y_total = (2.0 + u[1]) * 0.01;
    moved.injections[0].p += u[2];
    moved.injections[0].q += u[3];
    auto op2 = ac_resolve(moved, th);
    Vec dv_pred = sens.s * u;
    double err = 0.0;
    for (int b = 0; b < sys.n_bus; ++b) {
      Complex dv_true = op2.v[b] - op.v[b];
      err = std::max(err, std::abs(dv_true.real() - dv_pred[b]));
      err = std::max(err, std::abs(dv_true.imag() - dv_pred[sys.n_bus + b]));
    }
    return err;
  };

  double e1 = error_at(1e-2);
  double e2 = error_at(5e-3);
  double e3 = error_at(2.5e-3);
  CHECK(e1 / e2 >= 3.5);
  CHECK(e1 / e2 <= 4.5);
  CHECK(e2 / e3 >= 3.5);
  CHECK(e2 / e3 <= 4.5);

  // small dP alone stays within 1e-5 of the re-solve
  {
    Vec u = Vec::Zero(4);
    u[2] = 0.01;
    AcSystem moved = sys;
    moved.injections[0].p += 0.01;
    auto op2 = ac_resolve(moved, th);
    Vec dv_pred = sens.s * u;
    for (int b = 0; b < sys.n_bus; ++b) {
      CHECK(std::abs((op2.v[b] - op.v[b]).real() - dv_pred[b]) <= 1e-5);
      CHECK(std::abs((op2.v[b] - op.v[b]).imag() - dv_pred[sys.n_bus + b]) <= 1e-5);
    }
  }
}

TEST_CASE("singular sensitivity systems are rejected with a conditioning error") {
  // one bus with a shunt; a device stamp cancelling the shunt leaves Y - A = 0
  auto y = assemble_ybus(1, {}, {{0, Complex(0.5, 0.2)}});
  std::vector<DeviceStamp> devices(1);
  Mat full = y.full();
  devices[0].bus = 0;
  devices[0].a = full;
  devices[0].b = Mat::Zero(2, 1);
  CHECK_THROWS_AS(build_sensitivity(y, devices, {}), NumericalError);
}

TEST_CASE("matrix csv dump is readable") {
  Mat m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  auto path = std::filesystem::temp_directory_path() / "dsched_mat_test.csv";
  io::write_matrix_csv(path, m);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "2,3");
  std::getline(in, line);
  CHECK(line == "1,2,3");
  std::filesystem::remove(path);
}
