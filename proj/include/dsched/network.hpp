#pragma once

#include <optional>
#include <vector>

#include "dsched/common.hpp"
#include "dsched/devices.hpp"
#include "dsched/loads.hpp"

namespace dsched::net {

struct Bus {
  int id = 0;
  double v_nominal = 1.0;
  double v_min = 0.95, v_max = 1.05;
  double penalty_weight = 0.0;
  void validate() const;
};

struct Line {
  int from = 0, to = 0;  // zero-based bus indices
  double r = 0.0, x = 0.0;
  double i_max = kInf;
  void validate(int n_bus) const;
};

struct Shunt {
  int bus = 0;
  Complex y{0, 0};
};

/// Transformer stamped directly into the bus matrix; both terminals are
/// network buses. Used when the primary node is modeled explicitly.
struct TransformerStamp {
  int primary = 0, secondary = 0;
  dev::PiAdmittances pi;
};

/// Real/imaginary block form of the bus admittance matrix; the 2N x 2N
/// stacked matrix is [[G, -B], [B, G]].
class AdmittanceBlocks {
 public:
  AdmittanceBlocks() = default;
  explicit AdmittanceBlocks(CMat y);

  int size() const { return static_cast<int>(g_.rows()); }
  const Mat& y_xx() const { return g_; }
  Mat y_xy() const { return -b_; }
  const Mat& y_yx() const { return b_; }
  const Mat& y_yy() const { return g_; }
  Mat full() const;
  CMat complex_matrix() const;

 private:
  Mat g_, b_;
};

/// Stamps lines, shunt elements and transformer pi models. Rejects
/// zero-impedance branches and disconnected graphs.
AdmittanceBlocks assemble_ybus(int n_bus, const std::vector<Line>& lines,
                               const std::vector<Shunt>& shunts = {},
                               const std::vector<TransformerStamp>& transformers = {});

/// Per-device first-order stamp at a bus: dI = a dV + b dU.
struct DeviceStamp {
  int bus = 0;
  Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
  Mat b;  // 2 x k, k columns appended to the global control vector in order
};

struct LoadStamp {
  int bus = 0;
  Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
};

/// Global perturbed voltage map dV = S * dU composed from the network blocks
/// and the device/load stamps: S = (Y - A)^{-1} B.
struct SensitivitySystem {
  Mat a_global;  // 2N x 2N
  Mat b_global;  // 2N x n_controls
  Mat s;         // 2N x n_controls
  int n_controls() const { return static_cast<int>(b_global.cols()); }
};

SensitivitySystem build_sensitivity(const AdmittanceBlocks& ybus,
                                    const std::vector<DeviceStamp>& devices,
                                    const std::vector<LoadStamp>& loads,
                                    double condition_limit = 1e12);

// ---------------------------------------------------------------------------
// Nonlinear operating-point solver
// ---------------------------------------------------------------------------

/// Full steady-state description used by the fixed-point solver: the passive
/// network plus every nonlinear device current law.
struct AcSystem {
  int n_bus = 0;
  std::vector<Line> lines;
  std::vector<Shunt> shunts;

  /// constant-PQ injections (dispatchable units, RES, SVR)
  struct PqInjection {
    int bus = 0;
    double p = 0, q = 0;
  };
  std::vector<PqInjection> injections;

  /// switched capacitors: injected current -j y_step st V
  struct CbState {
    int bus = 0;
    double y_total = 0;  // st * y_step
  };
  std::vector<CbState> cbs;

  /// voltage-dependent demands
  struct LoadState {
    int bus = 0;
    load::ZpModel model;
  };
  std::vector<LoadState> loads;

  /// upstream source + transformer group injecting at a bus (optional)
  const dev::OltcGroup* oltc = nullptr;
  Vec taps;  // per tap variable of the group
};

struct AcOptions {
  double tolerance = 1e-9;
  int max_iterations = 50;
};

struct OperatingPoint {
  CVec v;
  CVec i_inj;
  Vec controls;  // caller-defined control snapshot
  Complex v_primary{0, 0}, i_primary{0, 0};
  double p_upstream = 0, q_upstream = 0;  // at the transformer primary
  double kirchhoff_residual = 0;
  int iterations = 0;
};

/// Newton-Raphson on the stacked real/imaginary Kirchhoff residuals with a
/// flat start. Deterministic; throws on non-convergence.
OperatingPoint ac_resolve(const AcSystem& sys, const dev::TheveninEquivalent& th,
                          const AcOptions& opts = {});

}  // namespace dsched::net
