#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include "dsched/case_io.hpp"

using namespace dsched;
using namespace dsched::io;
using nlohmann::json;

namespace {
const char* kCasePath = DSCHED_DATA_DIR "/case33.json";
}

TEST_CASE("bundled case loads with the published device set") {
  CaseFile c = load_case(kCasePath);
  CHECK(c.model.n_bus() == 33);
  CHECK(c.model.lines.size() == 32);
  REQUIRE(c.model.oltc.units.size() == 2);
  CHECK(c.model.oltc.ganged);
  CHECK(c.model.oltc.units[0].z_sr_n == Complex(0.01, 0.05));
  CHECK(c.model.oltc.units[0].tap_min == -3);
  CHECK(c.model.oltc.units[0].tap_max == 3);
  CHECK(c.model.oltc.units[0].delta_u == 0.01);
  CHECK(c.model.oltc.units[0].tap_change_cost == 20.0);
  CHECK(c.model.z_th_true == Complex(0.01, 0.05));
  REQUIRE(c.model.ders.size() == 1);
  CHECK(c.model.buses[c.model.ders[0].bus].id == 14);
  CHECK(c.model.ders[0].s_max == doctest::Approx(0.05));
  REQUIRE(c.model.res_units.size() == 1);
  CHECK(c.model.buses[c.model.res_units[0].bus].id == 14);
  REQUIRE(c.model.svrs.size() == 1);
  CHECK(c.model.buses[c.model.svrs[0].bus].id == 30);
  REQUIRE(c.model.cbs.size() == 1);
  CHECK(c.model.buses[c.model.cbs[0].bus].id == 33);
  CHECK(c.model.cbs[0].st_max == 5);
  CHECK(c.model.cbs[0].y_step == doctest::Approx(0.01));
  // total feeder demand on the declared base
  double p = 0;
  for (const auto& z : c.model.zip) p += z.p0;
  CHECK(p * c.model.base_mva == doctest::Approx(3.715).epsilon(1e-9));
  // initial settings from the published start
  CHECK(c.initial.taps[0] == 0.0);
  CHECK(c.initial.cb_steps[0] == 3.0);
  CHECK(c.initial.svr_q[0] == doctest::Approx(0.03));
}

TEST_CASE("missing bus references are rejected with a path") {
  json doc = {{"buses", json::array({{{"id", 1}}})},
              {"profiles", {{"load_factor", {1.0}}, {"price_a", {10.0}}}},
              {"cbs", json::array({{{"bus", 7}, {"y_step", 0.01}, {"st_max", 3}}})}};
  try {
    parse_case(doc);
    FAIL("expected a validation error");
  } catch (const InvalidInput& e) {
    std::string what = e.what();
    CHECK(what.find("cbs.bus") != std::string::npos);
    CHECK(what.find("7") != std::string::npos);
  }
}

TEST_CASE("omitted reactive prices default to a fifth of the active ones") {
  json doc = {{"buses", json::array({{{"id", 1}}})},
              {"profiles", {{"load_factor", {1.0, 0.5}}, {"price_a", {10.0, 40.0}}}}};
  CaseFile c = parse_case(doc);
  CHECK(c.model.price_r[0] == doctest::Approx(2.0));
  CHECK(c.model.price_r[1] == doctest::Approx(8.0));
}

TEST_CASE("emit and reload reproduce the bundled case field for field") {
  CaseFile c = load_case(kCasePath);
  json emitted = emit_case(c);
  CaseFile again = parse_case(emitted);
  json emitted2 = emit_case(again);
  CHECK(emitted == emitted2);
  // spot checks against the originals
  CHECK(again.model.n_bus() == c.model.n_bus());
  CHECK(again.model.lines.size() == c.model.lines.size());
  CHECK((again.model.load_factor - c.model.load_factor).cwiseAbs().maxCoeff() == 0.0);
  CHECK(again.model.zip[13].p0 == c.model.zip[13].p0);
}

TEST_CASE("solver overrides land in the resolved configuration") {
  CaseFile c = load_case(kCasePath);
  json doc = emit_case(c);
  doc["solver"]["tra_eps1"] = 2e-6;
  doc["solver"]["bc_node_limit"] = 77;
  CaseFile c2 = parse_case(doc);
  CHECK(c2.model.solver.tra_eps1 == 2e-6);
  CHECK(c2.model.solver.bc_node_limit == 77);
  json rc = resolved_config(c2);
  CHECK(rc["solver"]["tra_eps1"] == 2e-6);
  CHECK(rc["solver"]["bc_node_limit"] == 77);
}

TEST_CASE("every documented tolerance appears in the resolved configuration") {
  CaseFile c = load_case(kCasePath);
  json rc = resolved_config(c)["solver"];
  for (const char* key :
       {"tra_alpha0", "tra_alpha_min", "tra_alpha_max", "tra_xi_vertical", "tra_eps1",
        "tra_eps2", "tra_accept", "tra_shrink", "tra_expand", "tra_zeta_safety",
        "tra_max_iterations", "bc_node_limit", "bc_tol_int", "bc_prune_slack",
        "bc_w_bar_lp", "bc_penalty_tol", "milp_binary_cap", "milp_node_limit",
        "ac_tolerance", "ac_max_iterations", "condition_limit", "envelope_v_bound",
        "der_polygon_lines", "load_update_tol", "load_v_diff_min", "model_drift_tol",
        "thevenin_residual_tol", "max_resolves_per_window", "candidate_pool",
        "max_cov_pairs", "sigma0_frac", "sigma_growth", "eta_default", "discount_decay",
        "voltage_row_margin", "voltage_track_min", "voltage_track_all_below",
        "current_row_margin", "tap_ops_cap", "cb_ops_cap", "horizon", "windows",
        "scenarios", "seed", "threads"}) {
    INFO(key);
    CHECK(rc.contains(key));
  }
}
