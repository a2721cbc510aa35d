#include "dsched/case_io.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>

namespace dsched::io {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw InvalidInput("case file: " + path + ": " + what);
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

double number_or(const json& parent, const std::string& key, double fallback) {
  if (!parent.contains(key)) return fallback;
  return number(parent.at(key), key);
}

Vec vec24(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array");
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = number(j[i], path);
  if (v.size() == 0) fail(path, "profile must not be empty");
  return v;
}

json to_array(const Vec& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

// solver configuration field tables: one source of truth for parse, emit and
// the resolved-config dump
struct SolverFields {
  std::map<std::string, double rhc::SolverConfig::*> doubles;
  std::map<std::string, int rhc::SolverConfig::*> ints;

  SolverFields() {
    using S = rhc::SolverConfig;
    doubles = {
        {"tra_alpha0", &S::tra_alpha0},
        {"tra_alpha_min", &S::tra_alpha_min},
        {"tra_alpha_max", &S::tra_alpha_max},
        {"tra_xi_vertical", &S::tra_xi_vertical},
        {"tra_eps1", &S::tra_eps1},
        {"tra_eps2", &S::tra_eps2},
        {"tra_accept", &S::tra_accept},
        {"tra_shrink", &S::tra_shrink},
        {"tra_expand", &S::tra_expand},
        {"tra_zeta_safety", &S::tra_zeta_safety},
        {"bc_tol_int", &S::bc_tol_int},
        {"bc_prune_slack", &S::bc_prune_slack},
        {"bc_penalty_tol", &S::bc_penalty_tol},
        {"ac_tolerance", &S::ac_tolerance},
        {"condition_limit", &S::condition_limit},
        {"envelope_v_bound", &S::envelope_v_bound},
        {"load_update_tol", &S::load_update_tol},
        {"load_v_diff_min", &S::load_v_diff_min},
        {"model_drift_tol", &S::model_drift_tol},
        {"thevenin_residual_tol", &S::thevenin_residual_tol},
        {"sigma0_frac", &S::sigma0_frac},
        {"sigma_growth", &S::sigma_growth},
        {"eta_default", &S::eta_default},
        {"discount_decay", &S::discount_decay},
        {"voltage_row_margin", &S::voltage_row_margin},
        {"current_row_margin", &S::current_row_margin},
    };
    ints = {
        {"tra_max_iterations", &S::tra_max_iterations},
        {"bc_node_limit", &S::bc_node_limit},
        {"bc_w_bar_lp", &S::bc_w_bar_lp},
        {"milp_binary_cap", &S::milp_binary_cap},
        {"milp_node_limit", &S::milp_node_limit},
        {"ac_max_iterations", &S::ac_max_iterations},
        {"der_polygon_lines", &S::der_polygon_lines},
        {"max_resolves_per_window", &S::max_resolves_per_window},
        {"candidate_pool", &S::candidate_pool},
        {"max_cov_pairs", &S::max_cov_pairs},
        {"voltage_track_min", &S::voltage_track_min},
        {"voltage_track_all_below", &S::voltage_track_all_below},
        {"tap_ops_cap", &S::tap_ops_cap},
        {"cb_ops_cap", &S::cb_ops_cap},
        {"horizon", &S::horizon},
        {"windows", &S::windows},
        {"scenarios", &S::scenarios},
        {"threads", &S::threads},
    };
  }
};

const SolverFields& solver_fields() {
  static SolverFields fields;
  return fields;
}

struct UncertaintyFields {
  std::map<std::string, double rhc::UncertaintyConfig::*> doubles = {
      {"cross_bus_load_corr", &rhc::UncertaintyConfig::cross_bus_load_corr},
      {"load_autocorr", &rhc::UncertaintyConfig::load_autocorr},
      {"vth_autocorr", &rhc::UncertaintyConfig::vth_autocorr},
      {"zth_autocorr", &rhc::UncertaintyConfig::zth_autocorr},
      {"rho_a_autocorr", &rhc::UncertaintyConfig::rho_a_autocorr},
      {"rho_r_autocorr", &rhc::UncertaintyConfig::rho_r_autocorr},
  };
};

const UncertaintyFields& uncertainty_fields() {
  static UncertaintyFields fields;
  return fields;
}

Vec default_pv_profile() {
  // zero outside 7 AM..7 PM; linear up to the 1 PM crest, down afterwards
  Vec pv = Vec::Zero(24);
  for (int k = 0; k < 24; ++k) {
    int hour = k + 1;
    if (hour < 7 || hour > 19) continue;
    pv[k] = hour <= 13 ? (hour - 6) / 7.0 : (20 - hour) / 7.0;
  }
  return pv;
}

}  // namespace

CaseFile parse_case(const json& doc) {
  CaseFile c;
  c.name = doc.value("name", "case");
  auto& m = c.model;
  m.base_mva = number_or(doc, "base_mva", 10.0);

  if (!doc.contains("buses") || !doc.at("buses").is_array())
    fail("buses", "required array missing");
  std::map<int, int> bus_index;
  for (const auto& jb : doc.at("buses")) {
    net::Bus b;
    b.id = jb.at("id").get<int>();
    b.v_nominal = number_or(jb, "v_nominal", 1.0);
    b.v_min = number_or(jb, "v_min", 0.95);
    b.v_max = number_or(jb, "v_max", 1.05);
    b.penalty_weight = number_or(jb, "penalty_weight", 0.0);
    b.validate();
    if (bus_index.count(b.id)) fail("buses", "duplicate id " + std::to_string(b.id));
    bus_index[b.id] = m.n_bus();
    m.buses.push_back(b);
  }
  auto bus_of = [&](const json& j, const std::string& who) {
    int id = j.get<int>();
    auto it = bus_index.find(id);
    if (it == bus_index.end())
      fail(who, "references unknown bus " + std::to_string(id));
    return it->second;
  };

  for (const auto& jl : doc.value("lines", json::array())) {
    net::Line l;
    l.from = bus_of(jl.at("from"), "lines.from");
    l.to = bus_of(jl.at("to"), "lines.to");
    l.r = number(jl.at("r"), "lines.r");
    l.x = number(jl.at("x"), "lines.x");
    l.i_max = number_or(jl, "i_max", kInf);
    m.lines.push_back(l);
  }
  for (const auto& js : doc.value("shunts", json::array())) {
    net::Shunt s;
    s.bus = bus_of(js.at("bus"), "shunts.bus");
    s.y = Complex(number_or(js, "g", 0.0), number_or(js, "b", 0.0));
    m.shunts.push_back(s);
  }

  if (doc.contains("upstream")) {
    const auto& ju = doc.at("upstream");
    m.oltc.secondary_bus = bus_of(ju.at("secondary_bus"), "upstream.secondary_bus");
    auto zt = ju.at("z_th");
    m.z_th_true = Complex(number(zt[0], "upstream.z_th"), number(zt[1], "upstream.z_th"));
    m.oltc.ganged = doc.value("oltc_ganged", true);
    for (const auto& jt : doc.value("transformers", json::array())) {
      dev::OltcTransformer x;
      auto z = jt.at("z_sr");
      x.z_sr_n = Complex(number(z[0], "transformers.z_sr"),
                         number(z[1], "transformers.z_sr"));
      x.r_c_n = number_or(jt, "r_c", kInf);
      x.x_m_n = number_or(jt, "x_m", kInf);
      x.tap_min = jt.at("tap_min").get<int>();
      x.tap_max = jt.at("tap_max").get<int>();
      x.delta_u = number(jt.at("delta_u"), "transformers.delta_u");
      x.tap_change_cost = number_or(jt, "tap_cost", 0.0);
      x.max_tap_jump = jt.value("max_tap_jump", 0);
      x.max_ops_per_horizon = jt.value("max_ops_per_horizon", -1);
      if (!(x.tap_min <= 0 && 0 <= x.tap_max))
        fail("transformers", "tap range must bracket the nominal position");
      if (!(x.delta_u > 0)) fail("transformers.delta_u", "must be positive");
      m.oltc.units.push_back(x);
    }
  }

  for (const auto& jd : doc.value("ders", json::array())) {
    dev::DispatchableDer d;
    d.bus = bus_of(jd.at("bus"), "ders.bus");
    d.s_max = number(jd.at("s_max"), "ders.s_max");
    d.p_max = number_or(jd, "p_max", d.s_max);
    d.q_max = number_or(jd, "q_max", d.s_max);
    d.theta_max = number_or(jd, "theta_max_deg", 36.87) * M_PI / 180.0;
    d.price = number_or(jd, "price", 0.0);
    d.polygon_lines = jd.value("polygon_lines", 5);
    m.ders.push_back(d);
  }
  for (const auto& jr : doc.value("res", json::array())) {
    dev::ResUnit r;
    r.bus = bus_of(jr.at("bus"), "res.bus");
    r.s_max = number(jr.at("s_max"), "res.s_max");
    std::string kind = jr.value("kind", "pv");
    r.kind = kind == "wind" ? dev::ResKind::kWind : dev::ResKind::kPv;
    r.alpha_max = number_or(jr, "alpha_max_deg", 35.0) * M_PI / 180.0;
    r.q_min_wind = number_or(jr, "q_min_wind", 0.0);
    m.res_units.push_back(r);
  }
  for (const auto& js : doc.value("svrs", json::array())) {
    dev::SvrUnit s;
    s.bus = bus_of(js.at("bus"), "svrs.bus");
    s.q_max = number(js.at("q_max"), "svrs.q_max");
    m.svrs.push_back(s);
  }
  for (const auto& jc : doc.value("cbs", json::array())) {
    dev::CapacitorBank cb;
    cb.bus = bus_of(jc.at("bus"), "cbs.bus");
    cb.y_step = number(jc.at("y_step"), "cbs.y_step");
    cb.st_min = jc.value("st_min", 0);
    cb.st_max = jc.at("st_max").get<int>();
    cb.step_change_cost = number_or(jc, "step_cost", 0.0);
    cb.max_step_jump = jc.value("max_step_jump", 0);
    if (!(cb.y_step > 0)) fail("cbs.y_step", "must be positive");
    if (!(0 <= cb.st_min && cb.st_min <= cb.st_max))
      fail("cbs", "invalid step range");
    m.cbs.push_back(cb);
  }

  m.zip.assign(m.n_bus(), load::ZipModel{});
  for (auto& z : m.zip) {
    z.p0 = z.q0 = 0.0;
    z.a_p = z.b_p = 0.0;
    z.c_p = 1.0;
    z.a_q = z.b_q = 0.0;
    z.c_q = 1.0;
  }
  for (const auto& jl : doc.value("loads", json::array())) {
    int b = bus_of(jl.at("bus"), "loads.bus");
    load::ZipModel z;
    z.p0 = number(jl.at("p"), "loads.p");
    z.q0 = number(jl.at("q"), "loads.q");
    auto zp = jl.value("zip_p", json::array({0.0, 0.0, 1.0}));
    auto zq = jl.value("zip_q", json::array({0.0, 0.0, 1.0}));
    z.a_p = number(zp[0], "loads.zip_p");
    z.b_p = number(zp[1], "loads.zip_p");
    z.c_p = number(zp[2], "loads.zip_p");
    z.a_q = number(zq[0], "loads.zip_q");
    z.b_q = number(zq[1], "loads.zip_q");
    z.c_q = number(zq[2], "loads.zip_q");
    z.v0 = m.buses[b].v_nominal;
    z.validate();
    m.zip[b] = z;
  }

  const auto& jp = doc.at("profiles");
  m.load_factor = vec24(jp.at("load_factor"), "profiles.load_factor");
  m.price_a = vec24(jp.at("price_a"), "profiles.price_a");
  if (jp.contains("price_r"))
    m.price_r = vec24(jp.at("price_r"), "profiles.price_r");
  else
    m.price_r = 0.2 * m.price_a;  // reactive energy priced at a fifth
  m.v_th_profile = jp.contains("v_th") ? vec24(jp.at("v_th"), "profiles.v_th")
                                       : Vec(Vec::Ones(24));
  m.pv_factor = jp.contains("pv_factor") ? vec24(jp.at("pv_factor"), "profiles.pv_factor")
                                         : default_pv_profile();

  if (doc.contains("uncertainty")) {
    const auto& ju = doc.at("uncertainty");
    for (auto& [key, member] : uncertainty_fields().doubles)
      if (ju.contains(key)) m.uncertainty.*member = number(ju.at(key), key);
  }
  if (doc.contains("solver")) {
    const auto& js = doc.at("solver");
    for (auto& [key, member] : solver_fields().doubles)
      if (js.contains(key)) m.solver.*member = number(js.at(key), key);
    for (auto& [key, member] : solver_fields().ints)
      if (js.contains(key)) m.solver.*member = js.at(key).get<int>();
    if (js.contains("seed")) m.solver.seed = js.at("seed").get<std::uint64_t>();
  }

  // initial settings
  auto& in = c.initial;
  int n_taps = m.oltc.units.empty() ? 0 : m.oltc.n_tap_vars();
  in.taps = Vec::Zero(n_taps);
  in.cb_steps = Vec::Zero(m.cbs.size());
  in.der_p = Vec::Zero(m.ders.size());
  in.der_q = Vec::Zero(m.ders.size());
  in.res_q = Vec::Zero(m.res_units.size());
  in.svr_q = Vec::Zero(m.svrs.size());
  if (doc.contains("initial")) {
    const auto& ji = doc.at("initial");
    auto fill = [&](const char* key, Vec& v) {
      if (!ji.contains(key)) return;
      auto a = ji.at(key);
      if (!a.is_array() || static_cast<int>(a.size()) != v.size())
        fail(std::string("initial.") + key, "length mismatch");
      for (int i = 0; i < v.size(); ++i) v[i] = number(a[i], key);
    };
    fill("taps", in.taps);
    fill("cb_steps", in.cb_steps);
    fill("der_p", in.der_p);
    fill("der_q", in.der_q);
    fill("res_q", in.res_q);
    fill("svr_q", in.svr_q);
  }

  // structural validation
  net::assemble_ybus(m.n_bus(), m.lines, m.shunts);
  return c;
}

CaseFile load_case(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open case file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw InvalidInput("case file parse error: " + std::string(e.what()));
  }
  return parse_case(doc);
}

json emit_case(const CaseFile& c) {
  const auto& m = c.model;
  json doc;
  doc["name"] = c.name;
  doc["base_mva"] = m.base_mva;
  json buses = json::array();
  for (const auto& b : m.buses)
    buses.push_back({{"id", b.id},
                     {"v_nominal", b.v_nominal},
                     {"v_min", b.v_min},
                     {"v_max", b.v_max},
                     {"penalty_weight", b.penalty_weight}});
  doc["buses"] = buses;
  json lines = json::array();
  for (const auto& l : m.lines)
    lines.push_back({{"from", m.buses[l.from].id},
                     {"to", m.buses[l.to].id},
                     {"r", l.r},
                     {"x", l.x},
                     {"i_max", l.i_max}});
  doc["lines"] = lines;
  json shunts = json::array();
  for (const auto& s : m.shunts)
    shunts.push_back(
        {{"bus", m.buses[s.bus].id}, {"g", s.y.real()}, {"b", s.y.imag()}});
  doc["shunts"] = shunts;
  if (!m.oltc.units.empty()) {
    doc["upstream"] = {{"secondary_bus", m.buses[m.oltc.secondary_bus].id},
                       {"z_th", {m.z_th_true.real(), m.z_th_true.imag()}}};
    doc["oltc_ganged"] = m.oltc.ganged;
    json xs = json::array();
    for (const auto& x : m.oltc.units)
      xs.push_back({{"z_sr", {x.z_sr_n.real(), x.z_sr_n.imag()}},
                    {"r_c", x.r_c_n},
                    {"x_m", x.x_m_n},
                    {"tap_min", x.tap_min},
                    {"tap_max", x.tap_max},
                    {"delta_u", x.delta_u},
                    {"tap_cost", x.tap_change_cost},
                    {"max_tap_jump", x.max_tap_jump},
                    {"max_ops_per_horizon", x.max_ops_per_horizon}});
    doc["transformers"] = xs;
  }
  json ders = json::array();
  for (const auto& d : m.ders)
    ders.push_back({{"bus", m.buses[d.bus].id},
                    {"s_max", d.s_max},
                    {"p_max", d.p_max},
                    {"q_max", d.q_max},
                    {"theta_max_deg", d.theta_max * 180.0 / M_PI},
                    {"price", d.price},
                    {"polygon_lines", d.polygon_lines}});
  doc["ders"] = ders;
  json res = json::array();
  for (const auto& r : m.res_units)
    res.push_back({{"bus", m.buses[r.bus].id},
                   {"s_max", r.s_max},
                   {"kind", r.kind == dev::ResKind::kWind ? "wind" : "pv"},
                   {"alpha_max_deg", r.alpha_max * 180.0 / M_PI},
                   {"q_min_wind", r.q_min_wind}});
  doc["res"] = res;
  json svrs = json::array();
  for (const auto& s : m.svrs)
    svrs.push_back({{"bus", m.buses[s.bus].id}, {"q_max", s.q_max}});
  doc["svrs"] = svrs;
  json cbs = json::array();
  for (const auto& cb : m.cbs)
    cbs.push_back({{"bus", m.buses[cb.bus].id},
                   {"y_step", cb.y_step},
                   {"st_min", cb.st_min},
                   {"st_max", cb.st_max},
                   {"step_cost", cb.step_change_cost},
                   {"max_step_jump", cb.max_step_jump}});
  doc["cbs"] = cbs;
  json loads = json::array();
  for (int b = 0; b < m.n_bus(); ++b) {
    const auto& z = m.zip[b];
    if (z.p0 == 0.0 && z.q0 == 0.0) continue;
    loads.push_back({{"bus", m.buses[b].id},
                     {"p", z.p0},
                     {"q", z.q0},
                     {"zip_p", {z.a_p, z.b_p, z.c_p}},
                     {"zip_q", {z.a_q, z.b_q, z.c_q}}});
  }
  doc["loads"] = loads;
  doc["profiles"] = {{"load_factor", to_array(m.load_factor)},
                     {"price_a", to_array(m.price_a)},
                     {"price_r", to_array(m.price_r)},
                     {"v_th", to_array(m.v_th_profile)},
                     {"pv_factor", to_array(m.pv_factor)}};
  json unc;
  for (auto& [key, member] : uncertainty_fields().doubles)
    unc[key] = m.uncertainty.*member;
  doc["uncertainty"] = unc;
  json solver;
  for (auto& [key, member] : solver_fields().doubles) solver[key] = m.solver.*member;
  for (auto& [key, member] : solver_fields().ints) solver[key] = m.solver.*member;
  solver["seed"] = m.solver.seed;
  doc["solver"] = solver;
  doc["initial"] = {{"taps", to_array(c.initial.taps)},
                    {"cb_steps", to_array(c.initial.cb_steps)},
                    {"der_p", to_array(c.initial.der_p)},
                    {"der_q", to_array(c.initial.der_q)},
                    {"res_q", to_array(c.initial.res_q)},
                    {"svr_q", to_array(c.initial.svr_q)}};
  return doc;
}

json resolved_config(const CaseFile& c) {
  json out;
  out["case"] = c.name;
  json solver;
  for (auto& [key, member] : solver_fields().doubles) solver[key] = c.model.solver.*member;
  for (auto& [key, member] : solver_fields().ints) solver[key] = c.model.solver.*member;
  solver["seed"] = c.model.solver.seed;
  out["solver"] = solver;
  json unc;
  for (auto& [key, member] : uncertainty_fields().doubles)
    unc[key] = c.model.uncertainty.*member;
  out["uncertainty"] = unc;
  return out;
}

}  // namespace dsched::io
