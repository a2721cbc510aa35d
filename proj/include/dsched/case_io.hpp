#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "dsched/scheduler.hpp"

namespace dsched::io {

struct CaseFile {
  std::string name;
  rhc::SystemModel model;
  rhc::ControlSettings initial;
};

/// Parses and validates a case document. Schema violations carry the JSON
/// field path; missing optional fields are filled with documented defaults
/// (reactive prices at 0.2x active, the solar ramp profile, solver values).
CaseFile load_case(const std::filesystem::path& path);
CaseFile parse_case(const nlohmann::json& doc);

/// Field-for-field serialization; load_case(emit_case(c)) reproduces c.
nlohmann::json emit_case(const CaseFile& c);

/// Every solver tolerance and cap with its effective value.
nlohmann::json resolved_config(const CaseFile& c);

}  // namespace dsched::io
