#pragma once

// JSON problem documents shared by the service and the command line:
//
//   {"grid": {"nx": 64, "ny": 64},
//    "bc_groups": ["edge_left"],
//    "load": {"element": [63, 32], "angle_deg": 270}      // or "vector": [fx, fy]
//    "volume_fraction": 0.4,
//    "dynamic": {"kind": "sine"},                          // optional
//    "postprocess": false}                                 // optional

#include "topo/problem.hpp"

#include <nlohmann/json_fwd.hpp>
#include <stdexcept>
#include <string>

namespace topo {

/// A malformed document. field() is the dotted path of the offending entry.
class RequestError : public std::invalid_argument {
 public:
  RequestError(std::string field, const std::string& why);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ProblemRequest {
  int nx = 64;
  int ny = 64;
  ProblemSpec spec;
  bool postprocess = false;
};

/// Parses and fully validates (catalog names, perimeter, resolvable BCs).
ProblemRequest parse_problem_request(const nlohmann::json& doc);
ProblemRequest parse_problem_request(std::string_view text);

nlohmann::json to_json(const ProblemRequest& request);

}  // namespace topo
