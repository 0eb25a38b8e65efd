#include "topo/request.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>

namespace topo {

using nlohmann::json;

RequestError::RequestError(std::string field, const std::string& why)
    : std::invalid_argument(field + ": " + why), field_(std::move(field)) {}

namespace {

const json& member(const json& obj, const char* key, const std::string& path) {
  if (!obj.contains(key)) throw RequestError(path, "missing");
  return obj.at(key);
}

int integer(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw RequestError(path, "expected an integer");
  return v.get<int>();
}

double number(const json& v, const std::string& path) {
  if (!v.is_number()) throw RequestError(path, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw RequestError(path, "not finite");
  return d;
}

}  // namespace

ProblemRequest parse_problem_request(const json& doc) {
  if (!doc.is_object()) throw RequestError("body", "expected a JSON object");
  ProblemRequest r;

  if (doc.contains("grid")) {
    const auto& g = doc["grid"];
    if (!g.is_object()) throw RequestError("grid", "expected {nx, ny}");
    r.nx = integer(member(g, "nx", "grid.nx"), "grid.nx");
    r.ny = integer(member(g, "ny", "grid.ny"), "grid.ny");
    if (r.nx < 2 || r.nx > 512 || r.nx % 2) throw RequestError("grid.nx", "must be even and in 2..512");
    if (r.ny < 2 || r.ny > 512 || r.ny % 2) throw RequestError("grid.ny", "must be even and in 2..512");
  }
  const auto catalog = BcCatalog::make(r.nx, r.ny);

  const auto& groups = member(doc, "bc_groups", "bc_groups");
  if (!groups.is_array() || groups.empty() || groups.size() > 4) {
    throw RequestError("bc_groups", "expected one to four catalog names");
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const std::string path = "bc_groups[" + std::to_string(k) + "]";
    if (!groups[k].is_string()) throw RequestError(path, "expected a catalog name");
    const int idx = catalog.find(groups[k].get<std::string>());
    if (idx < 0) throw RequestError(path, "unknown group '" + groups[k].get<std::string>() + "'");
    for (int prev : r.spec.bc_groups) {
      if (prev == idx) throw RequestError(path, "duplicate group");
    }
    r.spec.bc_groups.push_back(idx);
  }

  const auto& load = member(doc, "load", "load");
  if (!load.is_object()) throw RequestError("load", "expected an object");
  const auto& el = member(load, "element", "load.element");
  if (!el.is_array() || el.size() != 2) throw RequestError("load.element", "expected [i, j]");
  r.spec.load_element = {integer(el[0], "load.element"), integer(el[1], "load.element")};
  if (!on_perimeter(r.spec.load_element, r.nx, r.ny)) {
    throw RequestError("load.element", "not on the domain perimeter");
  }
  const bool has_angle = load.contains("angle_deg"), has_vector = load.contains("vector");
  if (has_angle == has_vector) throw RequestError("load", "give exactly one of angle_deg or vector");
  if (has_angle) {
    const double a = number(load["angle_deg"], "load.angle_deg") * std::numbers::pi / 180.0;
    r.spec.fx = std::cos(a);
    r.spec.fy = std::sin(a);
    // snap axis directions so that e.g. 270 degrees is exactly (0, -1)
    if (std::abs(r.spec.fx) < 1e-12) r.spec.fx = 0.0;
    if (std::abs(r.spec.fy) < 1e-12) r.spec.fy = 0.0;
    const double n = std::hypot(r.spec.fx, r.spec.fy);
    r.spec.fx /= n;
    r.spec.fy /= n;
  } else {
    const auto& v = load["vector"];
    if (!v.is_array() || v.size() != 2) throw RequestError("load.vector", "expected [fx, fy]");
    const double fx = number(v[0], "load.vector"), fy = number(v[1], "load.vector");
    const double n = std::hypot(fx, fy);
    if (!(n > 0)) throw RequestError("load.vector", "zero vector");
    r.spec.fx = fx / n;
    r.spec.fy = fy / n;
  }

  const double vf = number(member(doc, "volume_fraction", "volume_fraction"), "volume_fraction");
  if (!(vf > 0.0 && vf < 1.0)) throw RequestError("volume_fraction", "must lie in (0, 1)");
  r.spec.volume_fraction = vf;

  if (doc.contains("dynamic") && !doc["dynamic"].is_null()) {
    const auto& d = doc["dynamic"];
    if (!d.is_object()) throw RequestError("dynamic", "expected {kind}");
    const auto& kind = member(d, "kind", "dynamic.kind");
    if (!kind.is_string()) throw RequestError("dynamic.kind", "expected sine or impulse");
    try {
      r.spec.dynamic_kind = dynamic_kind_from_string(kind.get<std::string>());
    } catch (const std::invalid_argument&) {
      throw RequestError("dynamic.kind", "expected sine or impulse");
    }
    if (r.spec.dynamic_kind == DynamicKind::none) throw RequestError("dynamic.kind", "expected sine or impulse");
  }

  if (doc.contains("postprocess")) {
    if (!doc["postprocess"].is_boolean()) throw RequestError("postprocess", "expected a boolean");
    r.postprocess = doc["postprocess"].get<bool>();
  }

  // Remaining structural checks (e.g. the load landing on a fixed node).
  try {
    fea::GridDomain d;
    d.nx = r.nx;
    d.ny = r.ny;
    resolve(r.spec, d);
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    const auto colon = what.find(':');
    throw RequestError(colon == std::string::npos ? "body" : what.substr(0, colon),
                       colon == std::string::npos ? what : what.substr(colon + 2));
  }
  return r;
}

ProblemRequest parse_problem_request(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw RequestError("body", std::string("invalid JSON: ") + e.what());
  }
  return parse_problem_request(doc);
}

json to_json(const ProblemRequest& r) {
  const auto catalog = BcCatalog::make(r.nx, r.ny);
  json groups = json::array();
  for (int g : r.spec.bc_groups) groups.push_back(catalog.groups()[static_cast<std::size_t>(g)].name);
  json doc{{"grid", {{"nx", r.nx}, {"ny", r.ny}}},
           {"bc_groups", groups},
           {"load", {{"element", {r.spec.load_element.i, r.spec.load_element.j}}, {"vector", {r.spec.fx, r.spec.fy}}}},
           {"volume_fraction", r.spec.volume_fraction},
           {"postprocess", r.postprocess}};
  if (r.spec.dynamic_kind != DynamicKind::none) doc["dynamic"] = {{"kind", to_string(r.spec.dynamic_kind)}};
  return doc;
}

}  // namespace topo
