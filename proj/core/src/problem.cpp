#include "topo/problem.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace topo {

std::string to_string(DynamicKind kind) {
  switch (kind) {
    case DynamicKind::none: return "none";
    case DynamicKind::sine: return "sine";
    case DynamicKind::impulse: return "impulse";
  }
  return "none";
}

DynamicKind dynamic_kind_from_string(const std::string& name) {
  if (name == "none") return DynamicKind::none;
  if (name == "sine") return DynamicKind::sine;
  if (name == "impulse") return DynamicKind::impulse;
  throw std::invalid_argument("unknown dynamic kind '" + name + "'");
}

fea::SignalKind signal_kind(DynamicKind kind) {
  switch (kind) {
    case DynamicKind::sine: return fea::SignalKind::sine;
    case DynamicKind::impulse: return fea::SignalKind::impulse;
    case DynamicKind::none: break;
  }
  throw std::invalid_argument("static problems have no load signal");
}

BcCatalog BcCatalog::make(int nx, int ny) {
  if (nx < 2 || ny < 2 || nx % 2 || ny % 2) {
    throw std::invalid_argument("catalog needs even grid dimensions >= 2");
  }
  BcCatalog c;
  c.nx_ = nx;
  c.ny_ = ny;
  auto node = [nx](int x, int y) { return y * (nx + 1) + x; };
  auto edge = [&](int x0, int y0, int dx, int dy, int count) {
    std::vector<int> nodes;
    for (int k = 0; k <= count; ++k) nodes.push_back(node(x0 + k * dx, y0 + k * dy));
    std::sort(nodes.begin(), nodes.end());
    return nodes;
  };
  c.groups_ = {
      {"corner_bottom_left", {node(0, 0)}},
      {"corner_bottom_right", {node(nx, 0)}},
      {"corner_top_right", {node(nx, ny)}},
      {"corner_top_left", {node(0, ny)}},
      {"mid_bottom", {node(nx / 2, 0)}},
      {"mid_right", {node(nx, ny / 2)}},
      {"mid_top", {node(nx / 2, ny)}},
      {"mid_left", {node(0, ny / 2)}},
      {"edge_bottom", edge(0, 0, 1, 0, nx)},
      {"edge_right", edge(nx, 0, 0, 1, ny)},
      {"edge_top", edge(0, ny, 1, 0, nx)},
      {"edge_left", edge(0, 0, 0, 1, ny)},
  };
  return c;
}

int BcCatalog::find(std::string_view name) const {
  for (size_t k = 0; k < groups_.size(); ++k) {
    if (groups_[k].name == name) return static_cast<int>(k);
  }
  return -1;
}

bool on_perimeter(ElementCoord e, int nx, int ny) {
  if (e.i < 0 || e.j < 0 || e.i >= nx || e.j >= ny) return false;
  return e.i == 0 || e.j == 0 || e.i == nx - 1 || e.j == ny - 1;
}

std::vector<ElementCoord> perimeter_elements(int nx, int ny) {
  std::vector<ElementCoord> out;
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      if (on_perimeter({i, j}, nx, ny)) out.push_back({i, j});
    }
  }
  return out;
}

std::pair<double, double> angle_direction(int k) {
  if (k < 0 || k >= kNumLoadAngles) throw std::invalid_argument("load angle index outside 0..5");
  // Exact values so that axis-aligned directions carry no round-off.
  static constexpr double h = 0.5;
  static const double s = std::sqrt(3.0) / 2.0;
  switch (k) {
    case 0: return {1.0, 0.0};
    case 1: return {h, s};
    case 2: return {-h, s};
    case 3: return {-1.0, 0.0};
    case 4: return {-h, -s};
    default: return {h, -s};
  }
}

NodeCoord load_node(const ProblemSpec& spec, int nx, int ny) {
  if (spec.load_node) return *spec.load_node;
  const auto [i, j] = spec.load_element;
  // Boundary nodes of the element in ascending node-index order: bottom row
  // first (y = j), then top row (y = j + 1), left to right.
  const std::array<NodeCoord, 4> corners{NodeCoord{i, j}, NodeCoord{i + 1, j}, NodeCoord{i, j + 1},
                                         NodeCoord{i + 1, j + 1}};
  for (const auto& n : corners) {
    if (n.x == 0 || n.y == 0 || n.x == nx || n.y == ny) return n;
  }
  throw std::invalid_argument("load element is not on the domain perimeter");
}

void validate(const ProblemSpec& spec, int nx, int ny) {
  if (spec.bc_groups.empty() || spec.bc_groups.size() > 4) {
    throw std::invalid_argument("bc_groups: between one and four groups required");
  }
  std::set<int> seen;
  for (int g : spec.bc_groups) {
    if (g < 0 || g >= kCatalogSize) throw std::invalid_argument("bc_groups: unknown group index");
    if (!seen.insert(g).second) throw std::invalid_argument("bc_groups: duplicate group");
  }
  if (!on_perimeter(spec.load_element, nx, ny)) {
    throw std::invalid_argument("load.element: not on the domain perimeter");
  }
  if (spec.load_node) {
    const auto n = *spec.load_node;
    const bool boundary = n.x == 0 || n.y == 0 || n.x == nx || n.y == ny;
    if (n.x < 0 || n.y < 0 || n.x > nx || n.y > ny || !boundary) {
      throw std::invalid_argument("load.node: not a boundary node");
    }
  }
  if (spec.load_angle_index && (*spec.load_angle_index < 0 || *spec.load_angle_index >= kNumLoadAngles)) {
    throw std::invalid_argument("load.angle: index outside 0..5");
  }
  if (std::abs(std::hypot(spec.fx, spec.fy) - 1.0) > 1e-9) {
    throw std::invalid_argument("load.vector: must have unit magnitude");
  }
  if (!(spec.volume_fraction > 0.0 && spec.volume_fraction <= 1.0)) {
    throw std::invalid_argument("volume_fraction: must lie in (0, 1]");
  }
}

ResolvedProblem resolve(const ProblemSpec& spec, const fea::GridDomain& domain) {
  validate(spec, domain.nx, domain.ny);
  const auto catalog = BcCatalog::make(domain.nx, domain.ny);
  ResolvedProblem r;
  std::set<int> nodes;
  for (int g : spec.bc_groups) {
    const auto& grp = catalog.groups()[static_cast<size_t>(g)].nodes;
    nodes.insert(grp.begin(), grp.end());
  }
  r.bc.fixed_nodes.assign(nodes.begin(), nodes.end());
  const auto n = load_node(spec, domain.nx, domain.ny);
  r.load = {domain.node(n.x, n.y), spec.fx, spec.fy};
  return r;
}

ProblemSpec cantilever(int nx, int ny, double volume_fraction) {
  ProblemSpec s;
  s.bc_groups = {BcCatalog::make(nx, ny).find("edge_left")};
  s.load_element = {nx - 1, 0};
  s.load_node = NodeCoord{nx, 0};
  s.fx = 0.0;
  s.fy = -1.0;
  s.volume_fraction = volume_fraction;
  return s;
}

}  // namespace topo
