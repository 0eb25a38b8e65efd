#pragma once

// Problem definitions shared by the optimizer, the dataset generator and the
// service: the boundary-condition catalog, ProblemSpec, and the rules that turn
// a spec into a concrete boundary set and nodal point load.

#include "topo/fea.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace topo {

inline constexpr std::string_view kCatalogVersion = "bc12-v1";
inline constexpr int kCatalogSize = 12;
inline constexpr int kNumLoadAngles = 6;

struct ElementCoord {
  int i = 0;
  int j = 0;
  bool operator==(const ElementCoord&) const = default;
};

struct NodeCoord {
  int x = 0;
  int y = 0;
  bool operator==(const NodeCoord&) const = default;
};

enum class DynamicKind : std::uint8_t { none = 0, sine = 1, impulse = 2 };

std::string to_string(DynamicKind kind);
DynamicKind dynamic_kind_from_string(const std::string& name);
fea::SignalKind signal_kind(DynamicKind kind);

struct ProblemSpec {
  std::vector<int> bc_groups;  // indices into the catalog, 1..4 distinct
  ElementCoord load_element;
  /// Explicit load node; when absent the node follows from load_element.
  std::optional<NodeCoord> load_node;
  /// Angle index k (angle k * 60 degrees) when the load came from the sampler.
  std::optional<int> load_angle_index;
  double fx = 0.0;
  double fy = -1.0;
  double volume_fraction = 0.4;
  DynamicKind dynamic_kind = DynamicKind::none;

  bool operator==(const ProblemSpec&) const = default;
};

struct BcGroup {
  std::string name;
  std::vector<int> nodes;
};

/// The 12 fixed node groups: 4 corners, 4 edge midpoints, 4 full edges, in
/// that order, each listed bottom, right, top, left.
class BcCatalog {
 public:
  static BcCatalog make(int nx, int ny);

  std::string_view version() const { return kCatalogVersion; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  const std::vector<BcGroup>& groups() const { return groups_; }
  int size() const { return static_cast<int>(groups_.size()); }
  /// Index of a group by name, or -1.
  int find(std::string_view name) const;

 private:
  int nx_ = 0;
  int ny_ = 0;
  std::vector<BcGroup> groups_;
};

bool on_perimeter(ElementCoord e, int nx, int ny);
std::vector<ElementCoord> perimeter_elements(int nx, int ny);

/// Unit load direction for angle index k (k * 60 degrees).
std::pair<double, double> angle_direction(int k);

/// Node receiving the load: the explicit load_node when set, otherwise the
/// smallest-index boundary node of the load element.
NodeCoord load_node(const ProblemSpec& spec, int nx, int ny);

struct ResolvedProblem {
  fea::BoundarySet bc;
  fea::PointLoad load;
};

/// Validates the spec against the grid and catalog and builds BCs and load.
ResolvedProblem resolve(const ProblemSpec& spec, const fea::GridDomain& domain);

/// Throws std::invalid_argument naming the first offending field.
void validate(const ProblemSpec& spec, int nx, int ny);

/// Left edge fixed, unit downward load at the bottom-right corner node.
ProblemSpec cantilever(int nx, int ny, double volume_fraction);

}  // namespace topo
