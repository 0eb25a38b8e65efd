#pragma once

// Finite-element core on a regular grid of square, bilinear, plane-stress
// elements. Elements and nodes are numbered row-major with row 0 at the
// bottom of the domain:
//
//   element (i, j) -> j * nx + i           0 <= i < nx, 0 <= j < ny
//   node    (x, y) -> y * (nx + 1) + x     0 <= x <= nx, 0 <= y <= ny
//
// Element-local node order is counter-clockwise from the bottom-left corner,
// and the two displacement dofs of node n are 2n (x) and 2n+1 (y).

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <array>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace topo::fea {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Matrix8 = Eigen::Matrix<double, 8, 8>;
using Vector8 = Eigen::Matrix<double, 8, 1>;

/// Thrown when a constrained system is not positive definite.
class SingularSystemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GridDomain {
  int nx = 64;
  int ny = 64;
  double elem_size = 1.0;
  double thickness = 1.0;
  double E0 = 1.0;
  double E_min = 1e-9;
  double nu = 0.3;
  /// Material mass per unit volume at full density.
  double mass_density = 1.0;

  void validate() const;

  int num_elements() const { return nx * ny; }
  int num_nodes() const { return (nx + 1) * (ny + 1); }
  int num_dofs() const { return 2 * num_nodes(); }
  int node(int x, int y) const { return y * (nx + 1) + x; }
  int element(int i, int j) const { return j * nx + i; }
  std::array<int, 4> element_nodes(int e) const;
  std::array<int, 8> element_dofs(int e) const;

  bool operator==(const GridDomain&) const = default;
};

/// Nodes with both displacement components fixed.
struct BoundarySet {
  std::vector<int> fixed_nodes;  // sorted, unique
};

struct PointLoad {
  int node = 0;
  double fx = 0.0;
  double fy = 0.0;
};

struct DensityField {
  int nx = 0;
  int ny = 0;
  std::vector<double> values;

  static DensityField uniform(int nx, int ny, double value);
  double mean() const;
  double& operator()(int i, int j) { return values[static_cast<size_t>(j) * nx + i]; }
  double operator()(int i, int j) const { return values[static_cast<size_t>(j) * nx + i]; }
};

struct FieldMaps {
  int nx = 0;
  int ny = 0;
  std::vector<double> von_mises;
  std::vector<double> strain_energy;
  bool normalized = false;
};

/// Strain (engineering shear) and stress at an element center.
struct ElementResponse {
  std::array<double, 3> strain{};  // exx, eyy, gxy
  std::array<double, 3> stress{};  // sxx, syy, sxy
};

enum class SignalKind { sine, impulse, custom };

struct DynamicLoadSignal {
  SignalKind kind = SignalKind::sine;
  int n_steps = 0;
  double dt = 0.0;
  std::vector<double> samples;  // n_steps + 1 values at t_i = i * dt

  /// Samples the closed-form sine or impulse signal on [0, duration].
  static DynamicLoadSignal make(SignalKind kind, int n_steps, double duration = 1.0);
  static DynamicLoadSignal from_samples(std::vector<double> samples, double dt);
};

double sine_signal(double t);
double impulse_signal(double t);
std::string to_string(SignalKind kind);
SignalKind signal_kind_from_string(const std::string& name);

// ---- static analysis -------------------------------------------------------

/// Q4 plane-stress element stiffness for modulus E (2x2 Gauss quadrature).
Matrix8 element_stiffness(const GridDomain& domain, double E);
inline Matrix8 element_stiffness(const GridDomain& domain) { return element_stiffness(domain, domain.E0); }

/// Per-element SIMP modulus E_min + rho^p (E0 - E_min).
std::vector<double> simp_moduli(const GridDomain& domain, const DensityField& rho, double penal);

SparseMatrix assemble_stiffness(const GridDomain& domain, const DensityField& rho, double penal);

Vector load_vector(const GridDomain& domain, const PointLoad& load);

Vector solve_static(const SparseMatrix& K, const Vector& f, const BoundarySet& bc);
Vector solve_static(const SparseMatrix& K, const GridDomain& domain, const PointLoad& load,
                    const BoundarySet& bc);

double compliance(const Vector& u, const SparseMatrix& K);

Vector8 element_displacements(const GridDomain& domain, const Vector& u, int e);

std::vector<ElementResponse> element_responses(const GridDomain& domain, const Vector& u,
                                               std::span<const double> moduli);

/// Raw von Mises stress and strain-energy density at element centers using
/// the full-density modulus E0 everywhere.
FieldMaps compute_fields(const GridDomain& domain, const Vector& u);

/// Divides each field by its own maximum (identically-zero fields are kept).
FieldMaps normalize(const FieldMaps& fields);

/// Solves the uniform unit-density problem and returns normalized fields.
FieldMaps input_fields(const GridDomain& domain, const BoundarySet& bc, const PointLoad& load);

double von_mises(double sxx, double syy, double sxy);
double strain_energy_density(const ElementResponse& r);
double max_principal_strain(const std::array<double, 3>& strain);

/// Threshold a density field: values >= threshold become 1, others 0.
DensityField binarize(const DensityField& rho, double threshold = 0.5);

/// Moduli for a 0/1 design: E_min + rho (E0 - E_min).
std::vector<double> binary_moduli(const GridDomain& domain, const DensityField& binary);

/// Static compliance f^T u for per-element moduli.
double static_compliance(const GridDomain& domain, const BoundarySet& bc, const PointLoad& load,
                         std::span<const double> moduli);

// ---- reduced (constrained) systems ------------------------------------------

/// Free-dof bookkeeping for a fixed domain and boundary set, with a cached
/// sparsity pattern so repeated assemblies only refill values.
class ReducedSystem {
 public:
  ReducedSystem(const GridDomain& domain, const BoundarySet& bc);

  const GridDomain& domain() const { return domain_; }
  int size() const { return static_cast<int>(free_dofs_.size()); }
  const std::vector<int>& free_dofs() const { return free_dofs_; }
  int reduced_index(int dof) const { return reduced_index_[static_cast<size_t>(dof)]; }

  /// Reduced stiffness (both triangles stored) for per-element moduli.
  SparseMatrix stiffness(std::span<const double> moduli) const;

  Vector restrict(const Vector& full) const;
  Vector expand(const Vector& reduced) const;

 private:
  GridDomain domain_;
  Matrix8 unit_ke_;
  std::vector<int> free_dofs_;
  std::vector<int> reduced_index_;
  SparseMatrix pattern_;
  std::vector<std::array<int, 64>> slots_;  // per element, value index of (a,b) or -1
};

/// Sparse Cholesky that reuses its symbolic analysis across factorizations of
/// matrices sharing one pattern.
class SpdSolver {
 public:
  void factorize(const SparseMatrix& A);
  Vector solve(const Vector& b) const;

 private:
  Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> llt_;
  bool analyzed_ = false;
};

// ---- dynamics -----------------------------------------------------------------

/// Lumped mass diagonal: each element's mass rho_e * area * thickness *
/// mass_density is split equally over its four nodes, on both dofs.
Vector assemble_mass(const GridDomain& domain, const DensityField& rho);

SparseMatrix rayleigh_damping(const Vector& mass_diagonal, const SparseMatrix& K, double alpha,
                              double beta);

struct InitialState {
  Vector displacement;  // full dof vectors
  Vector velocity;
};

/// Newmark average-acceleration integration of M u'' + C u' + K u = s(t) f
/// from rest (or the given initial state). Returns n_steps + 1 full
/// displacement vectors.
std::vector<Vector> newmark_integrate(const GridDomain& domain, const DensityField& rho,
                                      const PointLoad& load, const DynamicLoadSignal& signal,
                                      const BoundarySet& bc, double alpha, double beta_r,
                                      double penal = 3.0,
                                      const std::optional<InitialState>& initial = std::nullopt);

std::vector<Vector> newmark_integrate(const ReducedSystem& system, std::span<const double> moduli,
                                      const Vector& mass_diagonal, const Vector& load,
                                      const DynamicLoadSignal& signal, double alpha,
                                      double beta_r,
                                      const std::optional<InitialState>& initial = std::nullopt);

/// Rectangle rule sum_i f(t_i)^T u(t_i) dt.
double dynamic_compliance(std::span<const Vector> load_history,
                          std::span<const Vector> displacement_history, double dt);

/// Load history s(t_i) * f for a point load.
std::vector<Vector> load_history(const GridDomain& domain, const PointLoad& load,
                                 const DynamicLoadSignal& signal);

}  // namespace topo::fea
