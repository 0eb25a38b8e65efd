#include "topo/fea.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace topo::fea {

namespace {

// Shape-function derivative matrix B (3x8) at natural coordinates (xi, eta)
// for a square element of side a.
Eigen::Matrix<double, 3, 8> strain_displacement(double xi, double eta, double a) {
  static constexpr std::array<double, 4> xn{-1.0, 1.0, 1.0, -1.0};
  static constexpr std::array<double, 4> yn{-1.0, -1.0, 1.0, 1.0};
  Eigen::Matrix<double, 3, 8> B = Eigen::Matrix<double, 3, 8>::Zero();
  for (int n = 0; n < 4; ++n) {
    const double dndxi = 0.25 * xn[n] * (1.0 + yn[n] * eta);
    const double dndeta = 0.25 * yn[n] * (1.0 + xn[n] * xi);
    const double dndx = dndxi * 2.0 / a;
    const double dndy = dndeta * 2.0 / a;
    B(0, 2 * n) = dndx;
    B(1, 2 * n + 1) = dndy;
    B(2, 2 * n) = dndy;
    B(2, 2 * n + 1) = dndx;
  }
  return B;
}

Eigen::Matrix3d plane_stress(double E, double nu) {
  Eigen::Matrix3d D;
  D << 1.0, nu, 0.0, nu, 1.0, 0.0, 0.0, 0.0, 0.5 * (1.0 - nu);
  return D * (E / (1.0 - nu * nu));
}

void check_density(const GridDomain& domain, const DensityField& rho) {
  if (rho.nx != domain.nx || rho.ny != domain.ny ||
      rho.values.size() != static_cast<size_t>(domain.num_elements())) {
    throw std::invalid_argument("density field does not match the domain");
  }
  for (double v : rho.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("density outside [0,1]");
  }
}

}  // namespace

void GridDomain::validate() const {
  if (nx < 1 || ny < 1) throw std::invalid_argument("grid needs at least one element per axis");
  if (!(E_min > 0.0 && E_min < E0)) throw std::invalid_argument("require 0 < E_min < E0");
  if (!(nu >= 0.0 && nu < 0.5)) throw std::invalid_argument("require 0 <= nu < 0.5");
  if (!(elem_size > 0.0 && thickness > 0.0)) throw std::invalid_argument("non-positive geometry");
}

std::array<int, 4> GridDomain::element_nodes(int e) const {
  const int i = e % nx;
  const int j = e / nx;
  return {node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)};
}

std::array<int, 8> GridDomain::element_dofs(int e) const {
  const auto n = element_nodes(e);
  std::array<int, 8> d{};
  for (int k = 0; k < 4; ++k) {
    d[2 * k] = 2 * n[k];
    d[2 * k + 1] = 2 * n[k] + 1;
  }
  return d;
}

DensityField DensityField::uniform(int nx, int ny, double value) {
  return {nx, ny, std::vector<double>(static_cast<size_t>(nx) * ny, value)};
}

double DensityField::mean() const {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sine_signal(double t) { return std::sin(2.0 * std::numbers::pi * t); }

double impulse_signal(double t) { return (t / 0.25) * std::exp(-t / 0.25 + 1.0); }

std::string to_string(SignalKind kind) {
  switch (kind) {
    case SignalKind::sine: return "sine";
    case SignalKind::impulse: return "impulse";
    case SignalKind::custom: return "custom";
  }
  return "custom";
}

SignalKind signal_kind_from_string(const std::string& name) {
  if (name == "sine") return SignalKind::sine;
  if (name == "impulse") return SignalKind::impulse;
  if (name == "custom") return SignalKind::custom;
  throw std::invalid_argument("unknown signal kind '" + name + "'");
}

DynamicLoadSignal DynamicLoadSignal::make(SignalKind kind, int n_steps, double duration) {
  if (n_steps < 1) throw std::invalid_argument("signal needs at least one step");
  if (kind == SignalKind::custom) throw std::invalid_argument("custom signals need samples");
  DynamicLoadSignal s;
  s.kind = kind;
  s.n_steps = n_steps;
  s.dt = duration / n_steps;
  s.samples.resize(static_cast<size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) {
    const double t = i * s.dt;
    s.samples[static_cast<size_t>(i)] = kind == SignalKind::sine ? sine_signal(t) : impulse_signal(t);
  }
  return s;
}

DynamicLoadSignal DynamicLoadSignal::from_samples(std::vector<double> samples, double dt) {
  if (samples.size() < 2) throw std::invalid_argument("signal needs at least one step");
  DynamicLoadSignal s;
  s.kind = SignalKind::custom;
  s.n_steps = static_cast<int>(samples.size()) - 1;
  s.dt = dt;
  s.samples = std::move(samples);
  return s;
}

Matrix8 element_stiffness(const GridDomain& domain, double E) {
  const Eigen::Matrix3d D = plane_stress(E, domain.nu);
  const double a = domain.elem_size;
  const double g = 1.0 / std::sqrt(3.0);
  const double det_j = 0.25 * a * a;
  Matrix8 ke = Matrix8::Zero();
  for (double xi : {-g, g}) {
    for (double eta : {-g, g}) {
      const auto B = strain_displacement(xi, eta, a);
      ke += B.transpose() * D * B * det_j * domain.thickness;
    }
  }
  // Quadrature leaves round-off asymmetry of order 1e-17.
  return 0.5 * (ke + ke.transpose());
}

std::vector<double> simp_moduli(const GridDomain& domain, const DensityField& rho, double penal) {
  if (penal < 1.0) throw std::invalid_argument("penalization must be >= 1");
  check_density(domain, rho);
  std::vector<double> E(rho.values.size());
  for (size_t e = 0; e < E.size(); ++e) {
    E[e] = domain.E_min + std::pow(rho.values[e], penal) * (domain.E0 - domain.E_min);
  }
  return E;
}

SparseMatrix assemble_stiffness(const GridDomain& domain, const DensityField& rho, double penal) {
  domain.validate();
  const auto E = simp_moduli(domain, rho, penal);
  const Matrix8 ke = element_stiffness(domain, 1.0);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(domain.num_elements()) * 64);
  for (int e = 0; e < domain.num_elements(); ++e) {
    const auto dofs = domain.element_dofs(e);
    for (int a = 0; a < 8; ++a) {
      for (int b = 0; b < 8; ++b) trips.emplace_back(dofs[a], dofs[b], E[e] * ke(a, b));
    }
  }
  SparseMatrix K(domain.num_dofs(), domain.num_dofs());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

Vector load_vector(const GridDomain& domain, const PointLoad& load) {
  if (load.node < 0 || load.node >= domain.num_nodes()) throw std::invalid_argument("load node out of range");
  Vector f = Vector::Zero(domain.num_dofs());
  f[2 * load.node] = load.fx;
  f[2 * load.node + 1] = load.fy;
  return f;
}

namespace {

std::vector<int> free_dof_list(int ndof, const BoundarySet& bc, std::vector<int>& reduced_index) {
  if (bc.fixed_nodes.empty()) throw std::invalid_argument("boundary set is empty");
  reduced_index.assign(static_cast<size_t>(ndof), 0);
  for (int n : bc.fixed_nodes) {
    if (n < 0 || 2 * n + 1 >= ndof) throw std::invalid_argument("fixed node out of range");
    reduced_index[static_cast<size_t>(2 * n)] = -1;
    reduced_index[static_cast<size_t>(2 * n + 1)] = -1;
  }
  std::vector<int> free;
  for (int d = 0; d < ndof; ++d) {
    if (reduced_index[static_cast<size_t>(d)] == -1) continue;
    reduced_index[static_cast<size_t>(d)] = static_cast<int>(free.size());
    free.push_back(d);
  }
  return free;
}

}  // namespace

Vector solve_static(const SparseMatrix& K, const Vector& f, const BoundarySet& bc) {
  const int ndof = static_cast<int>(K.rows());
  if (f.size() != ndof) throw std::invalid_argument("load vector size mismatch");
  std::vector<int> ridx;
  const auto free = free_dof_list(ndof, bc, ridx);
  Vector u = Vector::Zero(ndof);
  if (f.lpNorm<Eigen::Infinity>() == 0.0) return u;

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(K.nonZeros()));
  for (int c = 0; c < K.outerSize(); ++c) {
    const int rc = ridx[static_cast<size_t>(c)];
    if (rc < 0) continue;
    for (SparseMatrix::InnerIterator it(K, c); it; ++it) {
      const int rr = ridx[static_cast<size_t>(it.row())];
      if (rr >= 0) trips.emplace_back(rr, rc, it.value());
    }
  }
  SparseMatrix Kr(static_cast<Eigen::Index>(free.size()), static_cast<Eigen::Index>(free.size()));
  Kr.setFromTriplets(trips.begin(), trips.end());
  Vector fr(static_cast<Eigen::Index>(free.size()));
  for (size_t k = 0; k < free.size(); ++k) fr[static_cast<Eigen::Index>(k)] = f[free[k]];

  SpdSolver solver;
  solver.factorize(Kr);
  const Vector ur = solver.solve(fr);
  for (size_t k = 0; k < free.size(); ++k) u[free[k]] = ur[static_cast<Eigen::Index>(k)];
  return u;
}

Vector solve_static(const SparseMatrix& K, const GridDomain& domain, const PointLoad& load,
                    const BoundarySet& bc) {
  return solve_static(K, load_vector(domain, load), bc);
}

double compliance(const Vector& u, const SparseMatrix& K) { return u.dot(K * u); }

Vector8 element_displacements(const GridDomain& domain, const Vector& u, int e) {
  const auto dofs = domain.element_dofs(e);
  Vector8 ue;
  for (int a = 0; a < 8; ++a) ue[a] = u[dofs[a]];
  return ue;
}

std::vector<ElementResponse> element_responses(const GridDomain& domain, const Vector& u,
                                               std::span<const double> moduli) {
  if (u.size() != domain.num_dofs()) throw std::invalid_argument("displacement size mismatch");
  if (moduli.size() != static_cast<size_t>(domain.num_elements())) {
    throw std::invalid_argument("moduli size mismatch");
  }
  const auto B = strain_displacement(0.0, 0.0, domain.elem_size);
  const Eigen::Matrix3d D1 = plane_stress(1.0, domain.nu);
  std::vector<ElementResponse> out(static_cast<size_t>(domain.num_elements()));
  for (int e = 0; e < domain.num_elements(); ++e) {
    const Eigen::Vector3d eps = B * element_displacements(domain, u, e);
    const Eigen::Vector3d sig = moduli[static_cast<size_t>(e)] * (D1 * eps);
    auto& r = out[static_cast<size_t>(e)];
    r.strain = {eps[0], eps[1], eps[2]};
    r.stress = {sig[0], sig[1], sig[2]};
  }
  return out;
}

double von_mises(double sxx, double syy, double sxy) {
  // sqrt(3/2 s:s) with s the deviator of the plane-stress tensor (szz = 0).
  return std::sqrt(std::max(0.0, sxx * sxx - sxx * syy + syy * syy + 3.0 * sxy * sxy));
}

double strain_energy_density(const ElementResponse& r) {
  return 0.5 * (r.stress[0] * r.strain[0] + r.stress[1] * r.strain[1] + r.stress[2] * r.strain[2]);
}

double max_principal_strain(const std::array<double, 3>& strain) {
  const double c = 0.5 * (strain[0] + strain[1]);
  const double rad = std::hypot(0.5 * (strain[0] - strain[1]), 0.5 * strain[2]);
  return std::max(std::abs(c + rad), std::abs(c - rad));
}

FieldMaps compute_fields(const GridDomain& domain, const Vector& u) {
  const std::vector<double> E(static_cast<size_t>(domain.num_elements()), domain.E0);
  const auto resp = element_responses(domain, u, E);
  FieldMaps f;
  f.nx = domain.nx;
  f.ny = domain.ny;
  f.von_mises.resize(resp.size());
  f.strain_energy.resize(resp.size());
  for (size_t e = 0; e < resp.size(); ++e) {
    f.von_mises[e] = von_mises(resp[e].stress[0], resp[e].stress[1], resp[e].stress[2]);
    f.strain_energy[e] = strain_energy_density(resp[e]);
  }
  return f;
}

FieldMaps normalize(const FieldMaps& fields) {
  FieldMaps out = fields;
  for (auto* v : {&out.von_mises, &out.strain_energy}) {
    const double m = v->empty() ? 0.0 : *std::max_element(v->begin(), v->end());
    if (m > 0.0) {
      for (double& x : *v) x /= m;
    }
  }
  out.normalized = true;
  return out;
}

FieldMaps input_fields(const GridDomain& domain, const BoundarySet& bc, const PointLoad& load) {
  ReducedSystem system(domain, bc);
  const std::vector<double> E(static_cast<size_t>(domain.num_elements()), domain.E0);
  SpdSolver solver;
  solver.factorize(system.stiffness(E));
  const Vector u = system.expand(solver.solve(system.restrict(load_vector(domain, load))));
  return normalize(compute_fields(domain, u));
}

DensityField binarize(const DensityField& rho, double threshold) {
  DensityField out = rho;
  for (double& v : out.values) v = v >= threshold ? 1.0 : 0.0;
  return out;
}

std::vector<double> binary_moduli(const GridDomain& domain, const DensityField& binary) {
  std::vector<double> E(binary.values.size());
  for (size_t e = 0; e < E.size(); ++e) E[e] = domain.E_min + binary.values[e] * (domain.E0 - domain.E_min);
  return E;
}

double static_compliance(const GridDomain& domain, const BoundarySet& bc, const PointLoad& load,
                         std::span<const double> moduli) {
  ReducedSystem system(domain, bc);
  SpdSolver solver;
  solver.factorize(system.stiffness(moduli));
  const Vector f = system.restrict(load_vector(domain, load));
  return f.dot(solver.solve(f));
}

// ---- ReducedSystem ----------------------------------------------------------

ReducedSystem::ReducedSystem(const GridDomain& domain, const BoundarySet& bc)
    : domain_(domain), unit_ke_(element_stiffness(domain, 1.0)) {
  domain.validate();
  free_dofs_ = free_dof_list(domain.num_dofs(), bc, reduced_index_);
  const int n = size();
  std::vector<Eigen::Triplet<double>> trips;
  for (int e = 0; e < domain.num_elements(); ++e) {
    const auto dofs = domain.element_dofs(e);
    for (int a = 0; a < 8; ++a) {
      const int ra = reduced_index(dofs[a]);
      if (ra < 0) continue;
      for (int b = 0; b < 8; ++b) {
        const int rb = reduced_index(dofs[b]);
        if (rb >= 0) trips.emplace_back(ra, rb, 1.0);
      }
    }
  }
  pattern_.resize(n, n);
  pattern_.setFromTriplets(trips.begin(), trips.end());
  pattern_.makeCompressed();

  auto locate = [&](int r, int c) {
    const int* inner = pattern_.innerIndexPtr();
    const int begin = pattern_.outerIndexPtr()[c];
    const int end = pattern_.outerIndexPtr()[c + 1];
    const int* it = std::lower_bound(inner + begin, inner + end, r);
    return static_cast<int>(it - inner);
  };
  slots_.resize(static_cast<size_t>(domain.num_elements()));
  for (int e = 0; e < domain.num_elements(); ++e) {
    const auto dofs = domain.element_dofs(e);
    auto& s = slots_[static_cast<size_t>(e)];
    for (int a = 0; a < 8; ++a) {
      for (int b = 0; b < 8; ++b) {
        const int ra = reduced_index(dofs[a]);
        const int rb = reduced_index(dofs[b]);
        s[static_cast<size_t>(a * 8 + b)] = (ra >= 0 && rb >= 0) ? locate(ra, rb) : -1;
      }
    }
  }
}

SparseMatrix ReducedSystem::stiffness(std::span<const double> moduli) const {
  if (moduli.size() != slots_.size()) throw std::invalid_argument("moduli size mismatch");
  SparseMatrix K = pattern_;
  double* v = K.valuePtr();
  std::fill(v, v + K.nonZeros(), 0.0);
  for (size_t e = 0; e < slots_.size(); ++e) {
    const double E = moduli[e];
    const auto& s = slots_[e];
    for (int k = 0; k < 64; ++k) {
      if (s[static_cast<size_t>(k)] >= 0) v[s[static_cast<size_t>(k)]] += E * unit_ke_(k / 8, k % 8);
    }
  }
  return K;
}

Vector ReducedSystem::restrict(const Vector& full) const {
  Vector r(size());
  for (int k = 0; k < size(); ++k) r[k] = full[free_dofs_[static_cast<size_t>(k)]];
  return r;
}

Vector ReducedSystem::expand(const Vector& reduced) const {
  Vector full = Vector::Zero(domain_.num_dofs());
  for (int k = 0; k < size(); ++k) full[free_dofs_[static_cast<size_t>(k)]] = reduced[k];
  return full;
}

void SpdSolver::factorize(const SparseMatrix& A) {
  if (!analyzed_) {
    llt_.analyzePattern(A);
    analyzed_ = true;
  }
  llt_.factorize(A);
  if (llt_.info() != Eigen::Success) {
    throw SingularSystemError("constrained stiffness is not positive definite");
  }
}

Vector SpdSolver::solve(const Vector& b) const {
  Vector x = llt_.solve(b);
  if (!x.allFinite()) throw SingularSystemError("non-finite solution");
  return x;
}

// ---- dynamics -------------------------------------------------------------------

Vector assemble_mass(const GridDomain& domain, const DensityField& rho) {
  check_density(domain, rho);
  const double elem_mass = domain.elem_size * domain.elem_size * domain.thickness * domain.mass_density;
  Vector m = Vector::Zero(domain.num_dofs());
  for (int e = 0; e < domain.num_elements(); ++e) {
    const double share = 0.25 * rho.values[static_cast<size_t>(e)] * elem_mass;
    for (int n : domain.element_nodes(e)) {
      m[2 * n] += share;
      m[2 * n + 1] += share;
    }
  }
  return m;
}

SparseMatrix rayleigh_damping(const Vector& mass_diagonal, const SparseMatrix& K, double alpha,
                              double beta) {
  if (mass_diagonal.size() != K.rows()) throw std::invalid_argument("mass/stiffness size mismatch");
  SparseMatrix M(K.rows(), K.cols());
  M.reserve(Eigen::VectorXi::Constant(K.cols(), 1));
  for (Eigen::Index i = 0; i < mass_diagonal.size(); ++i) M.insert(i, i) = mass_diagonal[i];
  SparseMatrix C = alpha * M + beta * K;
  C.prune(0.0);
  return C;
}

std::vector<Vector> newmark_integrate(const ReducedSystem& system, std::span<const double> moduli,
                                      const Vector& mass_diagonal, const Vector& load,
                                      const DynamicLoadSignal& signal, double alpha,
                                      double beta_r, const std::optional<InitialState>& initial) {
  if (signal.n_steps < 1 || signal.samples.size() != static_cast<size_t>(signal.n_steps) + 1) {
    throw std::invalid_argument("signal must carry n_steps + 1 samples");
  }
  constexpr double gamma = 0.5;
  constexpr double beta = 0.25;
  const double dt = signal.dt;
  const double a0 = 1.0 / (beta * dt * dt);
  const double a1 = gamma / (beta * dt);
  const double a2 = 1.0 / (beta * dt);
  const double a3 = 1.0 / (2.0 * beta) - 1.0;
  const double a4 = gamma / beta - 1.0;
  const double a5 = 0.5 * dt * (gamma / beta - 2.0);
  const double a6 = dt * (1.0 - gamma);
  const double a7 = gamma * dt;

  const SparseMatrix K = system.stiffness(moduli);
  const Vector m = system.restrict(mass_diagonal);
  const Vector fr = system.restrict(load);
  const int n = system.size();

  // C = alpha M + beta_r K; effective stiffness K + a1 C + a0 M.
  SparseMatrix Keff = (1.0 + a1 * beta_r) * K;
  for (int k = 0; k < n; ++k) Keff.coeffRef(k, k) += (a0 + a1 * alpha) * m[k];
  SpdSolver solver;
  solver.factorize(Keff);

  auto damping_times = [&](const Vector& x) -> Vector {
    return alpha * m.cwiseProduct(x) + beta_r * (K * x);
  };

  Vector u = Vector::Zero(n);
  Vector v = Vector::Zero(n);
  if (initial) {
    if (initial->displacement.size() > 0) u = system.restrict(initial->displacement);
    if (initial->velocity.size() > 0) v = system.restrict(initial->velocity);
  }
  Vector acc = Vector::Zero(n);
  {
    const Vector rhs = signal.samples[0] * fr - damping_times(v) - K * u;
    for (int k = 0; k < n; ++k) acc[k] = m[k] > 0.0 ? rhs[k] / m[k] : 0.0;
  }

  std::vector<Vector> history;
  history.reserve(static_cast<size_t>(signal.n_steps) + 1);
  history.push_back(system.expand(u));
  for (int i = 1; i <= signal.n_steps; ++i) {
    const Vector rhs = signal.samples[static_cast<size_t>(i)] * fr +
                       m.cwiseProduct(a0 * u + a2 * v + a3 * acc) +
                       damping_times(a1 * u + a4 * v + a5 * acc);
    const Vector u_next = solver.solve(rhs);
    const Vector acc_next = a0 * (u_next - u) - a2 * v - a3 * acc;
    v += a6 * acc + a7 * acc_next;
    acc = acc_next;
    u = u_next;
    history.push_back(system.expand(u));
  }
  return history;
}

std::vector<Vector> newmark_integrate(const GridDomain& domain, const DensityField& rho,
                                      const PointLoad& load, const DynamicLoadSignal& signal,
                                      const BoundarySet& bc, double alpha, double beta_r,
                                      double penal, const std::optional<InitialState>& initial) {
  ReducedSystem system(domain, bc);
  const auto E = simp_moduli(domain, rho, penal);
  return newmark_integrate(system, E, assemble_mass(domain, rho), load_vector(domain, load), signal,
                           alpha, beta_r, initial);
}

double dynamic_compliance(std::span<const Vector> load_history,
                          std::span<const Vector> displacement_history, double dt) {
  if (load_history.size() != displacement_history.size()) {
    throw std::invalid_argument("load and displacement histories differ in length");
  }
  double c = 0.0;
  for (size_t i = 0; i < load_history.size(); ++i) c += load_history[i].dot(displacement_history[i]);
  return c * dt;
}

std::vector<Vector> load_history(const GridDomain& domain, const PointLoad& load,
                                 const DynamicLoadSignal& signal) {
  const Vector f = load_vector(domain, load);
  std::vector<Vector> out;
  out.reserve(signal.samples.size());
  for (double s : signal.samples) out.push_back(s * f);
  return out;
}

}  // namespace topo::fea
