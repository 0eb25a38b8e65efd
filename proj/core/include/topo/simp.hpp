#pragma once

// Density-based (SIMP) compliance minimization under a volume constraint,
// for static point loads and for time-varying loads (dynamic compliance).

#include "topo/fea.hpp"
#include "topo/problem.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace topo::simp {

enum class UpdateRule { oc, mma };

struct SimpConfig {
  double penal = 3.0;
  double vf_target = 0.4;
  int max_iters = 200;
  double move_limit = 0.2;
  double change_tol = 0.01;
  double filter_radius = 1.5;
  UpdateRule update = UpdateRule::oc;

  void validate() const;
};

struct DynamicSettings {
  int n_steps = 64;
  double duration = 1.0;
  double rayleigh_alpha = 0.1;
  double rayleigh_beta = 0.001;
  /// Material mass per unit volume used by dynamic analyses. With E0 = 1 and
  /// unit density the lowest eigenperiod of a 64x64 domain is a few hundred
  /// time units, so a load on t in [0, 1] never reaches the supports.
  double mass_density = 1e-7;
};

struct TraceEntry {
  int iteration = 0;
  double compliance = 0.0;       // objective of the design analysed this iteration
  double volume_fraction = 0.0;  // of the updated design
  double change = 0.0;           // max |rho_new - rho|
};

struct OptimizationTrace {
  std::vector<TraceEntry> entries;

  /// CSV with header `iteration,compliance,vf,change`.
  void write_csv(std::ostream& os) const;
};

struct OptimizationResult {
  fea::DensityField density;
  OptimizationTrace trace;
  double initial_objective = 0.0;  // uniform start
  double final_objective = 0.0;    // returned design
};

using ProgressCallback = std::function<void(const TraceEntry&)>;

/// dC/drho_e = -p rho_e^(p-1) (E0 - E_min) u_e^T K0 u_e with K0 the unit-modulus
/// element matrix.
std::vector<double> compliance_sensitivity(const fea::GridDomain& domain, const fea::DensityField& rho,
                                           const fea::Vector& u, double penal);

/// Density-weighted mesh-independency filter with cone weights max(0, r - dist).
std::vector<double> filter_sensitivities(std::span<const double> grad, const fea::DensityField& rho,
                                         double radius);

/// Optimality-criteria step with move limits; the Lagrange multiplier is found
/// by bisection so the mean density matches vf_target.
fea::DensityField oc_update(const fea::DensityField& rho, std::span<const double> grad,
                            const SimpConfig& config);

/// Method of moving asymptotes for the single volume constraint. Keeps the
/// asymptote history between calls.
class MmaUpdater {
 public:
  fea::DensityField update(const fea::DensityField& rho, std::span<const double> grad,
                           const SimpConfig& config);

 private:
  int iteration_ = 0;
  std::vector<double> x1_, x2_, low_, upp_;
};

OptimizationResult optimize_static(const fea::GridDomain& domain, const fea::BoundarySet& bc,
                                   const fea::PointLoad& load, const SimpConfig& config,
                                   const ProgressCallback& progress = {});

/// Uses spec.volume_fraction as the volume target.
OptimizationResult optimize_static(const fea::GridDomain& domain, const ProblemSpec& spec,
                                   SimpConfig config, const ProgressCallback& progress = {});

/// Rectangle-rule accumulation of the static per-step kernel over a
/// displacement history (mass and damping contributions are not included).
std::vector<double> dynamic_sensitivity(const fea::GridDomain& domain, const fea::DensityField& rho,
                                        std::span<const fea::Vector> displacement_history, double dt,
                                        double penal);

OptimizationResult optimize_dynamic(const fea::GridDomain& domain, const fea::BoundarySet& bc,
                                    const fea::PointLoad& load, const fea::DynamicLoadSignal& signal,
                                    const SimpConfig& config, const DynamicSettings& dynamics = {},
                                    const ProgressCallback& progress = {});

OptimizationResult optimize_dynamic(const fea::GridDomain& domain, const ProblemSpec& spec,
                                    const fea::DynamicLoadSignal& signal, SimpConfig config,
                                    const DynamicSettings& dynamics = {},
                                    const ProgressCallback& progress = {});

/// Dynamic compliance of a design under a point load and signal.
double evaluate_dynamic_compliance(const fea::GridDomain& domain, const fea::BoundarySet& bc,
                                   const fea::PointLoad& load, const fea::DynamicLoadSignal& signal,
                                   std::span<const double> moduli, const fea::DensityField& mass_rho,
                                   const DynamicSettings& dynamics);

/// Compliance of a design after thresholding at 0.5 and re-analysis with
/// binary moduli: static compliance for static specs, dynamic compliance under
/// the spec's load signal otherwise.
double design_compliance(const fea::GridDomain& domain, const ProblemSpec& spec,
                         const fea::DensityField& design, const DynamicSettings& dynamics = {});

}  // namespace topo::simp
