#include "topo/simp.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace topo::simp {

using fea::DensityField;
using fea::GridDomain;
using fea::Vector;

void SimpConfig::validate() const {
  if (!(vf_target > 0.0 && vf_target <= 1.0)) throw std::invalid_argument("vf_target must lie in (0, 1]");
  if (penal < 1.0) throw std::invalid_argument("penal must be >= 1");
  if (filter_radius < 0.0) throw std::invalid_argument("filter_radius must be >= 0");
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (!(move_limit > 0.0)) throw std::invalid_argument("move_limit must be positive");
}

void OptimizationTrace::write_csv(std::ostream& os) const {
  os << "iteration,compliance,vf,change\n";
  os.precision(17);
  for (const auto& e : entries) {
    os << e.iteration << ',' << e.compliance << ',' << e.volume_fraction << ',' << e.change << '\n';
  }
}

std::vector<double> compliance_sensitivity(const GridDomain& domain, const DensityField& rho,
                                           const Vector& u, double penal) {
  const fea::Matrix8 k0 = fea::element_stiffness(domain, 1.0);
  std::vector<double> dc(static_cast<size_t>(domain.num_elements()));
  for (int e = 0; e < domain.num_elements(); ++e) {
    const fea::Vector8 ue = fea::element_displacements(domain, u, e);
    const double r = rho.values[static_cast<size_t>(e)];
    const double drho = penal == 1.0 ? 1.0 : penal * std::pow(r, penal - 1.0);
    dc[static_cast<size_t>(e)] = -drho * (domain.E0 - domain.E_min) * ue.dot(k0 * ue);
  }
  return dc;
}

std::vector<double> filter_sensitivities(std::span<const double> grad, const DensityField& rho,
                                         double radius) {
  if (radius < 0.0) throw std::invalid_argument("filter radius must be >= 0");
  if (grad.size() != rho.values.size()) throw std::invalid_argument("gradient/density size mismatch");
  std::vector<double> out(grad.begin(), grad.end());
  if (radius == 0.0) return out;
  const int nx = rho.nx;
  const int ny = rho.ny;
  const int reach = static_cast<int>(std::ceil(radius)) - 1;
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      double num = 0.0;
      double wsum = 0.0;
      for (int jj = std::max(j - reach, 0); jj <= std::min(j + reach, ny - 1); ++jj) {
        for (int ii = std::max(i - reach, 0); ii <= std::min(i + reach, nx - 1); ++ii) {
          const double w = radius - std::hypot(i - ii, j - jj);
          if (w <= 0.0) continue;
          const size_t f = static_cast<size_t>(jj) * nx + ii;
          num += w * rho.values[f] * grad[f];
          wsum += w;
        }
      }
      const size_t e = static_cast<size_t>(j) * nx + i;
      out[e] = num / (std::max(1e-3, rho.values[e]) * wsum);
    }
  }
  return out;
}

namespace {

constexpr int kMaxHalvings = 100;
constexpr double kVolumeTol = 1e-9;

// Bisection on a multiplier so that mean(x(lambda)) = target, where
// mean(x(lambda)) is continuous and non-increasing. Searches lambda in
// log-space when `log_space`, linearly otherwise.
template <typename Fn>
std::vector<double> match_volume(Fn&& design_for, double target, double lo, double hi, bool log_space) {
  auto mean_of = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
  };
  std::vector<double> x;
  double best_err = INFINITY;
  std::vector<double> best;
  for (int k = 0; k < kMaxHalvings; ++k) {
    const double mid = log_space ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
    x = design_for(mid);
    const double vol = mean_of(x);
    const double err = std::abs(vol - target);
    if (err < best_err) {
      best_err = err;
      best = x;
    }
    if (err <= kVolumeTol) return x;
    if (vol > target) lo = mid;
    else hi = mid;
  }
  if (best_err <= 1e-6) return best;
  throw std::runtime_error("volume bisection did not converge after 100 halvings");
}

}  // namespace

DensityField oc_update(const DensityField& rho, std::span<const double> grad, const SimpConfig& config) {
  if (grad.size() != rho.values.size()) throw std::invalid_argument("gradient/density size mismatch");
  const bool informative = std::any_of(grad.begin(), grad.end(), [](double g) { return g != 0.0; });
  if (!informative) return rho;

  const double move = config.move_limit;
  const auto& x = rho.values;
  auto design_for = [&](double lambda) {
    std::vector<double> xn(x.size());
    for (size_t e = 0; e < x.size(); ++e) {
      const double g = std::max(0.0, -grad[e]);
      const double cand = x[e] * std::sqrt(g / lambda);
      const double lo = std::max(0.0, x[e] - move);
      const double hi = std::min(1.0, x[e] + move);
      xn[e] = std::clamp(cand, lo, hi);
    }
    return xn;
  };
  DensityField out = rho;
  out.values = match_volume(design_for, config.vf_target, 1e-40, 1e40, true);
  return out;
}

DensityField MmaUpdater::update(const DensityField& rho, std::span<const double> grad,
                                const SimpConfig& config) {
  if (grad.size() != rho.values.size()) throw std::invalid_argument("gradient/density size mismatch");
  const auto& x = rho.values;
  const size_t n = x.size();
  const bool informative = std::any_of(grad.begin(), grad.end(), [](double g) { return g != 0.0; });
  if (!informative) return rho;

  constexpr double asyinit = 0.5, asyincr = 1.2, asydecr = 0.7;
  if (low_.size() != n) {
    iteration_ = 0;
    low_.assign(n, 0.0);
    upp_.assign(n, 1.0);
  }
  ++iteration_;
  for (size_t e = 0; e < n; ++e) {
    if (iteration_ <= 2) {
      low_[e] = x[e] - asyinit;
      upp_[e] = x[e] + asyinit;
    } else {
      const double s = (x[e] - x1_[e]) * (x1_[e] - x2_[e]);
      const double g = s < 0.0 ? asydecr : (s > 0.0 ? asyincr : 1.0);
      low_[e] = std::clamp(x[e] - g * (x1_[e] - low_[e]), x[e] - 10.0, x[e] - 0.01);
      upp_[e] = std::clamp(x[e] + g * (upp_[e] - x1_[e]), x[e] + 0.01, x[e] + 10.0);
    }
  }

  double gmax = 0.0;
  for (double g : grad) gmax = std::max(gmax, std::abs(g));
  std::vector<double> p(n), q(n), alpha(n), beta(n);
  for (size_t e = 0; e < n; ++e) {
    const double g = grad[e] / gmax;
    const double gp = std::max(g, 0.0), gm = std::max(-g, 0.0);
    const double du = upp_[e] - x[e], dl = x[e] - low_[e];
    p[e] = du * du * (1.001 * gp + 0.001 * gm + 1e-5);
    q[e] = dl * dl * (0.001 * gp + 1.001 * gm + 1e-5);
    alpha[e] = std::max({0.0, low_[e] + 0.1 * dl, x[e] - config.move_limit});
    beta[e] = std::min({1.0, upp_[e] - 0.1 * du, x[e] + config.move_limit});
  }

  // For a fixed multiplier each coordinate minimizes a separable convex
  // function; its derivative p/(U-x)^2 - q/(x-L)^2 + lambda is increasing.
  auto design_for = [&](double lambda) {
    std::vector<double> xn(n);
    for (size_t e = 0; e < n; ++e) {
      auto deriv = [&](double t) {
        const double du = upp_[e] - t, dl = t - low_[e];
        return p[e] / (du * du) - q[e] / (dl * dl) + lambda;
      };
      double a = alpha[e], b = beta[e];
      if (deriv(a) >= 0.0) {
        xn[e] = a;
      } else if (deriv(b) <= 0.0) {
        xn[e] = b;
      } else {
        for (int it = 0; it < 60; ++it) {
          const double m = 0.5 * (a + b);
          (deriv(m) > 0.0 ? b : a) = m;
        }
        xn[e] = 0.5 * (a + b);
      }
    }
    return xn;
  };
  DensityField out = rho;
  out.values = match_volume(design_for, config.vf_target, -1e6, 1e6, false);
  x2_ = x1_.empty() ? x : x1_;
  x1_ = x;
  return out;
}

namespace {

double max_change(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t e = 0; e < a.size(); ++e) m = std::max(m, std::abs(a[e] - b[e]));
  return m;
}

// Shared design loop; `analyse` returns the objective and fills the raw
// sensitivity for the current design.
template <typename Analyse>
OptimizationResult run_design_loop(const GridDomain& domain, const SimpConfig& config,
                                   const ProgressCallback& progress, Analyse&& analyse) {
  OptimizationResult result;
  DensityField x = DensityField::uniform(domain.nx, domain.ny, std::min(1.0, config.vf_target));
  std::vector<double> dc;
  if (config.vf_target >= 1.0) {
    result.initial_objective = result.final_objective = analyse(x, dc);
    result.density = x;
    return result;
  }
  MmaUpdater mma;
  bool moved = false;
  for (int it = 0; it < config.max_iters; ++it) {
    const double obj = analyse(x, dc);
    if (it == 0) result.initial_objective = obj;
    const auto filtered = filter_sensitivities(dc, x, config.filter_radius);
    DensityField xn = config.update == UpdateRule::oc ? oc_update(x, filtered, config)
                                                      : mma.update(x, filtered, config);
    TraceEntry entry{it, obj, xn.mean(), max_change(xn.values, x.values)};
    result.trace.entries.push_back(entry);
    if (progress) progress(entry);
    moved = moved || entry.change > 0.0;
    x = std::move(xn);
    if (entry.change < config.change_tol) break;
  }
  result.final_objective = moved ? analyse(x, dc) : result.initial_objective;
  result.density = std::move(x);
  return result;
}

}  // namespace

OptimizationResult optimize_static(const GridDomain& domain, const fea::BoundarySet& bc,
                                   const fea::PointLoad& load, const SimpConfig& config,
                                   const ProgressCallback& progress) {
  config.validate();
  domain.validate();
  const fea::ReducedSystem system(domain, bc);
  const Vector f = system.restrict(fea::load_vector(domain, load));
  fea::SpdSolver solver;
  auto analyse = [&](const DensityField& x, std::vector<double>& dc) {
    const auto E = fea::simp_moduli(domain, x, config.penal);
    solver.factorize(system.stiffness(E));
    const Vector ur = solver.solve(f);
    dc = compliance_sensitivity(domain, x, system.expand(ur), config.penal);
    return f.dot(ur);
  };
  return run_design_loop(domain, config, progress, analyse);
}

OptimizationResult optimize_static(const GridDomain& domain, const ProblemSpec& spec, SimpConfig config,
                                   const ProgressCallback& progress) {
  const auto r = resolve(spec, domain);
  config.vf_target = spec.volume_fraction;
  return optimize_static(domain, r.bc, r.load, config, progress);
}

std::vector<double> dynamic_sensitivity(const GridDomain& domain, const DensityField& rho,
                                        std::span<const Vector> displacement_history, double dt,
                                        double penal) {
  std::vector<double> total(static_cast<size_t>(domain.num_elements()), 0.0);
  for (const auto& u : displacement_history) {
    const auto step = compliance_sensitivity(domain, rho, u, penal);
    for (size_t e = 0; e < total.size(); ++e) total[e] += step[e] * dt;
  }
  return total;
}

double evaluate_dynamic_compliance(const GridDomain& domain, const fea::BoundarySet& bc,
                                   const fea::PointLoad& load, const fea::DynamicLoadSignal& signal,
                                   std::span<const double> moduli, const DensityField& mass_rho,
                                   const DynamicSettings& dynamics) {
  const fea::ReducedSystem system(domain, bc);
  const Vector f = fea::load_vector(domain, load);
  GridDomain massive = domain;
  massive.mass_density = dynamics.mass_density;
  const auto hist = fea::newmark_integrate(system, moduli, fea::assemble_mass(massive, mass_rho), f, signal,
                                           dynamics.rayleigh_alpha, dynamics.rayleigh_beta);
  double c = 0.0;
  for (size_t i = 0; i < hist.size(); ++i) c += signal.samples[i] * f.dot(hist[i]);
  return c * signal.dt;
}

OptimizationResult optimize_dynamic(const GridDomain& domain, const fea::BoundarySet& bc,
                                    const fea::PointLoad& load, const fea::DynamicLoadSignal& signal,
                                    const SimpConfig& config, const DynamicSettings& dynamics,
                                    const ProgressCallback& progress) {
  config.validate();
  domain.validate();
  const fea::ReducedSystem system(domain, bc);
  const Vector f = fea::load_vector(domain, load);
  GridDomain massive = domain;
  massive.mass_density = dynamics.mass_density;
  auto analyse = [&](const DensityField& x, std::vector<double>& dc) {
    const auto E = fea::simp_moduli(domain, x, config.penal);
    const auto hist = fea::newmark_integrate(system, E, fea::assemble_mass(massive, x), f, signal,
                                             dynamics.rayleigh_alpha, dynamics.rayleigh_beta);
    dc = dynamic_sensitivity(domain, x, hist, signal.dt, config.penal);
    double c = 0.0;
    for (size_t i = 0; i < hist.size(); ++i) c += signal.samples[i] * f.dot(hist[i]);
    return c * signal.dt;
  };
  return run_design_loop(domain, config, progress, analyse);
}

OptimizationResult optimize_dynamic(const GridDomain& domain, const ProblemSpec& spec,
                                    const fea::DynamicLoadSignal& signal, SimpConfig config,
                                    const DynamicSettings& dynamics, const ProgressCallback& progress) {
  const auto r = resolve(spec, domain);
  config.vf_target = spec.volume_fraction;
  return optimize_dynamic(domain, r.bc, r.load, signal, config, dynamics, progress);
}

double design_compliance(const GridDomain& domain, const ProblemSpec& spec, const DensityField& design,
                         const DynamicSettings& dynamics) {
  const auto r = resolve(spec, domain);
  const DensityField binary = fea::binarize(design, 0.5);
  const auto E = fea::binary_moduli(domain, binary);
  if (spec.dynamic_kind == DynamicKind::none) return fea::static_compliance(domain, r.bc, r.load, E);
  const auto signal = fea::DynamicLoadSignal::make(signal_kind(spec.dynamic_kind), dynamics.n_steps,
                                                   dynamics.duration);
  return evaluate_dynamic_compliance(domain, r.bc, r.load, signal, E, binary, dynamics);
}

}  // namespace topo::simp
