#include "dense_oracle.hpp"
#include "topo/simp.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace topo;
using namespace topo::simp;
using topo::fea::DensityField;

namespace {

fea::GridDomain grid(int nx, int ny) {
  fea::GridDomain d;
  d.nx = nx;
  d.ny = ny;
  return d;
}

fea::BoundarySet left_edge(const fea::GridDomain& d) {
  fea::BoundarySet bc;
  for (int y = 0; y <= d.ny; ++y) bc.fixed_nodes.push_back(d.node(0, y));
  return bc;
}

DensityField random_density(int nx, int ny, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  auto rho = DensityField::uniform(nx, ny, 0.0);
  for (double& v : rho.values) v = u(rng);
  return rho;
}

// Compliance through the dense oracle, independent of the sparse path.
double dense_compliance(const fea::GridDomain& d, const DensityField& rho, const fea::PointLoad& load,
                        const fea::BoundarySet& bc, double penal) {
  std::vector<double> E;
  for (double r : rho.values) E.push_back(d.E_min + std::pow(r, penal) * (d.E0 - d.E_min));
  const auto K = oracle::dense_stiffness(d.nx, d.ny, E, d.nu);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(K.rows());
  f[2 * load.node] = load.fx;
  f[2 * load.node + 1] = load.fy;
  return f.dot(oracle::dense_solve(K, f, bc.fixed_nodes));
}

}  // namespace

TEST(Sensitivity, MatchesCentralDifferences) {
  const auto d = grid(6, 4);
  const auto bc = left_edge(d);
  const fea::PointLoad load{d.node(6, 0), 0.0, -1.0};
  const auto rho = random_density(6, 4, 7);
  const auto K = fea::assemble_stiffness(d, rho, 3.0);
  const auto u = fea::solve_static(K, d, load, bc);
  const auto dc = compliance_sensitivity(d, rho, u, 3.0);
  for (int e : {0, 5, 11, 17, 23}) {
    const double h = 1e-6;
    auto plus = rho, minus = rho;
    plus.values[e] += h;
    minus.values[e] -= h;
    const double fd = (dense_compliance(d, plus, load, bc, 3.0) - dense_compliance(d, minus, load, bc, 3.0)) / (2 * h);
    EXPECT_NEAR(dc[e], fd, 1e-5 * std::abs(fd)) << "element " << e;
    EXPECT_LT(dc[e], 0.0);
  }
}

TEST(Filter, ZeroRadiusIsIdentity) {
  const auto rho = random_density(5, 5, 1);
  std::vector<double> g(25);
  for (size_t e = 0; e < g.size(); ++e) g[e] = -1.0 - 0.1 * e;
  EXPECT_EQ(filter_sensitivities(g, rho, 0.0), g);
}

TEST(Filter, MatchesBruteForceDefinition) {
  const int nx = 7, ny = 5;
  const auto rho = random_density(nx, ny, 3);
  std::vector<double> g(nx * ny);
  for (size_t e = 0; e < g.size(); ++e) g[e] = -std::cos(0.3 * e) - 1.5;
  const double r = 2.3;
  const auto out = filter_sensitivities(g, rho, r);
  for (int e = 0; e < nx * ny; ++e) {
    double num = 0, den = 0;
    for (int f = 0; f < nx * ny; ++f) {
      const double w = std::max(0.0, r - std::hypot(e % nx - f % nx, e / nx - f / nx));
      num += w * rho.values[f] * g[f];
      den += w;
    }
    EXPECT_NEAR(out[e], num / (rho.values[e] * den), 1e-12);
  }
}

TEST(OcUpdate, HitsVolumeWithinMoveLimits) {
  const auto rho = DensityField::uniform(8, 8, 0.4);
  std::vector<double> g(64);
  for (size_t e = 0; e < 64; ++e) g[e] = -(1.0 + e % 7);
  SimpConfig cfg;
  cfg.vf_target = 0.4;
  const auto x = oc_update(rho, g, cfg);
  EXPECT_NEAR(x.mean(), 0.4, 1e-9);
  for (size_t e = 0; e < 64; ++e) {
    EXPECT_LE(std::abs(x.values[e] - 0.4), cfg.move_limit + 1e-15);
    EXPECT_GE(x.values[e], 0.0);
    EXPECT_LE(x.values[e], 1.0);
  }
}

TEST(OcUpdate, ZeroGradientLeavesDesign) {
  const auto rho = random_density(4, 4, 5);
  const std::vector<double> g(16, 0.0);
  EXPECT_EQ(oc_update(rho, g, SimpConfig{}).values, rho.values);
}

TEST(MmaUpdate, HitsVolume) {
  const auto rho = DensityField::uniform(8, 8, 0.5);
  std::vector<double> g(64);
  for (size_t e = 0; e < 64; ++e) g[e] = -(0.5 + (e * 37) % 11);
  SimpConfig cfg;
  cfg.vf_target = 0.5;
  cfg.update = UpdateRule::mma;
  MmaUpdater mma;
  auto x = mma.update(rho, g, cfg);
  EXPECT_NEAR(x.mean(), 0.5, 1e-6);
  x = mma.update(x, g, cfg);
  EXPECT_NEAR(x.mean(), 0.5, 1e-6);
}

TEST(OptimizeStatic, CantileverImprovesOnUniformDesign) {
  const auto d = grid(32, 16);
  SimpConfig cfg;
  cfg.vf_target = 0.5;
  const auto r = optimize_static(d, left_edge(d), fea::PointLoad{d.node(32, 0), 0.0, -1.0}, cfg);
  EXPECT_NEAR(r.density.mean(), 0.5, 1e-3);
  EXPECT_LT(r.final_objective, 0.6 * r.initial_objective);
  EXPECT_LE(static_cast<int>(r.trace.entries.size()), cfg.max_iters);
  for (double v : r.density.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(OptimizeStatic, MmaAlsoConverges) {
  const auto d = grid(24, 12);
  SimpConfig cfg;
  cfg.vf_target = 0.5;
  cfg.update = UpdateRule::mma;
  cfg.max_iters = 80;
  const auto r = optimize_static(d, left_edge(d), fea::PointLoad{d.node(24, 0), 0.0, -1.0}, cfg);
  EXPECT_NEAR(r.density.mean(), 0.5, 1e-3);
  EXPECT_LT(r.final_objective, 0.7 * r.initial_objective);
}

TEST(OptimizeStatic, FullVolumeReturnsSolidDesign) {
  const auto d = grid(8, 8);
  SimpConfig cfg;
  cfg.vf_target = 1.0;
  const auto r = optimize_static(d, left_edge(d), fea::PointLoad{d.node(8, 0), 0.0, -1.0}, cfg);
  for (double v : r.density.values) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(r.trace.entries.empty());
}

TEST(OptimizeStatic, SpecOverloadUsesSpecVolume) {
  const auto d = grid(16, 16);
  const auto spec = cantilever(16, 16, 0.35);
  const auto r = optimize_static(d, spec, SimpConfig{});
  EXPECT_NEAR(r.density.mean(), 0.35, 1e-3);
}

TEST(OptimizeStatic, RejectsBadConfig) {
  SimpConfig cfg;
  cfg.penal = 0.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Trace, CsvHeader) {
  OptimizationTrace t;
  t.entries.push_back({0, 2.0, 0.4, 0.2});
  std::ostringstream os;
  t.write_csv(os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "iteration,compliance,vf,change");
}

TEST(DynamicSensitivity, SingleUnitStepIsStaticKernel) {
  const auto d = grid(4, 4);
  const auto rho = random_density(4, 4, 11);
  const auto K = fea::assemble_stiffness(d, rho, 3.0);
  const auto u = fea::solve_static(K, d, fea::PointLoad{d.node(4, 0), 0.0, -1.0}, left_edge(d));
  const std::vector<fea::Vector> hist{u};
  EXPECT_EQ(dynamic_sensitivity(d, rho, hist, 1.0, 3.0), compliance_sensitivity(d, rho, u, 3.0));
}

TEST(DynamicSensitivity, AccumulatesOverSteps) {
  const auto d = grid(3, 3);
  const auto rho = random_density(3, 3, 2);
  const auto K = fea::assemble_stiffness(d, rho, 3.0);
  const auto u = fea::solve_static(K, d, fea::PointLoad{d.node(3, 3), 1.0, 0.0}, left_edge(d));
  const std::vector<fea::Vector> hist{u, 2.0 * u};
  const auto one = compliance_sensitivity(d, rho, u, 3.0);
  const auto acc = dynamic_sensitivity(d, rho, hist, 0.5, 3.0);
  for (size_t e = 0; e < one.size(); ++e) EXPECT_NEAR(acc[e], 0.5 * 5.0 * one[e], 1e-14 * std::abs(one[e]));
}

TEST(OptimizeDynamic, ReducesDynamicCompliance) {
  const auto d = grid(16, 16);
  auto spec = cantilever(16, 16, 0.4);
  spec.dynamic_kind = DynamicKind::impulse;
  SimpConfig cfg;
  cfg.max_iters = 40;
  DynamicSettings dyn;
  dyn.n_steps = 32;
  const auto sig = fea::DynamicLoadSignal::make(fea::SignalKind::impulse, dyn.n_steps);
  const auto r = optimize_dynamic(d, spec, sig, cfg, dyn);
  EXPECT_NEAR(r.density.mean(), 0.4, 1e-3);
  EXPECT_LT(r.final_objective, r.initial_objective);
  EXPECT_TRUE(std::isfinite(design_compliance(d, spec, r.density, dyn)));
}

TEST(DesignCompliance, BinarizesBeforeReanalysis) {
  const auto d = grid(8, 8);
  const auto spec = cantilever(8, 8, 0.5);
  auto rho = DensityField::uniform(8, 8, 0.7);
  const double c = design_compliance(d, spec, rho);
  EXPECT_NEAR(c, oracle::cantilever_compliance(8, 8), 1e-8 * c);
}
