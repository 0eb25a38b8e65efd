#include "dense_oracle.hpp"
#include "topo/fea.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace topo::fea;

namespace {

GridDomain grid(int nx, int ny) {
  GridDomain d;
  d.nx = nx;
  d.ny = ny;
  return d;
}

BoundarySet left_edge(const GridDomain& d) {
  BoundarySet bc;
  for (int y = 0; y <= d.ny; ++y) bc.fixed_nodes.push_back(d.node(0, y));
  return bc;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST(ElementStiffness, MatchesClosedForm) {
  const auto d = grid(1, 1);
  const Matrix8 ke = element_stiffness(d, 1.0);
  const auto ref = oracle::q4_stiffness(1.0, 0.3);
  EXPECT_LT((ke - ref).cwiseAbs().maxCoeff(), 1e-14);
  // (1/2 - nu/6) / (1 - nu^2)
  EXPECT_NEAR(ke(0, 0), 0.45 / 0.91, 1e-14);
}

TEST(ElementStiffness, SymmetricWithRigidBodyNullspace) {
  const auto d = grid(1, 1);
  const Matrix8 ke = element_stiffness(d, 2.5);
  EXPECT_LT((ke - ke.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  Vector8 tx, ty, rot;
  tx << 1, 0, 1, 0, 1, 0, 1, 0;
  ty << 0, 1, 0, 1, 0, 1, 0, 1;
  // small rotation about the element centre: (u, v) = (-y, x)
  rot << 0.5, -0.5, 0.5, 0.5, -0.5, 0.5, -0.5, -0.5;
  EXPECT_LT((ke * tx).norm(), 1e-13);
  EXPECT_LT((ke * ty).norm(), 1e-13);
  EXPECT_LT((ke * rot).norm(), 1e-13);
  for (int r = 0; r < 8; ++r) EXPECT_NEAR(ke.row(r).sum(), 0.0, 1e-13);
}

TEST(ElementStiffness, LinearInModulus) {
  const auto d = grid(1, 1);
  EXPECT_LT((element_stiffness(d, 2.0) - 2.0 * element_stiffness(d, 1.0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Assembly, SingleElementEqualsElementMatrix) {
  const auto d = grid(1, 1);
  const auto K = assemble_stiffness(d, DensityField::uniform(1, 1, 1.0), 3.0);
  const Eigen::MatrixXd dense = K;
  // global nodes 0 1 2 3 are element-local 0 1 3 2
  const int local_of[4] = {0, 1, 3, 2};
  const Matrix8 ke = element_stiffness(d, 1.0);
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      EXPECT_NEAR(dense(a, b), ke(2 * local_of[a / 2] + a % 2, 2 * local_of[b / 2] + b % 2), 1e-8);
}

TEST(Assembly, VoidElementsCarryEmin) {
  const auto d = grid(2, 2);
  const Eigen::MatrixXd K = assemble_stiffness(d, DensityField::uniform(2, 2, 0.0), 3.0);
  const std::vector<double> E(4, d.E_min);
  EXPECT_LT((K - oracle::dense_stiffness(2, 2, E, d.nu)).cwiseAbs().maxCoeff(), 1e-20);
}

TEST(Assembly, SimpInterpolation) {
  const auto d = grid(2, 1);
  const auto E = simp_moduli(d, DensityField::uniform(2, 1, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(E[0], d.E_min + 0.125 * (d.E0 - d.E_min));
}

TEST(Assembly, RejectsDensitiesOutsideUnitInterval) {
  const auto d = grid(2, 2);
  auto rho = DensityField::uniform(2, 2, 0.5);
  rho.values[3] = 1.5;
  EXPECT_THROW(assemble_stiffness(d, rho, 3.0), std::invalid_argument);
  rho.values[3] = -0.1;
  EXPECT_THROW(simp_moduli(d, rho, 3.0), std::invalid_argument);
}

TEST(Assembly, SymmetricForRandomDensity) {
  const auto d = grid(5, 4);
  DensityField rho = DensityField::uniform(5, 4, 0.0);
  for (size_t e = 0; e < rho.values.size(); ++e) rho.values[e] = 0.05 + 0.9 * std::fmod(0.37 * e, 1.0);
  const Eigen::MatrixXd K = assemble_stiffness(d, rho, 3.0);
  EXPECT_LT((K - K.transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(StaticSolve, ZeroLoadGivesZeroDisplacement) {
  const auto d = grid(3, 3);
  const auto K = assemble_stiffness(d, DensityField::uniform(3, 3, 1.0), 3.0);
  const Vector u = solve_static(K, Vector::Zero(d.num_dofs()), left_edge(d));
  EXPECT_EQ(u.norm(), 0.0);
}

TEST(StaticSolve, SingleElementMatchesDenseSolve) {
  const auto d = grid(1, 1);
  const auto K = assemble_stiffness(d, DensityField::uniform(1, 1, 1.0), 3.0);
  const BoundarySet bc{{d.node(0, 0), d.node(0, 1)}};
  const PointLoad load{d.node(1, 0), 1.0, 0.0};
  const Vector u = solve_static(K, d, load, bc);
  const Vector ref = oracle::dense_solve(oracle::dense_stiffness(1, 1, {1.0}, 0.3), load_vector(d, load), bc.fixed_nodes);
  EXPECT_LT((u - ref).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(u[0], 0.0);
  EXPECT_EQ(u[1], 0.0);
}

TEST(StaticSolve, CantileverComplianceMatchesDenseOracle) {
  for (int n : {4, 8}) {
    const auto d = grid(n, n);
    const auto K = assemble_stiffness(d, DensityField::uniform(n, n, 1.0), 3.0);
    const Vector u = solve_static(K, d, PointLoad{d.node(n, 0), 0.0, -1.0}, left_edge(d));
    const double c = load_vector(d, PointLoad{d.node(n, 0), 0.0, -1.0}).dot(u);
    EXPECT_LT(rel(c, oracle::cantilever_compliance(n, n)), 1e-8) << n;
  }
}

TEST(StaticSolve, ResidualAndConstrainedEntries) {
  const auto d = grid(6, 3);
  const auto K = assemble_stiffness(d, DensityField::uniform(6, 3, 0.7), 3.0);
  const auto bc = left_edge(d);
  const PointLoad load{d.node(6, 3), 0.6, -0.8};
  const Vector f = load_vector(d, load);
  const Vector u = solve_static(K, f, bc);
  Vector r = K * u - f;
  for (int n : bc.fixed_nodes) r[2 * n] = r[2 * n + 1] = 0.0;
  EXPECT_LT(r.cwiseAbs().maxCoeff() / f.cwiseAbs().maxCoeff(), 1e-10);
  for (int n : bc.fixed_nodes) {
    EXPECT_EQ(u[2 * n], 0.0);
    EXPECT_EQ(u[2 * n + 1], 0.0);
  }
}

TEST(StaticSolve, UnconstrainedSystemIsSingular) {
  const auto d = grid(2, 2);
  const auto K = assemble_stiffness(d, DensityField::uniform(2, 2, 1.0), 3.0);
  // a single pinned node leaves the rotation about it free
  EXPECT_THROW(solve_static(K, d, PointLoad{d.node(2, 2), 1.0, 0.0}, BoundarySet{{0}}), SingularSystemError);
}

TEST(Compliance, EnergyEqualsWorkAtEquilibrium) {
  const auto d = grid(8, 4);
  const auto K = assemble_stiffness(d, DensityField::uniform(8, 4, 0.4), 3.0);
  const PointLoad load{d.node(8, 0), 0.0, -1.0};
  const Vector u = solve_static(K, d, load, left_edge(d));
  EXPECT_LT(rel(compliance(u, K), load_vector(d, load).dot(u)), 1e-9);
  EXPECT_EQ(compliance(Vector::Zero(d.num_dofs()), K), 0.0);
}

TEST(Compliance, StaticHelperAgreesWithGlobalSolve) {
  const auto d = grid(6, 6);
  auto rho = DensityField::uniform(6, 6, 1.0);
  for (int i = 2; i < 4; ++i) rho(i, 3) = 0.0;
  const auto bin = binarize(rho);
  const PointLoad load{d.node(6, 0), 0.0, -1.0};
  const auto bc = left_edge(d);
  const auto K = assemble_stiffness(d, bin, 1.0);
  const Vector u = solve_static(K, d, load, bc);
  EXPECT_LT(rel(static_compliance(d, bc, load, binary_moduli(d, bin)), load_vector(d, load).dot(u)), 1e-9);
}

TEST(Fields, VonMisesClosedForms) {
  EXPECT_DOUBLE_EQ(von_mises(2.0, 0.0, 0.0), 2.0);
  EXPECT_NEAR(von_mises(0.0, 0.0, 1.5), std::sqrt(3.0) * 1.5, 1e-14);
  EXPECT_NEAR(von_mises(1.7, 1.7, 0.0), 1.7, 1e-14);
}

TEST(Fields, StrainEnergyOfHydrostaticState) {
  ElementResponse r;
  r.stress = {1.0, 1.0, 0.0};
  const double e = (1.0 - 0.3) / 1.0;  // plane stress, E = 1
  r.strain = {e, e, 0.0};
  EXPECT_NEAR(strain_energy_density(r), 0.5 * (1.0 * e + 1.0 * e), 1e-14);
  EXPECT_GT(strain_energy_density(r), 0.0);
}

TEST(Fields, NormalizedMaxIsOneAndIdempotent) {
  const auto d = grid(8, 8);
  const auto f = input_fields(d, left_edge(d), PointLoad{d.node(8, 0), 0.0, -1.0});
  EXPECT_TRUE(f.normalized);
  for (const auto* v : {&f.von_mises, &f.strain_energy}) {
    EXPECT_DOUBLE_EQ(*std::max_element(v->begin(), v->end()), 1.0);
    EXPECT_GE(*std::min_element(v->begin(), v->end()), 0.0);
  }
  const auto g = normalize(f);
  EXPECT_EQ(g.von_mises, f.von_mises);
  EXPECT_EQ(g.strain_energy, f.strain_energy);
}

TEST(Fields, ZeroFieldStaysZero) {
  FieldMaps f{2, 1, {0.0, 0.0}, {0.0, 0.0}, false};
  const auto g = normalize(f);
  EXPECT_EQ(g.von_mises, f.von_mises);
  EXPECT_TRUE(g.normalized);
}

TEST(Fields, CommuteWithQuarterTurn) {
  // Rotating (loads, supports) by 90 degrees about the centre rotates the fields.
  const int n = 8;
  const auto d = grid(n, n);
  auto rot_node = [&](int x, int y) { return d.node(n - y, x); };
  BoundarySet bc, bc_r;
  for (int y = 0; y <= n; ++y) {
    bc.fixed_nodes.push_back(d.node(0, y));
    bc_r.fixed_nodes.push_back(rot_node(0, y));
  }
  std::sort(bc_r.fixed_nodes.begin(), bc_r.fixed_nodes.end());
  const PointLoad load{d.node(n, 2), 0.3, -std::sqrt(1 - 0.09)};
  const PointLoad load_r{rot_node(n, 2), -load.fy, load.fx};
  const auto f = input_fields(d, bc, load);
  const auto fr = input_fields(d, bc_r, load_r);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const size_t src = static_cast<size_t>(j * n + i);
      const size_t dst = static_cast<size_t>(i * n + (n - 1 - j));
      EXPECT_NEAR(fr.von_mises[dst], f.von_mises[src], 1e-9);
      EXPECT_NEAR(fr.strain_energy[dst], f.strain_energy[src], 1e-9);
    }
  }
}

TEST(Mass, LumpedQuarterPerNode) {
  const auto d = grid(1, 1);
  const Vector m = assemble_mass(d, DensityField::uniform(1, 1, 1.0));
  for (int k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(m[k], 0.25);
  EXPECT_EQ(assemble_mass(d, DensityField::uniform(1, 1, 0.0)).norm(), 0.0);
}

TEST(Mass, CentreNodeCollectsFourElements) {
  const auto d = grid(2, 2);
  const Vector m = assemble_mass(d, DensityField::uniform(2, 2, 0.6));
  const int c = d.node(1, 1);
  EXPECT_NEAR(m[2 * c], 4 * 0.25 * 0.6, 1e-15);
  EXPECT_NEAR(m[2 * d.node(0, 0)], 0.25 * 0.6, 1e-15);
  EXPECT_NEAR(m.sum() / 2, 4 * 0.6, 1e-14);
}

TEST(Damping, RayleighCombination) {
  const auto d = grid(2, 2);
  const auto K = assemble_stiffness(d, DensityField::uniform(2, 2, 1.0), 3.0);
  const Vector m = assemble_mass(d, DensityField::uniform(2, 2, 1.0));
  const Eigen::MatrixXd M = m.asDiagonal();
  EXPECT_EQ(Eigen::MatrixXd(rayleigh_damping(m, K, 0.0, 0.0)).norm(), 0.0);
  EXPECT_LT((Eigen::MatrixXd(rayleigh_damping(m, K, 1.0, 0.0)) - M).norm(), 1e-15);
  EXPECT_LT((Eigen::MatrixXd(rayleigh_damping(m, K, 0.0, 1.0)) - Eigen::MatrixXd(K)).norm(), 1e-15);
  EXPECT_LT((Eigen::MatrixXd(rayleigh_damping(m, K, 0.1, 0.001)) - (0.1 * M + 0.001 * Eigen::MatrixXd(K))).norm(),
            1e-15);
}

TEST(Signals, ClosedForms) {
  const auto s = DynamicLoadSignal::make(SignalKind::sine, 64);
  const auto p = DynamicLoadSignal::make(SignalKind::impulse, 64);
  ASSERT_EQ(s.samples.size(), 65u);
  for (int i = 0; i <= 64; ++i) {
    const double t = i / 64.0;
    EXPECT_NEAR(s.samples[i], std::sin(2 * std::numbers::pi * t), 1e-12);
    EXPECT_NEAR(p.samples[i], t / 0.25 * std::exp(-t / 0.25 + 1), 1e-12);
  }
  EXPECT_NEAR(impulse_signal(0.25), 1.0, 1e-15);
  EXPECT_EQ(signal_kind_from_string(to_string(SignalKind::impulse)), SignalKind::impulse);
}

namespace {

// 1x1 element with three corners pinned: the free corner is a 2-dof
// oscillator. Returns the modal stiffness along `mode` and the node mass.
struct Oscillator {
  GridDomain d = grid(1, 1);
  BoundarySet bc{{0, 1, 2}};
  Eigen::Vector2d mode;
  double k = 0.0;
  double m = 0.25;

  Oscillator() {
    const Matrix8 ke = element_stiffness(d, 1.0);
    const Eigen::Matrix2d kf = ke.block<2, 2>(4, 4);  // node (1, 1)
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(kf);
    mode = es.eigenvectors().col(0);
    k = es.eigenvalues()[0];
  }

  InitialState start() const {
    InitialState s{Vector::Zero(8), Vector::Zero(8)};
    s.displacement.segment<2>(6) = mode;
    return s;
  }
};

}  // namespace

TEST(Newmark, ZeroForcingStaysAtRest) {
  const auto d = grid(3, 2);
  auto sig = DynamicLoadSignal::from_samples(std::vector<double>(21, 0.0), 0.05);
  const auto hist = newmark_integrate(d, DensityField::uniform(3, 2, 1.0), PointLoad{d.node(3, 2), 1, 0}, sig,
                                      left_edge(d), 0.1, 0.001);
  ASSERT_EQ(hist.size(), 21u);
  for (const auto& u : hist) EXPECT_EQ(u.norm(), 0.0);
}

TEST(Newmark, FreeVibrationPeriod) {
  Oscillator osc;
  const double period = 2 * std::numbers::pi * std::sqrt(osc.m / osc.k);
  const int steps = 300;  // three periods at 100 steps per period
  auto sig = DynamicLoadSignal::from_samples(std::vector<double>(steps + 1, 0.0), period / 100);
  const auto hist = newmark_integrate(osc.d, DensityField::uniform(1, 1, 1.0), PointLoad{3, 0, 0}, sig, osc.bc,
                                      0.0, 0.0, 3.0, osc.start());
  std::vector<double> crossings;
  for (int i = 1; i <= steps; ++i) {
    const double a = osc.mode.dot(hist[i - 1].segment<2>(6));
    const double b = osc.mode.dot(hist[i].segment<2>(6));
    if (a < 0 && b >= 0) crossings.push_back((i - 1 + a / (a - b)) * sig.dt);
  }
  ASSERT_GE(crossings.size(), 2u);
  const double measured = (crossings.back() - crossings.front()) / (crossings.size() - 1);
  EXPECT_LT(rel(measured, period), 0.02);
}

TEST(Newmark, UndampedEnergyIsConserved) {
  Oscillator osc;
  const double period = 2 * std::numbers::pi * std::sqrt(osc.m / osc.k);
  const int steps = 400;  // ten periods
  const double dt = period / 40;
  auto sig = DynamicLoadSignal::from_samples(std::vector<double>(steps + 1, 0.0), dt);
  const auto hist = newmark_integrate(osc.d, DensityField::uniform(1, 1, 1.0), PointLoad{3, 0, 0}, sig, osc.bc,
                                      0.0, 0.0, 3.0, osc.start());
  const Eigen::MatrixXd ke = assemble_stiffness(osc.d, DensityField::uniform(1, 1, 1.0), 3.0);
  // velocities from the average-acceleration update v1 = 2 (u1 - u0) / dt - v0
  Vector v = Vector::Zero(8);
  const double e0 = 0.5 * hist[0].dot(ke * hist[0]);
  for (int i = 1; i <= steps; ++i) {
    v = 2.0 * (hist[i] - hist[i - 1]) / dt - v;
    const double e = 0.5 * hist[i].dot(ke * hist[i]) + 0.5 * osc.m * v.squaredNorm();
    EXPECT_LT(rel(e, e0), 0.005) << "step " << i;
  }
}

TEST(Newmark, DampedConstantLoadSettlesToStatic) {
  const auto d = grid(2, 2);
  const auto rho = DensityField::uniform(2, 2, 1.0);
  const PointLoad load{d.node(2, 0), 0.0, -1.0};
  const auto bc = left_edge(d);
  auto sig = DynamicLoadSignal::from_samples(std::vector<double>(2001, 1.0), 0.05);
  const auto hist = newmark_integrate(d, rho, load, sig, bc, 1.0, 0.01);
  const Vector ref = solve_static(assemble_stiffness(d, rho, 3.0), d, load, bc);
  EXPECT_LT((hist.back() - ref).norm() / ref.norm(), 0.01);
}

TEST(DynamicCompliance, RectangleRule) {
  const std::vector<Vector> f{Vector::Constant(2, 1.0)};
  const std::vector<Vector> u0{Vector::Zero(2)};
  EXPECT_EQ(dynamic_compliance(f, u0, 0.1), 0.0);
  const std::vector<Vector> u1{Vector::Constant(2, 1.5)};
  EXPECT_DOUBLE_EQ(dynamic_compliance(f, u1, 1.0), 3.0);
  const std::vector<Vector> two(2, Vector::Zero(2));
  EXPECT_THROW(dynamic_compliance(f, two, 1.0), std::invalid_argument);
}

TEST(DynamicCompliance, ConvergesUnderTimeRefinement) {
  auto d = grid(8, 8);
  d.mass_density = 1e-3;
  const auto rho = DensityField::uniform(8, 8, 1.0);
  const PointLoad load{d.node(8, 0), 0.0, -1.0};
  auto run = [&](int steps) {
    const auto sig = DynamicLoadSignal::make(SignalKind::sine, steps);
    const auto hist = newmark_integrate(d, rho, load, sig, left_edge(d), 0.1, 0.001);
    return dynamic_compliance(load_history(d, load, sig), hist, sig.dt);
  };
  EXPECT_LT(rel(run(64), run(256)), 0.02);
}
