#include "topo/evaluate.hpp"

#include "connectivity_oracle.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <sstream>

using namespace topo;
using namespace topo::eval;

namespace {

constexpr int kN = 16;

fea::DensityField field(const std::vector<double>& v, int n = kN) {
  fea::DensityField f;
  f.nx = f.ny = n;
  f.values = v;
  return f;
}

fea::DensityField block(int i0, int j0, int w, int h, double value = 1.0) {
  auto f = fea::DensityField::uniform(kN, kN, 0.0);
  for (int j = j0; j < j0 + h; ++j)
    for (int i = i0; i < i0 + w; ++i) f(i, j) = value;
  return f;
}

ProblemSpec cantilever(double vf = 0.4) {
  ProblemSpec s;
  s.bc_groups = {11};  // edge_left
  s.load_element = {kN - 1, kN / 2};
  s.fx = 0.0;
  s.fy = -1.0;
  s.volume_fraction = vf;
  return s;
}

ProblemSpec bridge(double vf = 0.5) {
  ProblemSpec s;
  s.bc_groups = {0, 1};  // bottom corners
  s.load_element = {kN / 2, kN - 1};
  s.fx = 0.0;
  s.fy = -1.0;
  s.volume_fraction = vf;
  return s;
}

fea::GridDomain grid() {
  fea::GridDomain d;
  d.nx = d.ny = kN;
  return d;
}

// Ground-truth samples on a small grid, generated once for the suite.
const std::vector<data::Sample>& truths() {
  static const std::vector<data::Sample> s = [] {
    std::vector<data::Sample> out;
    out.push_back(data::generate_sample(cantilever(), grid(), {}, 0));
    out.push_back(data::generate_sample(bridge(), grid(), {}, 1));
    return out;
  }();
  return s;
}

std::vector<const data::Sample*> pointers(const std::vector<data::Sample>& v) {
  std::vector<const data::Sample*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

SampleMetrics with_error(double pct) {
  SampleMetrics m;
  m.compliance.error_pct = pct;
  m.compliance.failed = is_failure(pct);
  m.compliance.capped = pct >= kErrorCapPct;
  return m;
}

vit::ModelConfig small_model() {
  vit::ModelConfig c;
  c.name = "toy";
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.patch_size = 4;
  c.nx = c.ny = kN;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace

TEST(ComplianceError, Arithmetic) {
  EXPECT_EQ(compliance_error_pct(2.0, 2.0), 0.0);
  EXPECT_DOUBLE_EQ(compliance_error_pct(1.3, 1.0), 30.0);
  EXPECT_FALSE(is_failure(compliance_error_pct(1.3, 1.0)));
  EXPECT_FALSE(is_failure(compliance_error_pct(0.7 * 3.1, 3.1)));
  EXPECT_TRUE(is_failure(compliance_error_pct(1.31, 1.0)));
  EXPECT_EQ(compliance_error_pct(5.0, 1.0), 100.0);
  EXPECT_DOUBLE_EQ(compliance_error_pct(0.5, 1.0), 50.0);
  EXPECT_EQ(compliance_error_pct(std::nan(""), 1.0), 100.0);
  EXPECT_THROW(compliance_error_pct(1.0, 0.0), std::invalid_argument);
}

TEST(ComplianceError, TruthReanalysisIsExact) {
  const auto& s = truths()[0];
  const auto spec = s.problem(kN, kN);
  const auto out = compliance_error(s.topology_field(kN, kN), spec, s.true_compliance);
  EXPECT_NEAR(out.error_pct, 0.0, 1e-4);  // true C is stored in float
  EXPECT_FALSE(out.failed);
  EXPECT_FALSE(out.capped);
}

TEST(ComplianceError, EmptyDesignIsCappedAndFailed) {
  const auto& s = truths()[0];
  const auto out = compliance_error(fea::DensityField::uniform(kN, kN, 0.0), s.problem(kN, kN), s.true_compliance);
  EXPECT_EQ(out.error_pct, 100.0);
  EXPECT_TRUE(out.failed);
  EXPECT_TRUE(out.capped);
}

TEST(Metrics, TruthsGiveZeros) {
  const auto& t = truths();
  std::vector<fea::DensityField> preds;
  for (const auto& s : t) preds.push_back(s.topology_field(kN, kN));
  const auto r = metrics(preds, pointers(t), kN, kN);
  EXPECT_EQ(r.n_samples, 2u);
  EXPECT_NEAR(r.mean_compliance_error_pct, 0.0, 1e-4);
  EXPECT_NEAR(r.median_compliance_error_pct, 0.0, 1e-4);
  EXPECT_EQ(r.pct_above_30, 0.0);
  EXPECT_EQ(r.load_discrepancy_pct, 0.0);
  EXPECT_EQ(r.floating_material_pct, 0.0);
  EXPECT_EQ(r.n_capped, 0u);
  // vf error is the SIMP design's own volume miss after thresholding
  EXPECT_LT(r.vf_error_pct, 5.0);
}

TEST(Metrics, HalfFailedArithmetic) {
  const auto r = summarize({with_error(100.0), with_error(10.0)});
  EXPECT_EQ(r.pct_above_30, 50.0);
  EXPECT_EQ(r.mean_compliance_error_pct, 55.0);
  EXPECT_EQ(r.median_compliance_error_pct, 10.0);
  EXPECT_EQ(r.n_capped, 1u);
}

TEST(Metrics, MedianExcludesFailures) {
  const auto r = summarize({with_error(2.0), with_error(4.0), with_error(90.0), with_error(30.0)});
  EXPECT_EQ(r.median_compliance_error_pct, 4.0);
  EXPECT_EQ(r.pct_above_30, 25.0);
  EXPECT_TRUE(std::isnan(summarize({with_error(80.0)}).median_compliance_error_pct));
  const auto j = to_json(summarize({with_error(80.0)}));
  EXPECT_TRUE(j["median_compliance_error_pct"].is_null());
}

TEST(Metrics, EmptyInputRejected) {
  EXPECT_THROW(metrics({}, {}, kN, kN), std::invalid_argument);
}

TEST(Metrics, VfErrorAndLoadDiscrepancy) {
  const auto spec = cantilever(0.4);
  auto half = block(0, 0, kN, kN / 2);  // bottom half: load element (15, 8) is void
  const auto m = sample_metrics(half, spec, 1.0);
  EXPECT_NEAR(m.vf_error_pct, 10.0, 1e-12);
  EXPECT_TRUE(m.load_unsupported);
  EXPECT_FALSE(m.floating);
  const auto full = sample_metrics(fea::DensityField::uniform(kN, kN, 0.7), spec, 1.0);
  EXPECT_FALSE(full.load_unsupported);
  EXPECT_NEAR(full.vf_error_pct, 60.0, 1e-12);
}

TEST(Metrics, FloatingMaterialCountsDisconnectedPrediction) {
  auto f = block(0, 0, 8, 8);
  f(12, 12) = 0.9;  // detached pixel
  const auto m = sample_metrics(f, cantilever(), 1.0);
  EXPECT_TRUE(m.floating);
  EXPECT_EQ(oracle::component_count(f.values, kN, kN), 2);
  const auto r = summarize({m, sample_metrics(block(0, 0, 8, 8), cantilever(), 1.0)});
  EXPECT_EQ(r.floating_material_pct, 50.0);
}

TEST(Metrics, ComponentCountAgreesWithOracle) {
  const auto battery = oracle::binary_battery(17, 300, 12);
  int multi = 0;
  for (const auto& g : battery) {
    const int expected = oracle::component_count(g, 12, 12);
    ASSERT_EQ(component_count(field(g, 12)), expected);
    multi += expected > 1;
  }
  EXPECT_GT(multi, 30);
  EXPECT_EQ(component_count(fea::DensityField::uniform(5, 5, 0.0)), 0);
  // diagonal contact is not a connection
  auto d = fea::DensityField::uniform(4, 4, 0.0);
  d(0, 0) = d(1, 1) = 1.0;
  EXPECT_EQ(component_count(d), 2);
}

TEST(PeakStats, IdentityAndScaled) {
  const std::vector<double> t{1.0, 2.5, 3.0, 7.0, 4.2};
  const auto id = peak_stats(t, t);
  EXPECT_EQ(id.mae_pct, 0.0);
  EXPECT_EQ(id.std_pct, 0.0);
  EXPECT_NEAR(id.correlation, 1.0, 1e-15);
  EXPECT_NEAR(id.best_fit_slope, 1.0, 1e-15);
  std::vector<double> p;
  for (double v : t) p.push_back(1.2 * v);
  const auto s = peak_stats(p, t);
  EXPECT_NEAR(s.best_fit_slope, 1.2, 1e-12);
  EXPECT_NEAR(s.correlation, 1.0, 1e-12);
  EXPECT_NEAR(s.mae_pct, 20.0, 1e-9);
  EXPECT_NEAR(s.std_pct, 0.0, 1e-9);
}

TEST(PeakStats, FitHasIntercept) {
  // pred = 3 + 2 t: slope 2 regardless of the offset
  const std::vector<double> t{1, 2, 3, 4};
  const std::vector<double> p{5, 7, 9, 11};
  EXPECT_NEAR(peak_stats(p, t).best_fit_slope, 2.0, 1e-12);
  const std::vector<double> anti{4, 3, 2, 1};
  EXPECT_NEAR(peak_stats(anti, t).correlation, -1.0, 1e-12);
  EXPECT_THROW(peak_stats({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST(StressStrain, TruthsAgainstThemselves) {
  const auto& t = truths();
  std::vector<fea::DensityField> preds;
  for (const auto& s : t) preds.push_back(s.topology_field(kN, kN));
  const auto st = stress_strain_stats(preds, pointers(t), kN, kN);
  EXPECT_EQ(st.n_samples, 2u);
  EXPECT_EQ(st.n_excluded, 0u);
  EXPECT_EQ(st.stress.mae_pct, 0.0);
  EXPECT_EQ(st.strain.mae_pct, 0.0);
  EXPECT_NEAR(st.stress.best_fit_slope, 1.0, 1e-12);
  EXPECT_NEAR(st.strain.correlation, 1.0, 1e-12);
  const auto j = to_json(st);
  EXPECT_EQ(j["n_samples"], 2);
}

TEST(StressStrain, PeaksComeFromMaterialOnly) {
  const auto spec = cantilever();
  const auto solid = design_peaks(fea::DensityField::uniform(kN, kN, 1.0), spec);
  EXPECT_GT(solid.stress, 0.0);
  EXPECT_GT(solid.strain, 0.0);
  // a thinner beam carrying the same load is more highly stressed
  const auto beam = design_peaks(block(0, kN / 2 - 2, kN, 5), spec);
  EXPECT_GT(beam.stress, solid.stress);
  EXPECT_TRUE(std::isfinite(beam.strain));
}

TEST(Predict, MatchesSingleSamplePath) {
  vit::Model<float> model(small_model());
  model.init(3);
  const auto& t = truths();
  const auto preds = predict_samples(model, pointers(t), 1);
  ASSERT_EQ(preds.size(), 2u);
  for (std::size_t k = 0; k < t.size(); ++k) {
    const auto cond = vit::conditioning_vector(t[k], false);
    const auto single = vit::predict(model, t[k].fields(kN, kN), cond);
    ASSERT_EQ(single.values.size(), preds[k].values.size());
    for (std::size_t i = 0; i < single.values.size(); ++i) EXPECT_FLOAT_EQ(single.values[i], preds[k].values[i]);
  }
}

TEST(Sweep, PointCountAndOrder) {
  vit::Model<float> model(small_model());
  model.init(5);
  SweepOptions o;
  o.steps = 3;
  o.simp.max_iters = 30;
  const auto curve = vf_sweep(model, truths()[0], kN, kN, o);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_NEAR(curve[0].vf, 0.2, 1e-6);
  EXPECT_NEAR(curve[1].vf, 0.4, 1e-6);
  EXPECT_NEAR(curve[2].vf, 0.6, 1e-6);
  for (const auto& p : curve) {
    EXPECT_GE(p.compliance_error_pct, 0.0);
    EXPECT_LE(p.compliance_error_pct, 100.0);
  }
  std::ostringstream os;
  write_sweep_csv(curve, os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "vf,comp_err_pct,vf_err_pct");
  o.steps = 0;
  EXPECT_THROW(vf_sweep(model, truths()[0], kN, kN, o), std::invalid_argument);
}

TEST(Sweep, OwnVolumeFractionMatchesValidationMetric) {
  vit::Model<float> model(small_model());
  model.init(9);
  const auto& s = truths()[0];
  SweepOptions o;
  o.from = o.to = static_cast<double>(s.vf);
  o.steps = 1;
  const auto curve = vf_sweep(model, s, kN, kN, o);
  const auto pred = predict_samples(model, {&s}).front();
  const auto direct = sample_metrics(pred, s.problem(kN, kN), s.true_compliance);
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_NEAR(curve[0].compliance_error_pct, direct.compliance.error_pct, 1e-3);
  EXPECT_EQ(curve[0].vf_error_pct, direct.vf_error_pct);
}

TEST(Postprocess, ConnectedInputUnchanged) {
  const auto f = block(2, 2, 8, 6);
  const auto r = postprocess_fm(f);
  for (std::size_t k = 0; k < f.values.size(); ++k) EXPECT_NEAR(r.density.values[k], f.values[k], 1e-4) << k;
}

TEST(Postprocess, FloaterRemoved) {
  auto f = block(0, 0, 6, 6);
  double before = 0.0;
  for (int j = 11; j < 13; ++j)
    for (int i = 11; i < 13; ++i) before += (f(i, j) = 0.9);
  const auto r = postprocess_fm(f);
  double after = 0.0;
  for (int j = 11; j < 13; ++j)
    for (int i = 11; i < 13; ++i) after += r.density(i, j);
  EXPECT_LE(after, 0.1 * before);
  EXPECT_EQ(oracle::component_count(r.density.values, kN, kN), 1);
  for (double v : r.density.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  ASSERT_GE(r.fm_history.size(), 2u);
  for (std::size_t k = 1; k < r.fm_history.size(); ++k) EXPECT_LE(r.fm_history[k], r.fm_history[k - 1]);
  EXPECT_LT(r.fm_history.back(), 0.1 * r.fm_history.front());
}

TEST(Postprocess, GreyFieldsStayInRangeAndMonotone) {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    auto f = fea::DensityField::uniform(kN, kN, 0.0);
    for (double& v : f.values) v = u(rng) < 0.5 ? u(rng) : 0.0;
    PostprocessOptions o;
    o.n_steps = 30;
    const auto r = postprocess_fm(f, o);
    for (double v : r.density.values) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (std::size_t k = 1; k < r.fm_history.size(); ++k) ASSERT_LE(r.fm_history[k], r.fm_history[k - 1]);
  }
}

TEST(Postprocess, RejectsOutOfRangeInput) {
  auto f = block(0, 0, 4, 4);
  f(10, 10) = 1.5;
  EXPECT_THROW(postprocess_fm(f), std::invalid_argument);
  PostprocessOptions o;
  o.step_size = 0.0;
  EXPECT_THROW(postprocess_fm(block(0, 0, 4, 4), o), std::invalid_argument);
}
