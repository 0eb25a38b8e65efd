#pragma once

// Quality metrics for predicted topologies: compliance error against the
// ground truth, volume-fraction error, load support and connectivity, peak
// stress/strain statistics, the volume-fraction sweep and connectivity
// post-processing.

#include "topo/datagen.hpp"
#include "topo/losses.hpp"
#include "topo/simp.hpp"
#include "topo/vit.hpp"

#include <iosfwd>
#include <nlohmann/json_fwd.hpp>
#include <vector>

namespace topo::eval {

inline constexpr double kFailureThresholdPct = 30.0;
inline constexpr double kErrorCapPct = 100.0;

/// 100 |C_pred - C_true| / C_true, capped at 100.
double compliance_error_pct(double c_pred, double c_true);

/// Strictly above the 30% threshold, ignoring last-bit round-off at the boundary.
inline bool is_failure(double error_pct) { return error_pct > kFailureThresholdPct * (1.0 + 1e-12); }

struct ComplianceOutcome {
  double error_pct = kErrorCapPct;
  double c_pred = 0.0;
  bool failed = true;  // error > 30 or re-analysis failure
  bool capped = true;
};

/// Binarizes `pred` at 0.5 and re-analyzes it (dynamic compliance for dynamic specs).
ComplianceOutcome compliance_error(const fea::DensityField& pred, const ProblemSpec& spec, double true_c,
                                   const simp::DynamicSettings& dynamics = {});

/// 4-connected components of the material (> threshold) pixels.
int component_count(const fea::DensityField& field, double threshold = 0.5);

struct SampleMetrics {
  ComplianceOutcome compliance;
  double vf_error_pct = 0.0;
  bool load_unsupported = false;
  bool floating = false;
};

SampleMetrics sample_metrics(const fea::DensityField& pred, const ProblemSpec& spec, double true_c,
                             const simp::DynamicSettings& dynamics = {});

struct MetricsReport {
  double mean_compliance_error_pct = 0.0;
  double pct_above_30 = 0.0;
  double median_compliance_error_pct = 0.0;  // NaN when every sample failed
  double vf_error_pct = 0.0;
  double load_discrepancy_pct = 0.0;
  double floating_material_pct = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_capped = 0;
};

MetricsReport summarize(const std::vector<SampleMetrics>& per_sample);

/// Metrics of `predictions[k]` against `samples[k]`.
MetricsReport metrics(const std::vector<fea::DensityField>& predictions, const std::vector<const data::Sample*>& samples,
                      int nx, int ny, const simp::DynamicSettings& dynamics = {});

nlohmann::json to_json(const MetricsReport& r);

struct PeakStats {
  double mae_pct = 0.0;
  double std_pct = 0.0;
  double correlation = 0.0;
  double best_fit_slope = 0.0;
};

struct StressStrainStats {
  PeakStats stress;
  PeakStats strain;
  std::size_t n_samples = 0;
  std::size_t n_excluded = 0;
};

/// Statistics of paired peak values (predicted vs true). Slope is the
/// least-squares fit pred = a + slope * true.
PeakStats peak_stats(const std::vector<double>& predicted, const std::vector<double>& truth);

struct Peaks {
  double stress = 0.0;  // max von Mises
  double strain = 0.0;  // max principal strain magnitude
};

/// Peaks of the static response of a binarized design.
Peaks design_peaks(const fea::DensityField& design, const ProblemSpec& spec);

StressStrainStats stress_strain_stats(const std::vector<fea::DensityField>& predictions,
                                      const std::vector<const data::Sample*>& samples, int nx, int ny);

nlohmann::json to_json(const StressStrainStats& s);

// ---- model-level helpers ----------------------------------------------------------

/// Predictions for the given samples (no augmentation, no masking).
std::vector<fea::DensityField> predict_samples(const vit::Model<float>& model,
                                               const std::vector<const data::Sample*>& samples, int micro_batch = 8);

struct SweepPoint {
  double vf = 0.0;
  double compliance_error_pct = 0.0;
  double vf_error_pct = 0.0;
};

struct SweepOptions {
  double from = 0.2;
  double to = 0.6;
  int steps = 9;
  simp::SimpConfig simp;
  simp::DynamicSettings dynamics;
};

/// For each volume fraction: SIMP ground truth at that fraction, model
/// prediction with the fraction in its conditioning, both errors.
std::vector<SweepPoint> vf_sweep(const vit::Model<float>& model, const data::Sample& base, int nx, int ny,
                                 const SweepOptions& options = {});

void write_sweep_csv(const std::vector<SweepPoint>& curve, std::ostream& os);

struct PostprocessOptions {
  losses::FmParams fm;
  double step_size = 0.1;
  int n_steps = 200;
};

struct PostprocessResult {
  fea::DensityField density;
  std::vector<double> fm_history;  // FM after each accepted step, starting with the input's
};

/// Gradient descent on the floating-material loss alone, clamped to [0,1],
/// halving the step whenever FM would increase.
PostprocessResult postprocess_fm(const fea::DensityField& pred, const PostprocessOptions& options = {});

}  // namespace topo::eval
