#include "topo/evaluate.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace topo::eval {

namespace {

fea::GridDomain grid(int nx, int ny) {
  fea::GridDomain d;
  d.nx = nx;
  d.ny = ny;
  return d;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

double compliance_error_pct(double c_pred, double c_true) {
  if (!(c_true > 0) || !std::isfinite(c_true)) throw std::invalid_argument("true compliance must be positive and finite");
  if (!std::isfinite(c_pred)) return kErrorCapPct;
  return std::min(kErrorCapPct, 100.0 * std::abs(c_pred - c_true) / c_true);
}

ComplianceOutcome compliance_error(const fea::DensityField& pred, const ProblemSpec& spec, double true_c,
                                   const simp::DynamicSettings& dynamics) {
  ComplianceOutcome out;
  try {
    out.c_pred = simp::design_compliance(grid(pred.nx, pred.ny), spec, fea::binarize(pred), dynamics);
  } catch (const std::runtime_error&) {
    return out;  // singular re-analysis: capped and failed
  }
  out.error_pct = compliance_error_pct(out.c_pred, true_c);
  out.capped = out.error_pct >= kErrorCapPct;
  out.failed = is_failure(out.error_pct);
  return out;
}

// Union-find over material pixels.
int component_count(const fea::DensityField& field, double threshold) {
  const int nx = field.nx, ny = field.ny;
  std::vector<int> parent(field.values.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  auto solid = [&](int k) { return field.values[static_cast<std::size_t>(k)] > threshold; };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int k = j * nx + i;
      if (!solid(k)) continue;
      if (i + 1 < nx && solid(k + 1)) parent[find(k + 1)] = find(k);
      if (j + 1 < ny && solid(k + nx)) parent[find(k + nx)] = find(k);
    }
  }
  int roots = 0;
  for (int k = 0; k < nx * ny; ++k) roots += solid(k) && find(k) == k;
  return roots;
}

SampleMetrics sample_metrics(const fea::DensityField& pred, const ProblemSpec& spec, double true_c,
                             const simp::DynamicSettings& dynamics) {
  SampleMetrics m;
  m.compliance = compliance_error(pred, spec, true_c, dynamics);
  const auto bin = fea::binarize(pred);
  m.vf_error_pct = 100.0 * std::abs(spec.volume_fraction - bin.mean());
  m.load_unsupported = bin(spec.load_element.i, spec.load_element.j) == 0.0;
  m.floating = component_count(bin) > 1;
  return m;
}

MetricsReport summarize(const std::vector<SampleMetrics>& all) {
  MetricsReport r;
  r.n_samples = all.size();
  if (all.empty()) return r;
  std::vector<double> errors, ok, vf;
  std::size_t above = 0, ld = 0, fm = 0;
  for (const auto& s : all) {
    errors.push_back(s.compliance.error_pct);
    if (is_failure(s.compliance.error_pct)) {
      ++above;
    } else {
      ok.push_back(s.compliance.error_pct);
    }
    r.n_capped += s.compliance.capped;
    vf.push_back(s.vf_error_pct);
    ld += s.load_unsupported;
    fm += s.floating;
  }
  const double n = static_cast<double>(all.size());
  r.mean_compliance_error_pct = mean(errors);
  r.pct_above_30 = 100.0 * static_cast<double>(above) / n;
  r.median_compliance_error_pct = median(ok);
  r.vf_error_pct = mean(vf);
  r.load_discrepancy_pct = 100.0 * static_cast<double>(ld) / n;
  r.floating_material_pct = 100.0 * static_cast<double>(fm) / n;
  return r;
}

MetricsReport metrics(const std::vector<fea::DensityField>& predictions, const std::vector<const data::Sample*>& samples,
                      int nx, int ny, const simp::DynamicSettings& dynamics) {
  if (predictions.size() != samples.size()) throw std::invalid_argument("predictions and samples differ in count");
  if (samples.empty()) throw std::invalid_argument("metrics need at least one sample");
  std::vector<SampleMetrics> all;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    all.push_back(sample_metrics(predictions[k], samples[k]->problem(nx, ny), samples[k]->true_compliance, dynamics));
  }
  return summarize(all);
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"mean_compliance_error_pct", r.mean_compliance_error_pct},
          {"pct_above_30", r.pct_above_30},
          {"median_compliance_error_pct", number_or_null(r.median_compliance_error_pct)},
          {"vf_error_pct", r.vf_error_pct},
          {"load_discrepancy_pct", r.load_discrepancy_pct},
          {"floating_material_pct", r.floating_material_pct},
          {"n_samples", r.n_samples},
          {"n_capped", r.n_capped}};
}

// ---- stress / strain -------------------------------------------------------------------

PeakStats peak_stats(const std::vector<double>& p, const std::vector<double>& t) {
  if (p.size() != t.size()) throw std::invalid_argument("peak series differ in length");
  PeakStats s;
  if (p.empty()) return s;
  std::vector<double> rel;
  for (std::size_t k = 0; k < p.size(); ++k) rel.push_back(100.0 * std::abs(p[k] - t[k]) / std::abs(t[k]));
  s.mae_pct = mean(rel);
  double var = 0.0;
  for (double r : rel) var += (r - s.mae_pct) * (r - s.mae_pct);
  s.std_pct = std::sqrt(var / static_cast<double>(rel.size()));
  const double mp = mean(p), mt = mean(t);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    sxy += (t[k] - mt) * (p[k] - mp);
    sxx += (t[k] - mt) * (t[k] - mt);
    syy += (p[k] - mp) * (p[k] - mp);
  }
  s.best_fit_slope = sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
  s.correlation = sxx > 0 && syy > 0 ? std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0)
                                     : std::numeric_limits<double>::quiet_NaN();
  return s;
}

Peaks design_peaks(const fea::DensityField& design, const ProblemSpec& spec) {
  const auto domain = grid(design.nx, design.ny);
  const auto bin = fea::binarize(design);
  const auto problem = resolve(spec, domain);
  const auto moduli = fea::binary_moduli(domain, bin);
  fea::ReducedSystem sys(domain, problem.bc);
  fea::SpdSolver solver;
  solver.factorize(sys.stiffness(moduli));
  const auto u = sys.expand(solver.solve(sys.restrict(fea::load_vector(domain, problem.load))));
  if (!u.allFinite()) throw std::runtime_error("re-analysis produced a non-finite displacement");
  const auto resp = fea::element_responses(domain, u, moduli);
  Peaks pk;
  for (std::size_t e = 0; e < resp.size(); ++e) {
    if (bin.values[e] == 0.0) continue;  // void elements carry no stress of interest
    const auto& s = resp[e].stress;
    pk.stress = std::max(pk.stress, fea::von_mises(s[0], s[1], s[2]));
    pk.strain = std::max(pk.strain, fea::max_principal_strain(resp[e].strain));
  }
  return pk;
}

StressStrainStats stress_strain_stats(const std::vector<fea::DensityField>& predictions,
                                      const std::vector<const data::Sample*>& samples, int nx, int ny) {
  if (predictions.size() != samples.size()) throw std::invalid_argument("predictions and samples differ in count");
  StressStrainStats out;
  std::vector<double> ps, ts, pe, te;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    try {
      const auto spec = samples[k]->problem(nx, ny);
      const auto p = design_peaks(predictions[k], spec);
      const auto t = design_peaks(samples[k]->topology_field(nx, ny), spec);
      if (!(t.stress > 0 && t.strain > 0 && std::isfinite(p.stress) && std::isfinite(p.strain))) {
        ++out.n_excluded;
        continue;
      }
      ps.push_back(p.stress);
      ts.push_back(t.stress);
      pe.push_back(p.strain);
      te.push_back(t.strain);
    } catch (const std::exception&) {
      ++out.n_excluded;
    }
  }
  out.n_samples = ps.size();
  out.stress = peak_stats(ps, ts);
  out.strain = peak_stats(pe, te);
  return out;
}

nlohmann::json to_json(const StressStrainStats& s) {
  auto one = [](const PeakStats& p) {
    return nlohmann::json{{"mae_pct", number_or_null(p.mae_pct)},
                          {"std_pct", number_or_null(p.std_pct)},
                          {"correlation", number_or_null(p.correlation)},
                          {"best_fit_slope", number_or_null(p.best_fit_slope)}};
  };
  return {{"stress", one(s.stress)}, {"strain", one(s.strain)}, {"n_samples", s.n_samples}, {"n_excluded", s.n_excluded}};
}

// ---- model-level ----------------------------------------------------------------------------

std::vector<fea::DensityField> predict_samples(const vit::Model<float>& model,
                                               const std::vector<const data::Sample*>& samples, int micro_batch) {
  auto cfg = model.config();
  cfg.mask_ratio = 0.0;
  std::vector<fea::DensityField> out;
  vit::Cache<float> cache;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(micro_batch));
    const std::vector<const data::Sample*> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                 samples.begin() + static_cast<std::ptrdiff_t>(end));
    const auto batch = vit::make_batch<float>(cfg, chunk);
    const auto& y = model.forward(batch, cache);
    for (Eigen::Index b = 0; b < y.rows(); ++b) {
      fea::DensityField d;
      d.nx = cfg.nx;
      d.ny = cfg.ny;
      d.values.assign(y.row(b).data(), y.row(b).data() + y.cols());
      out.push_back(std::move(d));
    }
  }
  return out;
}

std::vector<SweepPoint> vf_sweep(const vit::Model<float>& model, const data::Sample& base, int nx, int ny,
                                 const SweepOptions& o) {
  if (o.steps < 1) throw std::invalid_argument("sweep needs at least one step");
  if (!(o.from > 0 && o.to < 1 && o.from <= o.to)) throw std::invalid_argument("sweep range must lie inside (0, 1)");
  const auto domain = grid(nx, ny);
  const data::GenerationSettings settings{o.simp, o.dynamics};
  std::vector<SweepPoint> curve;
  for (int s = 0; s < o.steps; ++s) {
    const double t = o.steps == 1 ? 0.0 : static_cast<double>(s) / (o.steps - 1);
    auto spec = base.problem(nx, ny);
    spec.volume_fraction = static_cast<float>(o.from + t * (o.to - o.from));
    const auto sample = data::generate_sample(spec, domain, settings, base.id);
    const auto pred = predict_samples(model, {&sample}).front();
    const auto m = sample_metrics(pred, spec, sample.true_compliance, o.dynamics);
    curve.push_back({spec.volume_fraction, m.compliance.error_pct, m.vf_error_pct});
  }
  return curve;
}

void write_sweep_csv(const std::vector<SweepPoint>& curve, std::ostream& os) {
  os << "vf,comp_err_pct,vf_err_pct\n";
  for (const auto& p : curve) os << p.vf << ',' << p.compliance_error_pct << ',' << p.vf_error_pct << '\n';
}

// ---- post-processing -----------------------------------------------------------------------------

PostprocessResult postprocess_fm(const fea::DensityField& pred, const PostprocessOptions& o) {
  if (!(o.step_size > 0) || o.n_steps < 0) throw std::invalid_argument("postprocess: invalid step settings");
  for (double v : pred.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("postprocess: densities must lie in [0, 1]");
  }
  PostprocessResult r;
  r.density = pred;
  auto current = losses::fm_loss(r.density, o.fm);
  r.fm_history.push_back(current.value);
  for (int it = 0; it < o.n_steps; ++it) {
    bool accepted = false;
    for (double step = o.step_size; step > o.step_size * 1e-6; step *= 0.5) {
      fea::DensityField trial = r.density;
      for (std::size_t k = 0; k < trial.values.size(); ++k) {
        trial.values[k] = std::clamp(trial.values[k] - step * current.grad[k], 0.0, 1.0);
      }
      if (trial.values == r.density.values) break;
      auto next = losses::fm_loss(trial, o.fm);
      if (next.value <= current.value) {
        r.density = std::move(trial);
        current = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    r.fm_history.push_back(current.value);
  }
  return r;
}

}  // namespace topo::eval
