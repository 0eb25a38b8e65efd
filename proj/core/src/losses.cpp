#include "topo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace topo::losses {

namespace {

void check_same_shape(const fea::DensityField& a, const fea::DensityField& b) {
  if (a.nx != b.nx || a.ny != b.ny || a.values.size() != b.values.size()) {
    throw std::invalid_argument("density fields differ in shape (" + std::to_string(a.nx) + "x" + std::to_string(a.ny) +
                                " vs " + std::to_string(b.nx) + "x" + std::to_string(b.ny) + ")");
  }
}

// Cross-shaped kernel with weight 1/2 on the centre and the four neighbours,
// zero padding. The kernel is symmetric, so it is its own adjoint.
void cross_conv(const std::vector<double>& in, int nx, int ny, std::vector<double>& out) {
  out.resize(in.size());
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const std::size_t k = static_cast<std::size_t>(j) * nx + i;
      double s = in[k];
      if (i > 0) s += in[k - 1];
      if (i + 1 < nx) s += in[k + 1];
      if (j > 0) s += in[k - nx];
      if (j + 1 < ny) s += in[k + nx];
      out[k] = 0.5 * s;
    }
  }
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

Term primary_loss(const fea::DensityField& pred, const fea::DensityField& truth, std::span<const char> mask) {
  check_same_shape(pred, truth);
  const std::size_t n = pred.values.size();
  if (!mask.empty() && mask.size() != n) throw std::invalid_argument("pixel mask does not match the field");
  std::size_t count = 0;
  for (std::size_t k = 0; k < n; ++k) count += mask.empty() || mask[k];
  Term t;
  t.grad.assign(n, 0.0);
  if (count == 0) return t;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t k = 0; k < n; ++k) {
    if (!mask.empty() && !mask[k]) continue;
    const double d = pred.values[k] - truth.values[k];
    t.value += d * d;
    t.grad[k] = 2.0 * d * inv;
  }
  t.value *= inv;
  return t;
}

std::vector<char> pixel_mask(std::span<const int> patches, int nx, int ny, int P) {
  if (P < 1 || nx % P != 0 || ny % P != 0) throw std::invalid_argument("patch size must divide the grid");
  std::vector<char> m(static_cast<std::size_t>(nx) * ny, 0);
  const int px = nx / P;
  for (int p : patches) {
    if (p < 0 || p >= px * (ny / P)) throw std::out_of_range("patch index out of range");
    const int pi = p % px, pj = p / px;
    for (int r = 0; r < P; ++r)
      for (int c = 0; c < P; ++c) m[static_cast<std::size_t>(pj * P + r) * nx + pi * P + c] = 1;
  }
  return m;
}

Term vf_loss(const fea::DensityField& pred, double target) {
  const std::size_t n = pred.values.size();
  if (n == 0) throw std::invalid_argument("empty density field");
  const double dev = target - pred.mean();
  Term t;
  t.value = std::abs(dev);
  const double g = dev > 0 ? -1.0 / n : dev < 0 ? 1.0 / n : 0.0;
  t.grad.assign(n, g);
  return t;
}

Term ld_loss(const fea::DensityField& pred, ElementCoord e, double fx, double fy) {
  if (e.i < 0 || e.j < 0 || e.i >= pred.nx || e.j >= pred.ny) throw std::out_of_range("load element outside the grid");
  const double mag = std::hypot(fx, fy);
  Term t;
  t.grad.assign(pred.values.size(), 0.0);
  t.value = 1.0 - pred(e.i, e.j) * mag;
  t.grad[static_cast<std::size_t>(e.j) * pred.nx + e.i] = -mag;
  return t;
}

void FmParams::validate() const {
  if (!(alpha > 0)) throw std::invalid_argument("fm: alpha must be positive");
  if (!(beta > 0 && beta < 0.5)) throw std::invalid_argument("fm: beta must lie in (0, 0.5)");
  if (max_iters < 1) throw std::invalid_argument("fm: max_iters must be at least 1");
  if (!(tol > 0)) throw std::invalid_argument("fm: tol must be positive");
}

FmResult fm_loss(const fea::DensityField& pred, const FmParams& prm, bool with_grad) {
  prm.validate();
  const int nx = pred.nx, ny = pred.ny;
  const auto& rho = pred.values;
  const std::size_t n = rho.size();
  if (n == 0 || n != static_cast<std::size_t>(nx) * ny) throw std::invalid_argument("fm: malformed density field");

  FmResult r;
  r.grad.assign(n, 0.0);
  const auto seed_it = std::max_element(rho.begin(), rho.end());  // first maximum
  if (*seed_it <= 0.0) {
    r.connectivity.assign(n, 0.0);
    r.degenerate = true;
    return r;
  }
  const auto seed = static_cast<std::size_t>(seed_it - rho.begin());
  r.seed = static_cast<int>(seed);

  std::vector<std::vector<double>> history;  // H_0 .. H_t
  history.emplace_back(n, 0.0);
  history[0][seed] = 1.0;
  std::vector<double> conv;
  for (int t = 1; t <= prm.max_iters; ++t) {
    const auto& prev = history.back();
    cross_conv(prev, nx, ny, conv);
    std::vector<double> next(n);
    double change = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double a = logistic(prm.alpha * (conv[k] - prm.beta));
      next[k] = std::max(prev[k], a * rho[k]);
      change = std::max(change, std::abs(next[k] - prev[k]));
    }
    history.push_back(std::move(next));
    r.iterations = t;
    if (change < prm.tol) break;
  }
  const auto& h = history.back();
  for (std::size_t k = 0; k < n; ++k) {
    if (k != seed) r.value += (rho[k] - h[k]) * rho[k];
  }
  r.connectivity = h;
  if (!with_grad) return r;

  // reverse sweep
  std::vector<double> g_h(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (k == seed) continue;
    r.grad[k] = 2.0 * rho[k] - h[k];
    g_h[k] = -rho[k];
  }
  std::vector<double> g_conv(n), back(n);
  for (int t = r.iterations; t >= 1; --t) {
    const auto& prev = history[static_cast<std::size_t>(t - 1)];
    cross_conv(prev, nx, ny, conv);
    bool any = false;
    for (std::size_t k = 0; k < n; ++k) {
      const double a = logistic(prm.alpha * (conv[k] - prm.beta));
      const double c = a * rho[k];
      g_conv[k] = 0.0;
      if (c > prev[k]) {
        const double g = g_h[k];
        g_h[k] = 0.0;
        r.grad[k] += g * a;
        g_conv[k] = g * rho[k] * prm.alpha * a * (1.0 - a);
        any = any || g_conv[k] != 0.0;
      }
    }
    if (any) {
      cross_conv(g_conv, nx, ny, back);
      for (std::size_t k = 0; k < n; ++k) g_h[k] += back[k];
    }
  }
  return r;
}

TotalLoss total_loss(const fea::DensityField& pred, const fea::DensityField& truth, const ProblemSpec& spec,
                     std::span<const char> mask, double lambda, const FmParams& fm_params) {
  check_same_shape(pred, truth);
  const auto p = primary_loss(pred, truth, mask);
  const auto v = vf_loss(pred, spec.volume_fraction);
  const auto l = ld_loss(pred, spec.load_element, spec.fx, spec.fy);
  const auto f = fm_loss(pred, fm_params, lambda != 0.0);
  TotalLoss out;
  out.parts = {p.value, v.value, l.value, f.value, 0.0, lambda};
  const double w = lambda / static_cast<double>(pred.values.size());
  out.parts.total = p.value + w * (v.value + l.value + f.value);
  out.grad = p.grad;
  if (lambda != 0.0) {
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += w * (v.grad[k] + l.grad[k] + f.grad[k]);
  }
  return out;
}

}  // namespace topo::losses
