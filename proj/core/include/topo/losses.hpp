#pragma once

// Training objective on predicted density fields: masked reconstruction error
// plus volume-fraction, load-discrepancy and floating-material penalties, each
// with its gradient with respect to the predicted densities.

#include "topo/fea.hpp"
#include "topo/problem.hpp"

#include <span>
#include <vector>

namespace topo::losses {

inline constexpr double kLambdaAux = 0.075;

struct Term {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean squared error over the pixels flagged in `pixel_mask`, or over every
/// pixel when the mask is empty.
Term primary_loss(const fea::DensityField& pred, const fea::DensityField& truth,
                  std::span<const char> pixel_mask = {});

/// Pixels covered by the listed patch indices (row-major patch grid).
std::vector<char> pixel_mask(std::span<const int> patches, int nx, int ny, int patch_size);

/// |f - mean(pred)|; zero gradient at the kink.
Term vf_loss(const fea::DensityField& pred, double target);

/// 1 - rho_e * |F| for a point load on element e.
Term ld_loss(const fea::DensityField& pred, ElementCoord load_element, double fx, double fy);

struct FmParams {
  double alpha = 40.0;
  double beta = 0.25;
  int max_iters = 128;
  double tol = 1e-4;

  void validate() const;
};

struct FmResult {
  double value = 0.0;
  std::vector<double> grad;
  std::vector<double> connectivity;  // final H
  int seed = -1;                     // flat index of the flood-fill seed
  int iterations = 0;
  bool degenerate = false;           // all-zero input
};

/// Soft flood fill from the densest pixel; penalizes material the fill does
/// not reach. Gradient is exact reverse mode through the unrolled iterations
/// with the seed held fixed.
FmResult fm_loss(const fea::DensityField& pred, const FmParams& params = {}, bool with_grad = true);

struct LossBreakdown {
  double primary = 0.0;
  double vf = 0.0;
  double ld = 0.0;
  double fm = 0.0;
  double total = 0.0;
  double lambda_aux = kLambdaAux;
};

struct TotalLoss {
  LossBreakdown parts;
  std::vector<double> grad;
};

/// primary + lambda * (vf + ld + fm) / n_elements.
TotalLoss total_loss(const fea::DensityField& pred, const fea::DensityField& truth, const ProblemSpec& spec,
                     std::span<const char> pixel_mask = {}, double lambda_aux = kLambdaAux,
                     const FmParams& fm_params = {});

}  // namespace topo::losses
