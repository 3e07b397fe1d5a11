#pragma once

// Registration losses with exact gradients:
//   mse      = (1/|Omega|) sum_x w(x) (I_F(x) - I_D(x))^2
//   bending  = (1/|Omega|) sum_x sum_c ||Hessian(u_c)(x)||_F^2   (interior stencil support)
//   total    = mse + lambda * bending
// Sums are accumulated sequentially in voxel order.

#include "svfreg/diffeo.hpp"
#include "svfreg/grid.hpp"
#include "svfreg/predictor.hpp"

namespace svfreg {

struct LossBreakdown {
  double mse = 0.0;
  double bending = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  bool weighted = false;
};

struct MseResult {
  double value = 0.0;
  ScalarVolume grad;  // dL/dI_D
};

/// weights == nullptr means uniform w = 1.
MseResult mse_loss(const ScalarVolume& fixed, const ScalarVolume& warped, const ScalarVolume* weights = nullptr);

struct BendingResult {
  double value = 0.0;
  VectorField grad;
};

BendingResult bending_energy(const VectorField& u);

/// Which field the bending penalty is applied to.
enum class Regularize { Displacement, Velocity };

struct LossOptions {
  double lambda = 0.2;
  int integration_steps = kDefaultIntegrationSteps;
  Direction direction = Direction::Forward;
  Regularize regularize = Regularize::Displacement;
};

struct TotalLoss {
  LossBreakdown breakdown;
  ParamGrads grads;
  DisplacementField displacement;
  ScalarVolume warped;
};

/// Forward: v = G(I_F, I_M), u = SS(v), compares I_F with I_M o Phi.
/// Inverse: same v, u = SS(-v), compares I_M with I_F o Phi^-1.
/// The bending term is applied to the displacement actually used to warp
/// (or to the signed velocity when regularize == Velocity).
TotalLoss total_loss(const ScalarVolume& fixed, const ScalarVolume& moving, const PredictorParams& params,
                     const DropoutMask* mask, const ScalarVolume* weights, const LossOptions& options,
                     bool compute_grads = true);

}  // namespace svfreg
