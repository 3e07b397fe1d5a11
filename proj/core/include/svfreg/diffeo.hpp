#pragma once

// Scaling-and-squaring integration of stationary velocity fields, with an
// exact reverse-mode pass over the stored squaring tape, plus composition,
// warping and Jacobian statistics for displacement fields.

#include <vector>

#include "svfreg/grid.hpp"

namespace svfreg {

enum class Direction { Forward, Inverse };

inline constexpr int kDefaultIntegrationSteps = 10;

/// u(x) = Phi(x) - x, in voxels.
struct DisplacementField {
  VectorField field;
  Direction direction = Direction::Forward;
  int integration_steps = 0;

  const Dims& dims() const { return field.dims(); }
  static DisplacementField identity(const Dims& dims, Vec3 spacing = {1.0, 1.0, 1.0}) {
    return {VectorField(dims, spacing), Direction::Forward, 0};
  }
};

/// Inputs to each of the K squarings, in order (u^0 ... u^{K-1}).
struct IntegrationTape {
  std::vector<VectorField> inputs;
  int steps() const { return static_cast<int>(inputs.size()); }
};

struct Integration {
  DisplacementField displacement;
  IntegrationTape tape;
};

/// r(x) = outer(x + inner(x)) + inner(x), i.e. Phi_outer o Phi_inner.
DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner);
VectorField compose(const VectorField& outer, const VectorField& inner);

Integration integrate_svf(const VectorField& velocity, int steps = kDefaultIntegrationSteps);

/// Gradient of a scalar loss with respect to the velocity, given its gradient
/// with respect to the integrated displacement.
VectorField integrate_svf_backward(const IntegrationTape& tape, const VectorField& grad_displacement);

/// Pull-back warp: out(x) = img(x + u(x)).
ScalarVolume warp(const ScalarVolume& img, const DisplacementField& u);
ScalarVolume warp(const ScalarVolume& img, const VectorField& u);

/// dL/du for L(warp(img, u)) given dL/d(warped).
VectorField warp_backward(const ScalarVolume& img, const VectorField& u, const ScalarVolume& grad_warped);

/// Integrates the negated velocity; the result is tagged as the inverse.
DisplacementField invert_via_negation(const VectorField& velocity, int steps = kDefaultIntegrationSteps);

/// det(I + grad u) per voxel, grad u from central differences.
ScalarVolume jacobian_determinant(const DisplacementField& u);
ScalarVolume jacobian_determinant(const VectorField& u);

/// Percentage of voxels inside `mask` (values in {0,1}) with J < 0.
double folding_fraction(const ScalarVolume& jacobian, const ScalarVolume& mask);

}  // namespace svfreg
