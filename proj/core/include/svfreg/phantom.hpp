#pragma once

// Synthetic inhale/exhale phantom pairs with a known ground-truth velocity.
//
// The moving image is a textured ellipsoidal "lung" (dark parenchyma, low
// frequency texture, bright vessel-like tubes) inside brighter tissue. The
// ground-truth SVF is a radial log-scale field, windowed to a sphere around
// the centre, plus an optional smooth random perturbation. The fixed image
// is the moving image pulled back through SS(v_gt), so the fixed lung is
// smaller by roughly radial_scale^3 in volume.

#include <cstdint>

#include "svfreg/diffeo.hpp"
#include "svfreg/eval.hpp"
#include "svfreg/grid.hpp"

namespace svfreg {

/// White noise per channel, separable Gaussian blur (sigma = smoothness voxels,
/// replicate boundary), rescaled so the largest vector norm equals amplitude.
VectorField smooth_random_svf(const Dims& dims, double amplitude, double smoothness, std::uint64_t seed,
                              Vec3 spacing = {1.0, 1.0, 1.0});

/// Gaussian smoothing of a scalar volume (sigma in voxels, replicate boundary).
ScalarVolume gaussian_smooth(const ScalarVolume& vol, double sigma);

struct PhantomDeformation {
  double radial_scale = 0.8;
  double random_amplitude = 1.0;
  double smoothness = 4.0;
};

struct PhantomCase {
  ScalarVolume fixed;
  ScalarVolume moving;
  BinaryMask fixed_mask;
  BinaryMask moving_mask;
  VectorField v_gt;
  double delta_v_analog = 0.0;
  PhantomDeformation deformation;  // as used, after any amplitude reduction
  int retries = 0;
  std::uint64_t seed = 0;
};

inline constexpr double kPhantomSpacingMm = 1.5;

PhantomCase make_phantom_pair(const Dims& dims, const PhantomDeformation& deformation, std::uint64_t seed,
                              int integration_steps = kDefaultIntegrationSteps);

}  // namespace svfreg
