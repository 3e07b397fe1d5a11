#pragma once

// Monte Carlo dropout over the predictor: N stochastic passes, population
// mean/variance of the coarse SVFs, and an inverse-variance weight map.

#include <cstdint>
#include <optional>
#include <vector>

#include "svfreg/grid.hpp"
#include "svfreg/predictor.hpp"

namespace svfreg {

struct McEnsemble {
  std::vector<VectorField> samples;  // coarse-resolution SVFs, sample order fixed
  std::vector<std::uint64_t> seeds;  // dropout-mask seed of each sample
  Dims image_dims;
};

enum class ChannelAggregation { Sum, Mean, Max };

struct MeanVariance {
  VectorField mean;
  ScalarVolume variance;  // per voxel, aggregated over the 3 channels
};

struct UncertaintyMap {
  ScalarVolume variance;  // coarse grid
  ScalarVolume weights;   // image grid, mean 1
  double eps = 0.0;
};

/// Variance floor in coarse voxel units squared.
inline constexpr double kDefaultVarianceEps = 1e-2;

/// Seeds of the dropout masks are derived from `seed` by splitting on the sample index.
McEnsemble mc_sample(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving, int samples,
                     std::uint64_t seed);

MeanVariance mean_variance(const McEnsemble& ensemble, ChannelAggregation aggregation = ChannelAggregation::Sum);

/// 1 / (variance + eps), resampled to `target` when given and different,
/// then normalized to mean 1.
ScalarVolume weight_map(const ScalarVolume& variance, double eps, std::optional<Dims> target = std::nullopt);

UncertaintyMap estimate_uncertainty(const PredictorParams& params, const ScalarVolume& fixed,
                                    const ScalarVolume& moving, int samples, std::uint64_t seed,
                                    double eps = kDefaultVarianceEps,
                                    ChannelAggregation aggregation = ChannelAggregation::Sum);

}  // namespace svfreg
