#include "svfreg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "svfreg/rng.hpp"

namespace svfreg {

McEnsemble mc_sample(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving, int samples,
                     std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("mc_sample: need at least one sample");
  McEnsemble ens;
  ens.image_dims = fixed.dims();
  const CounterRng root(seed, 0x3C);
  for (int s = 0; s < samples; ++s) {
    const std::uint64_t mask_seed = root.split(static_cast<std::uint64_t>(s)).key();
    const DropoutMask mask = sample_dropout_mask(params, mask_seed);
    ens.samples.push_back(forward(params, fixed, moving, &mask).coarse_svf);
    ens.seeds.push_back(mask_seed);
  }
  return ens;
}

MeanVariance mean_variance(const McEnsemble& ensemble, ChannelAggregation aggregation) {
  const std::size_t count = ensemble.samples.size();
  if (count < 2) throw std::invalid_argument("variance needs >= 2 samples");
  const VectorField& first = ensemble.samples.front();
  for (const auto& s : ensemble.samples) require_same_dims(first.dims(), s.dims(), "mean_variance");

  // Welford per component, samples visited in index order.
  const std::size_t len = first.data().size();
  std::vector<double> mean(len, 0.0);
  std::vector<double> m2(len, 0.0);
  for (std::size_t s = 0; s < count; ++s) {
    auto x = ensemble.samples[s].data();
    const double k = static_cast<double>(s + 1);
    for (std::size_t q = 0; q < len; ++q) {
      const double delta = x[q] - mean[q];
      mean[q] += delta / k;
      m2[q] += delta * (x[q] - mean[q]);
    }
  }

  MeanVariance out{VectorField(first.dims(), first.spacing(), std::move(mean)),
                   ScalarVolume(first.dims(), first.spacing())};
  const std::size_t m = first.voxel_count();
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t n = 0; n < m; ++n) {
    const double a = std::max(0.0, m2[n] * inv);
    const double b = std::max(0.0, m2[m + n] * inv);
    const double c = std::max(0.0, m2[2 * m + n] * inv);
    switch (aggregation) {
      case ChannelAggregation::Sum: out.variance[n] = a + b + c; break;
      case ChannelAggregation::Mean: out.variance[n] = (a + b + c) / 3.0; break;
      case ChannelAggregation::Max: out.variance[n] = std::max({a, b, c}); break;
    }
  }
  return out;
}

ScalarVolume weight_map(const ScalarVolume& variance, double eps, std::optional<Dims> target) {
  if (!(eps > 0.0)) throw std::invalid_argument("weight_map: eps must be > 0");
  ScalarVolume raw(variance.dims(), variance.spacing());
  for (std::size_t n = 0; n < raw.size(); ++n) {
    if (variance[n] < 0.0) throw std::invalid_argument("weight_map: variance must be >= 0");
    raw[n] = 1.0 / (variance[n] + eps);
  }
  ScalarVolume w = (target && !(*target == variance.dims())) ? resample_to(raw, *target) : std::move(raw);
  double sum = 0.0;
  for (double x : w.data()) sum += x;
  const double scale = static_cast<double>(w.size()) / sum;
  for (double& x : w.data()) x *= scale;
  return w;
}

UncertaintyMap estimate_uncertainty(const PredictorParams& params, const ScalarVolume& fixed,
                                    const ScalarVolume& moving, int samples, std::uint64_t seed, double eps,
                                    ChannelAggregation aggregation) {
  const McEnsemble ens = mc_sample(params, fixed, moving, samples, seed);
  MeanVariance mv = mean_variance(ens, aggregation);
  UncertaintyMap map;
  map.weights = weight_map(mv.variance, eps, ens.image_dims);
  map.variance = std::move(mv.variance);
  map.eps = eps;
  return map;
}

}  // namespace svfreg
