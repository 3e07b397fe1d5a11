#pragma once

// Optimisation driver: Adam, supervised-free pretraining on image pairs, and
// uncertainty-aware test-time adaptation of the predictor on a single pair.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "svfreg/diffeo.hpp"
#include "svfreg/objective.hpp"
#include "svfreg/predictor.hpp"
#include "svfreg/uncertainty.hpp"

namespace svfreg {

struct AdaptConfig {
  double lambda = 0.2;
  int integration_steps = kDefaultIntegrationSteps;
  int mc_samples = 20;
  int adapt_steps = 30;
  double learning_rate = 2e-4;
  double dropout_rate = 0.2;
  double eps = kDefaultVarianceEps;
  Direction direction = Direction::Forward;
  std::uint64_t seed = 0;
  Regularize regularize = Regularize::Displacement;
  ChannelAggregation aggregation = ChannelAggregation::Sum;
  /// Recompute the uncertainty map every N adaptation steps; 0 keeps it frozen.
  int refresh_uncertainty = 0;

  void validate() const;
  LossOptions loss_options() const { return {lambda, integration_steps, direction, regularize}; }
};

struct OptState {
  ParamGrads first_moment;
  ParamGrads second_moment;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptState zeros_like(const PredictorParams& params);
};

/// Bias-corrected Adam update, in place.
void adam_step(PredictorParams& params, const ParamGrads& grads, OptState& state, double learning_rate);

struct ImagePair {
  ScalarVolume fixed;
  ScalarVolume moving;
};

struct PretrainResult {
  PredictorParams params;
  double initial_loss = 0.0;         // deterministic mean loss before the first update
  std::vector<double> epoch_losses;  // mean training loss (dropout active) per epoch
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Minimises the unweighted total loss over the pairs (one Adam step per
/// pair, shuffled per epoch), with training-time dropout.
PretrainResult pretrain(const PredictorParams& init, std::span<const ImagePair> dataset, const AdaptConfig& config,
                        int epochs, std::uint64_t seed, const EpochCallback& on_epoch = {});

struct AdaptReport {
  std::vector<LossBreakdown> trajectory;  // loss before each update, length = adapt_steps
  LossBreakdown final_loss;               // after the last update
  std::vector<double> step_seconds;
  double uncertainty_seconds = 0.0;
  UncertaintyMap uncertainty;             // map used for the first step
  int uncertainty_refreshes = 0;
};

struct AdaptResult {
  PredictorParams params;
  AdaptReport report;
  /// Parameters after selected step counts (0 = before adaptation).
  std::map<int, PredictorParams> snapshots;
};

AdaptResult adapt(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                  const AdaptConfig& config, std::span<const int> snapshot_steps = {});

struct Registration {
  VectorField velocity;  // as predicted (not negated)
  DisplacementField displacement;
  ScalarVolume warped;
};

/// Deterministic inference. Forward warps `moving` into the fixed frame;
/// inverse warps `fixed` by SS(-v) into the moving frame.
Registration register_pair(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                           Direction direction, int integration_steps = kDefaultIntegrationSteps);

}  // namespace svfreg
