#include "svfreg/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "svfreg/error.hpp"
#include "svfreg/rng.hpp"

namespace svfreg {

void AdaptConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
  if (integration_steps < 0) throw std::invalid_argument("config: integration steps must be >= 0");
  if (mc_samples < 2) throw std::invalid_argument("config: need >= 2 MC samples");
  if (adapt_steps < 0) throw std::invalid_argument("config: adaptation steps must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("config: learning rate must be > 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("config: dropout rate must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("config: eps must be > 0");
  if (refresh_uncertainty < 0) throw std::invalid_argument("config: refresh interval must be >= 0");
}

OptState OptState::zeros_like(const PredictorParams& params) {
  OptState s;
  s.first_moment = params.zero_grads();
  s.second_moment = params.zero_grads();
  return s;
}

void adam_step(PredictorParams& params, const ParamGrads& grads, OptState& state, double learning_rate) {
  if (grads.size() != params.blocks.size() || state.first_moment.size() != params.blocks.size() ||
      state.second_moment.size() != params.blocks.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    auto& theta = params.blocks[b].values;
    const auto& g = grads[b];
    auto& m = state.first_moment[b];
    auto& v = state.second_moment[b];
    if (g.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
      throw std::invalid_argument("adam_step: shape mismatch");
    }
    for (std::size_t q = 0; q < theta.size(); ++q) {
      m[q] = state.beta1 * m[q] + (1.0 - state.beta1) * g[q];
      v[q] = state.beta2 * v[q] + (1.0 - state.beta2) * g[q] * g[q];
      const double m_hat = m[q] / bc1;
      const double v_hat = v[q] / bc2;
      theta[q] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

PretrainResult pretrain(const PredictorParams& init, std::span<const ImagePair> dataset, const AdaptConfig& config,
                        int epochs, std::uint64_t seed, const EpochCallback& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("pretrain: empty dataset");
  if (epochs < 0) throw std::invalid_argument("pretrain: epochs must be >= 0");
  config.validate();

  PretrainResult result;
  result.params = init;
  result.params.dropout_rate = config.dropout_rate;
  LossOptions opts = config.loss_options();
  opts.direction = Direction::Forward;

  for (const auto& pair : dataset) {
    result.initial_loss +=
        total_loss(pair.fixed, pair.moving, result.params, nullptr, nullptr, opts, false).breakdown.total;
  }
  result.initial_loss /= static_cast<double>(dataset.size());

  OptState state = OptState::zeros_like(result.params);
  const CounterRng root(seed, 0x7A);
  std::vector<std::size_t> order(dataset.size());
  for (int e = 0; e < epochs; ++e) {
    CounterRng rng = root.split(static_cast<std::uint64_t>(e));
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      const DropoutMask mask = sample_dropout_mask(result.params, rng());
      const ImagePair& pair = dataset[idx];
      TotalLoss loss = total_loss(pair.fixed, pair.moving, result.params, &mask, nullptr, opts);
      epoch_loss += loss.breakdown.total;
      adam_step(result.params, loss.grads, state, config.learning_rate);
    }
    epoch_loss /= static_cast<double>(dataset.size());
    result.epoch_losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(e, epoch_loss);
  }
  if (!result.params.all_finite()) throw NumericalError("pretrain: non-finite parameters");
  return result;
}

AdaptResult adapt(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                  const AdaptConfig& config, std::span<const int> snapshot_steps) {
  config.validate();
  using clock = std::chrono::steady_clock;

  AdaptResult result;
  result.params = params;
  result.params.dropout_rate = config.dropout_rate;
  auto want_snapshot = [&](int step) {
    return std::find(snapshot_steps.begin(), snapshot_steps.end(), step) != snapshot_steps.end();
  };
  if (want_snapshot(0)) result.snapshots.emplace(0, result.params);

  const LossOptions opts = config.loss_options();
  AdaptReport& report = result.report;

  if (config.adapt_steps == 0) {
    report.final_loss = total_loss(fixed, moving, result.params, nullptr, nullptr, opts, false).breakdown;
    return result;
  }

  auto t0 = clock::now();
  report.uncertainty = estimate_uncertainty(result.params, fixed, moving, config.mc_samples, config.seed, config.eps,
                                            config.aggregation);
  report.uncertainty_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  ScalarVolume weights = report.uncertainty.weights;

  OptState state = OptState::zeros_like(result.params);
  for (int step = 0; step < config.adapt_steps; ++step) {
    if (config.refresh_uncertainty > 0 && step > 0 && step % config.refresh_uncertainty == 0) {
      const std::uint64_t refresh_seed = CounterRng(config.seed, 0x5EF).split(static_cast<std::uint64_t>(step)).key();
      weights = estimate_uncertainty(result.params, fixed, moving, config.mc_samples, refresh_seed, config.eps,
                                     config.aggregation)
                    .weights;
      ++report.uncertainty_refreshes;
    }
    const auto ts = clock::now();
    TotalLoss loss = total_loss(fixed, moving, result.params, nullptr, &weights, opts);
    adam_step(result.params, loss.grads, state, config.learning_rate);
    report.trajectory.push_back(loss.breakdown);
    report.step_seconds.push_back(std::chrono::duration<double>(clock::now() - ts).count());
    if (!result.params.all_finite()) throw NumericalError("adapt: non-finite parameters");
    if (want_snapshot(step + 1)) result.snapshots.emplace(step + 1, result.params);
  }
  report.final_loss = total_loss(fixed, moving, result.params, nullptr, &weights, opts, false).breakdown;
  return result;
}

Registration register_pair(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                           Direction direction, int integration_steps) {
  require_same_dims(fixed.dims(), moving.dims(), "register_pair");
  Registration r;
  r.velocity = forward(params, fixed, moving, nullptr).svf;
  if (direction == Direction::Forward) {
    r.displacement = integrate_svf(r.velocity, integration_steps).displacement;
    r.warped = warp(moving, r.displacement);
  } else {
    r.displacement = invert_via_negation(r.velocity, integration_steps);
    r.warped = warp(fixed, r.displacement);
  }
  return r;
}

}  // namespace svfreg
