#pragma once

// Fully convolutional SVF predictor G(I_F, I_M) -> v with channel-wise
// (spatial) dropout and hand-written reverse-mode gradients.
//
// Forward pass:
//   concat(I_F, I_M) -> average-pool by `downsample`
//   -> [conv3x3x3 -> leaky ReLU -> dropout] per hidden width
//   -> conv3x3x3 head (3 channels) -> trilinear upsample with component rescale.
// Convolutions use zero padding and stride 1.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "svfreg/grid.hpp"

namespace svfreg {

struct Architecture {
  int in_channels = 2;
  std::vector<int> hidden_widths = {16, 16};
  int out_channels = 3;
  int downsample = 4;
  double leaky_slope = 0.2;

  void validate() const;
  int conv_count() const { return static_cast<int>(hidden_widths.size()) + 1; }
  bool operator==(const Architecture&) const = default;
};

inline constexpr int kKernelVolume = 27;

struct ParamBlock {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

/// One gradient vector per parameter block, same order and lengths.
using ParamGrads = std::vector<std::vector<double>>;

struct PredictorParams {
  Architecture arch;
  double dropout_rate = 0.2;
  std::uint64_t seed = 0;
  /// conv{l}.weight [out][in][27], conv{l}.bias [out], ..., head last.
  std::vector<ParamBlock> blocks;

  /// Throws when blocks do not match the architecture or the rate is out of range.
  void validate() const;
  std::size_t parameter_count() const;
  ParamGrads zero_grads() const;
  bool all_finite() const;
};

struct DropoutMask {
  /// keep[layer][channel] in {0,1}, one layer per hidden width.
  std::vector<std::vector<std::uint8_t>> keep;
  std::uint64_t seed = 0;
};

struct ForwardTape {
  Dims input_dims;
  Dims coarse_dims;
  Vec3 coarse_spacing{1.0, 1.0, 1.0};
  /// layer_inputs[l] is the input of conv l (channel-major, coarse grid).
  std::vector<std::vector<double>> layer_inputs;
  /// pre_activations[l] for hidden layer l.
  std::vector<std::vector<double>> pre_activations;
  /// Per-channel multiplier applied after the nonlinearity (0, 1 or 1/(1-p)).
  std::vector<std::vector<double>> dropout_scale;
};

struct PredictorOutput {
  VectorField svf;         // full resolution, voxel units
  VectorField coarse_svf;  // head output, coarse voxel units
  ForwardTape tape;
};

PredictorParams init_params(const Architecture& arch, std::uint64_t seed, double dropout_rate = 0.2);

DropoutMask sample_dropout_mask(const Architecture& arch, double dropout_rate, std::uint64_t seed);
DropoutMask sample_dropout_mask(const PredictorParams& params, std::uint64_t seed);

/// mask == nullptr is the deterministic pass (no dropout, no rescaling).
PredictorOutput forward(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                        const DropoutMask* mask = nullptr);

ParamGrads backward(const PredictorParams& params, const ForwardTape& tape, const VectorField& grad_svf);

// Exposed for tests and benchmarks.
namespace detail {

/// out[o] = bias[o] + sum_i conv(in[i], weight[o][i]) with zero padding.
void conv3d_forward(std::span<const double> input, int in_channels, const Dims& dims, std::span<const double> weight,
                    std::span<const double> bias, int out_channels, std::span<double> output);

/// Accumulates weight/bias gradients, and input gradients when grad_input is non-empty.
void conv3d_backward(std::span<const double> input, int in_channels, const Dims& dims, std::span<const double> weight,
                     int out_channels, std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

std::vector<double> average_pool(std::span<const double> input, int channels, const Dims& dims, int factor);

}  // namespace detail

}  // namespace svfreg
