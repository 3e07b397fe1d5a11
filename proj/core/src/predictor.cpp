#include "svfreg/predictor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "svfreg/rng.hpp"

namespace svfreg {

void Architecture::validate() const {
  if (in_channels != 2) throw std::invalid_argument("architecture: predictor takes exactly 2 input channels");
  if (out_channels != 3) throw std::invalid_argument("architecture: predictor emits exactly 3 output channels");
  if (downsample < 1) throw std::invalid_argument("architecture: downsample factor must be >= 1");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw std::invalid_argument("architecture: leaky slope in [0,1)");
  for (int w : hidden_widths) {
    if (w < 1) throw std::invalid_argument("architecture: hidden widths must be >= 1");
  }
}

std::size_t PredictorParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.values.size();
  return n;
}

ParamGrads PredictorParams::zero_grads() const {
  ParamGrads g;
  g.reserve(blocks.size());
  for (const auto& b : blocks) g.emplace_back(b.values.size(), 0.0);
  return g;
}

bool PredictorParams::all_finite() const {
  for (const auto& b : blocks) {
    for (double x : b.values) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

namespace {

int conv_input_width(const Architecture& arch, int layer) {
  return layer == 0 ? arch.in_channels : arch.hidden_widths[static_cast<std::size_t>(layer - 1)];
}

int conv_output_width(const Architecture& arch, int layer) {
  return layer < static_cast<int>(arch.hidden_widths.size()) ? arch.hidden_widths[static_cast<std::size_t>(layer)]
                                                             : arch.out_channels;
}

void check_params(const PredictorParams& params) {
  params.arch.validate();
  if (!(params.dropout_rate >= 0.0 && params.dropout_rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0, 1)");
  }
  const int layers = params.arch.conv_count();
  if (static_cast<int>(params.blocks.size()) != 2 * layers) {
    throw std::invalid_argument("parameter blocks do not match the architecture");
  }
  for (int l = 0; l < layers; ++l) {
    const std::size_t in = static_cast<std::size_t>(conv_input_width(params.arch, l));
    const std::size_t out = static_cast<std::size_t>(conv_output_width(params.arch, l));
    if (params.blocks[2 * l].values.size() != out * in * kKernelVolume ||
        params.blocks[2 * l + 1].values.size() != out) {
      throw std::invalid_argument("kernel shape inconsistent with the architecture");
    }
  }
}

double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }

void warn_out_of_range_once(const ScalarVolume& img) {
  static std::atomic<bool> warned{false};
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  if ((*lo < -1.0 - 1e-9 || *hi > 1.0 + 1e-9) && !warned.exchange(true)) {
    std::clog << "svfreg: warning: predictor input intensities outside [-1, 1]\n";
  }
}

}  // namespace

void PredictorParams::validate() const { check_params(*this); }

PredictorParams init_params(const Architecture& arch, std::uint64_t seed, double dropout_rate) {
  arch.validate();
  PredictorParams params;
  params.arch = arch;
  params.dropout_rate = dropout_rate;
  params.seed = seed;
  const CounterRng root(seed, 0x1717);
  const int layers = arch.conv_count();
  for (int l = 0; l < layers; ++l) {
    const int in = conv_input_width(arch, l);
    const int out = conv_output_width(arch, l);
    const bool head = l == layers - 1;
    const std::string prefix = head ? "head" : "conv" + std::to_string(l);

    ParamBlock weight{prefix + ".weight", {out, in, 3, 3, 3}, std::vector<double>(static_cast<std::size_t>(out) * in * kKernelVolume, 0.0)};
    ParamBlock bias{prefix + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0)};
    if (!head) {
      // He uniform with the leaky-ReLU gain.
      const double fan_in = static_cast<double>(in) * kKernelVolume;
      const double bound = std::sqrt(6.0 / ((1.0 + arch.leaky_slope * arch.leaky_slope) * fan_in));
      CounterRng rng = root.split(static_cast<std::uint64_t>(l));
      for (double& w : weight.values) w = rng.uniform(-bound, bound);
    }
    params.blocks.push_back(std::move(weight));
    params.blocks.push_back(std::move(bias));
  }
  return params;
}

DropoutMask sample_dropout_mask(const Architecture& arch, double dropout_rate, std::uint64_t seed) {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
  DropoutMask mask;
  mask.seed = seed;
  const CounterRng root(seed, 0xD50);
  for (std::size_t l = 0; l < arch.hidden_widths.size(); ++l) {
    CounterRng rng = root.split(l);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(arch.hidden_widths[l]));
    for (auto& k : keep) k = rng.uniform() >= dropout_rate ? 1 : 0;
    mask.keep.push_back(std::move(keep));
  }
  return mask;
}

DropoutMask sample_dropout_mask(const PredictorParams& params, std::uint64_t seed) {
  return sample_dropout_mask(params.arch, params.dropout_rate, seed);
}

namespace detail {

void conv3d_forward(std::span<const double> input, int in_channels, const Dims& d, std::span<const double> weight,
                    std::span<const double> bias, int out_channels, std::span<double> output) {
  const std::size_t m = d.count();
  const std::ptrdiff_t sy = d.nx;
  const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(d.nx) * d.ny;
  for (int o = 0; o < out_channels; ++o) {
    double* out = output.data() + o * m;
    std::fill(out, out + m, bias[static_cast<std::size_t>(o)]);
    for (int i = 0; i < in_channels; ++i) {
      const double* in = input.data() + i * m;
      const double* w = weight.data() + (static_cast<std::size_t>(o) * in_channels + i) * kKernelVolume;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const double wk = w[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)];
            const std::ptrdiff_t off = dx + dy * sy + dz * sz;
            const int x0 = std::max(0, -dx), x1 = std::min(d.nx, d.nx - dx);
            for (int z = std::max(0, -dz); z < std::min(d.nz, d.nz - dz); ++z) {
              for (int y = std::max(0, -dy); y < std::min(d.ny, d.ny - dy); ++y) {
                const std::ptrdiff_t row = y * sy + z * sz;
                double* dst = out + row;
                const double* src = in + row + off;
                for (int x = x0; x < x1; ++x) dst[x] += wk * src[x];
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward(std::span<const double> input, int in_channels, const Dims& d, std::span<const double> weight,
                     int out_channels, std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t m = d.count();
  const std::ptrdiff_t sy = d.nx;
  const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(d.nx) * d.ny;
  const bool want_input = !grad_input.empty();
  for (int o = 0; o < out_channels; ++o) {
    const double* gout = grad_output.data() + o * m;
    double bsum = 0.0;
    for (std::size_t n = 0; n < m; ++n) bsum += gout[n];
    grad_bias[static_cast<std::size_t>(o)] += bsum;
    for (int i = 0; i < in_channels; ++i) {
      const double* in = input.data() + i * m;
      double* gin = want_input ? grad_input.data() + i * m : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(o) * in_channels + i) * kKernelVolume;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t kk = wbase + static_cast<std::size_t>((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1));
            const double wk = weight[kk];
            const std::ptrdiff_t off = dx + dy * sy + dz * sz;
            const int x0 = std::max(0, -dx), x1 = std::min(d.nx, d.nx - dx);
            double wsum = 0.0;
            for (int z = std::max(0, -dz); z < std::min(d.nz, d.nz - dz); ++z) {
              for (int y = std::max(0, -dy); y < std::min(d.ny, d.ny - dy); ++y) {
                const std::ptrdiff_t row = y * sy + z * sz;
                const double* g = gout + row;
                const double* src = in + row + off;
                for (int x = x0; x < x1; ++x) wsum += g[x] * src[x];
                if (gin) {
                  double* gdst = gin + row + off;
                  for (int x = x0; x < x1; ++x) gdst[x] += wk * g[x];
                }
              }
            }
            grad_weight[kk] += wsum;
          }
        }
      }
    }
  }
}

std::vector<double> average_pool(std::span<const double> input, int channels, const Dims& d, int factor) {
  if (d.nx % factor != 0 || d.ny % factor != 0 || d.nz % factor != 0) {
    throw std::invalid_argument("input dims must be divisible by the downsample factor");
  }
  const Dims c{d.nx / factor, d.ny / factor, d.nz / factor};
  const std::size_t m = d.count();
  const std::size_t mc = c.count();
  std::vector<double> out(static_cast<std::size_t>(channels) * mc, 0.0);
  const double inv = 1.0 / (static_cast<double>(factor) * factor * factor);
  for (int ch = 0; ch < channels; ++ch) {
    const double* in = input.data() + ch * m;
    double* dst = out.data() + ch * mc;
    std::size_t n = 0;
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x, ++n) {
          dst[(x / factor) + static_cast<std::size_t>(c.nx) * ((y / factor) + static_cast<std::size_t>(c.ny) * (z / factor))] += in[n];
        }
      }
    }
    for (std::size_t q = 0; q < mc; ++q) dst[q] *= inv;
  }
  return out;
}

}  // namespace detail

PredictorOutput forward(const PredictorParams& params, const ScalarVolume& fixed, const ScalarVolume& moving,
                        const DropoutMask* mask) {
  check_params(params);
  require_same_dims(fixed.dims(), moving.dims(), "predictor forward");
  const Architecture& arch = params.arch;
  const int hidden = static_cast<int>(arch.hidden_widths.size());
  if (mask != nullptr) {
    if (static_cast<int>(mask->keep.size()) != hidden) throw std::invalid_argument("dropout mask incompatible with architecture");
    for (int l = 0; l < hidden; ++l) {
      if (static_cast<int>(mask->keep[static_cast<std::size_t>(l)].size()) != arch.hidden_widths[static_cast<std::size_t>(l)]) {
        throw std::invalid_argument("dropout mask incompatible with architecture");
      }
    }
  }
  warn_out_of_range_once(fixed);
  warn_out_of_range_once(moving);

  const Dims& d = fixed.dims();
  const int f = arch.downsample;
  if (d.nx % f != 0 || d.ny % f != 0 || d.nz % f != 0) {
    throw std::invalid_argument("input dims must be divisible by the downsample factor");
  }
  const Dims cd{d.nx / f, d.ny / f, d.nz / f};
  require_valid_dims(cd, 2);
  const std::size_t mc = cd.count();

  PredictorOutput result;
  ForwardTape& tape = result.tape;
  tape.input_dims = d;
  tape.coarse_dims = cd;
  tape.coarse_spacing = {fixed.spacing()[0] * f, fixed.spacing()[1] * f, fixed.spacing()[2] * f};

  std::vector<double> stacked(2 * d.count());
  std::copy(fixed.data().begin(), fixed.data().end(), stacked.begin());
  std::copy(moving.data().begin(), moving.data().end(), stacked.begin() + static_cast<std::ptrdiff_t>(d.count()));
  std::vector<double> x = detail::average_pool(stacked, 2, d, f);

  const double keep_scale = 1.0 / (1.0 - params.dropout_rate);
  for (int l = 0; l <= hidden; ++l) {
    const int in = conv_input_width(arch, l);
    const int out = conv_output_width(arch, l);
    std::vector<double> z(static_cast<std::size_t>(out) * mc);
    detail::conv3d_forward(x, in, cd, params.blocks[2 * l].values, params.blocks[2 * l + 1].values, out, z);
    tape.layer_inputs.push_back(std::move(x));
    if (l == hidden) {
      x = std::move(z);
      break;
    }
    std::vector<double> scale(static_cast<std::size_t>(out), 1.0);
    if (mask != nullptr) {
      for (int c = 0; c < out; ++c) {
        scale[static_cast<std::size_t>(c)] = mask->keep[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)] ? keep_scale : 0.0;
      }
    }
    std::vector<double> a(z.size());
    for (int c = 0; c < out; ++c) {
      const double s = scale[static_cast<std::size_t>(c)];
      for (std::size_t n = 0; n < mc; ++n) a[c * mc + n] = s * leaky(z[c * mc + n], arch.leaky_slope);
    }
    tape.pre_activations.push_back(std::move(z));
    tape.dropout_scale.push_back(std::move(scale));
    x = std::move(a);
  }

  result.coarse_svf = VectorField(cd, tape.coarse_spacing, std::move(x));
  result.svf = f == 1 ? result.coarse_svf : upsample_field(result.coarse_svf, d);
  return result;
}

ParamGrads backward(const PredictorParams& params, const ForwardTape& tape, const VectorField& grad_svf) {
  check_params(params);
  require_same_dims(tape.input_dims, grad_svf.dims(), "predictor backward");
  const Architecture& arch = params.arch;
  const int hidden = static_cast<int>(arch.hidden_widths.size());
  if (static_cast<int>(tape.layer_inputs.size()) != hidden + 1 || static_cast<int>(tape.pre_activations.size()) != hidden) {
    throw std::invalid_argument("forward tape does not match the architecture");
  }
  const Dims& cd = tape.coarse_dims;
  const std::size_t mc = cd.count();

  VectorField coarse_grad = arch.downsample == 1 ? grad_svf
                                                 : upsample_field_adjoint(grad_svf, cd, tape.coarse_spacing);
  std::vector<double> g(coarse_grad.data().begin(), coarse_grad.data().end());

  ParamGrads grads = params.zero_grads();
  for (int l = hidden; l >= 0; --l) {
    const int in = conv_input_width(arch, l);
    const int out = conv_output_width(arch, l);
    const auto& input = tape.layer_inputs[static_cast<std::size_t>(l)];
    if (input.size() != static_cast<std::size_t>(in) * mc) throw std::invalid_argument("forward tape does not match the architecture");
    std::vector<double> g_in;
    if (l > 0) g_in.assign(static_cast<std::size_t>(in) * mc, 0.0);
    detail::conv3d_backward(input, in, cd, params.blocks[2 * l].values, out, g, g_in, grads[2 * l], grads[2 * l + 1]);
    if (l == 0) break;
    // Through dropout scaling and the nonlinearity of hidden layer l-1.
    const auto& z = tape.pre_activations[static_cast<std::size_t>(l - 1)];
    const auto& scale = tape.dropout_scale[static_cast<std::size_t>(l - 1)];
    for (int c = 0; c < in; ++c) {
      const double s = scale[static_cast<std::size_t>(c)];
      for (std::size_t n = 0; n < mc; ++n) {
        const std::size_t q = c * mc + n;
        g_in[q] *= s * (z[q] > 0.0 ? 1.0 : arch.leaky_slope);
      }
    }
    g = std::move(g_in);
  }
  return grads;
}

}  // namespace svfreg
