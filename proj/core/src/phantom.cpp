#include "svfreg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "svfreg/rng.hpp"

namespace svfreg {

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

void blur_axis(std::span<double> data, const Dims& d, int axis, const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::array<std::size_t, 3> stride = {1, static_cast<std::size_t>(d.nx),
                                             static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)};
  const int len = d[axis];
  const int b = (axis + 1) % 3, c = (axis + 2) % 3;
  std::vector<double> line(static_cast<std::size_t>(len));
  for (int ic = 0; ic < d[c]; ++ic) {
    for (int ib = 0; ib < d[b]; ++ib) {
      const std::size_t base = static_cast<std::size_t>(ib) * stride[b] + static_cast<std::size_t>(ic) * stride[c];
      for (int q = 0; q < len; ++q) line[static_cast<std::size_t>(q)] = data[base + q * stride[axis]];
      for (int q = 0; q < len; ++q) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const int src = std::clamp(q + t, 0, len - 1);
          acc += kernel[static_cast<std::size_t>(t + radius)] * line[static_cast<std::size_t>(src)];
        }
        data[base + q * stride[axis]] = acc;
      }
    }
  }
}

void blur(std::span<double> data, const Dims& d, double sigma) {
  if (sigma <= 0.0) return;
  const auto kernel = gaussian_kernel(sigma);
  for (int axis = 0; axis < 3; ++axis) blur_axis(data, d, axis, kernel);
}

// Smooth noise in [-1, 1] (normalized by its max magnitude).
ScalarVolume smooth_noise(const Dims& d, double sigma, CounterRng rng) {
  ScalarVolume v(d);
  for (double& x : v.data()) x = rng.normal();
  blur(v.data(), d, sigma);
  double peak = 0.0;
  for (double x : v.data()) peak = std::max(peak, std::abs(x));
  if (peak > 0.0) {
    for (double& x : v.data()) x /= peak;
  }
  return v;
}

struct Vessel {
  Vec3 p0, p1, p2;  // quadratic Bezier control points
  double radius;
  double intensity;
};

Vec3 bezier(const Vessel& s, double t) {
  const double a = (1 - t) * (1 - t), b = 2 * (1 - t) * t, c = t * t;
  return {a * s.p0[0] + b * s.p1[0] + c * s.p2[0], a * s.p0[1] + b * s.p1[1] + c * s.p2[1],
          a * s.p0[2] + b * s.p1[2] + c * s.p2[2]};
}

double segment_distance2(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  Vec3 ap{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
  const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
  double t = len2 > 0.0 ? (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = ap[0] - t * ab[0], dy = ap[1] - t * ab[1], dz = ap[2] - t * ab[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

ScalarVolume gaussian_smooth(const ScalarVolume& vol, double sigma) {
  ScalarVolume out = vol;
  blur(out.data(), out.dims(), sigma);
  return out;
}

VectorField smooth_random_svf(const Dims& dims, double amplitude, double smoothness, std::uint64_t seed, Vec3 spacing) {
  if (amplitude < 0.0) throw std::invalid_argument("amplitude must be >= 0");
  if (smoothness < 1.0) throw std::invalid_argument("smoothness must be >= 1");
  VectorField v(dims, spacing);
  if (amplitude == 0.0) return v;
  const CounterRng root(seed, 0x5F);
  for (int c = 0; c < 3; ++c) {
    CounterRng rng = root.split(static_cast<std::uint64_t>(c));
    for (double& x : v.channel(c)) x = rng.normal();
    blur(v.channel(c), dims, smoothness);
  }
  double peak = 0.0;
  for (std::size_t n = 0; n < v.voxel_count(); ++n) {
    const Vec3 x = v.vec(n);
    peak = std::max(peak, std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]));
  }
  if (peak > 0.0) v *= amplitude / peak;
  return v;
}

PhantomCase make_phantom_pair(const Dims& dims, const PhantomDeformation& deformation, std::uint64_t seed,
                              int integration_steps) {
  if (!(deformation.radial_scale >= 0.5 && deformation.radial_scale <= 1.0)) {
    throw std::invalid_argument("radial_scale must lie in [0.5, 1.0]");
  }
  require_valid_dims(dims, 24);
  const Vec3 spacing{kPhantomSpacingMm, kPhantomSpacingMm, kPhantomSpacingMm};
  const CounterRng root(seed, 0xF4A7);
  CounterRng shape_rng = root.split(0);

  const Vec3 center{0.5 * (dims.nx - 1), 0.5 * (dims.ny - 1), 0.5 * (dims.nz - 1)};
  const Vec3 base_axes{0.30, 0.26, 0.34};
  Vec3 semi{};
  for (int a = 0; a < 3; ++a) semi[a] = base_axes[a] * dims[a] * shape_rng.uniform(0.95, 1.05);
  const double mean_semi = (semi[0] + semi[1] + semi[2]) / 3.0;

  // Intensity model of the moving (inhale) image.
  const ScalarVolume lung_texture = smooth_noise(dims, dims.nx / 12.0, root.split(1));
  const ScalarVolume body_texture = smooth_noise(dims, dims.nx / 8.0, root.split(2));
  std::vector<Vessel> vessels;
  {
    CounterRng vr = root.split(3);
    auto inside_point = [&](double frac) {
      Vec3 p{};
      for (int a = 0; a < 3; ++a) p[a] = center[a] + semi[a] * frac * vr.uniform(-1.0, 1.0);
      return p;
    };
    for (int s = 0; s < 7; ++s) {
      vessels.push_back({inside_point(0.3), inside_point(0.7), inside_point(0.9),
                         (0.6 + 0.5 * vr.uniform()) * dims.nx / 48.0, 0.45 + 0.25 * vr.uniform()});
    }
  }

  ScalarVolume moving(dims, spacing);
  ScalarVolume moving_mask_vol(dims, spacing);
  const double edge_width = 0.8;  // voxels
  for (int k = 0; k < dims.nz; ++k) {
    for (int j = 0; j < dims.ny; ++j) {
      for (int i = 0; i < dims.nx; ++i) {
        const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
        double rho2 = 0.0;
        for (int a = 0; a < 3; ++a) rho2 += std::pow((p[a] - center[a]) / semi[a], 2);
        const double rho = std::sqrt(rho2);
        const double inside = 0.5 * (1.0 - std::tanh((rho - 1.0) * mean_semi / edge_width));
        const std::size_t n = moving.index(i, j, k);

        double vessel = 0.0;
        for (const Vessel& s : vessels) {
          double d2 = std::numeric_limits<double>::infinity();
          constexpr int kSegments = 12;
          Vec3 prev = bezier(s, 0.0);
          for (int q = 1; q <= kSegments; ++q) {
            const Vec3 next = bezier(s, static_cast<double>(q) / kSegments);
            d2 = std::min(d2, segment_distance2(p, prev, next));
            prev = next;
          }
          vessel = std::max(vessel, s.intensity * std::exp(-0.5 * d2 / (s.radius * s.radius)));
        }
        const double lung = -0.75 + 0.12 * lung_texture[n] + vessel;
        const double body = 0.05 + 0.06 * body_texture[n];
        moving[n] = std::clamp(inside * lung + (1.0 - inside) * body, -1.0, 1.0);
        moving_mask_vol[n] = rho <= 1.0 ? 1.0 : 0.0;
      }
    }
  }

  // Radial field: pulling back through exp(v) with v = -log(s) (x - c) samples
  // the moving image at c + (x - c)/s, which shrinks the lung by s per axis.
  const double rate = -std::log(deformation.radial_scale);
  const double r0 = 1.1 * std::max({semi[0], semi[1], semi[2]});
  const double r1 = std::max(r0 + 2.0, std::min({center[0], center[1], center[2]}));
  VectorField radial(dims, spacing);
  for (int k = 0; k < dims.nz; ++k) {
    for (int j = 0; j < dims.ny; ++j) {
      for (int i = 0; i < dims.nx; ++i) {
        const Vec3 off{i - center[0], j - center[1], k - center[2]};
        const double r = std::sqrt(off[0] * off[0] + off[1] * off[1] + off[2] * off[2]);
        double window = 1.0;
        if (r >= r1) {
          window = 0.0;
        } else if (r > r0) {
          const double t = (r - r0) / (r1 - r0);
          window = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
        }
        const std::size_t n = radial.index(i, j, k);
        for (int a = 0; a < 3; ++a) radial.at(a, n) = rate * window * off[a];
      }
    }
  }

  PhantomCase out;
  out.seed = seed;
  out.moving_mask = BinaryMask(std::move(moving_mask_vol));
  out.deformation = deformation;
  double amplitude = deformation.random_amplitude;
  constexpr int kMaxRetries = 5;
  for (int attempt = 0;; ++attempt) {
    VectorField v = radial;
    if (amplitude > 0.0) v += smooth_random_svf(dims, amplitude, deformation.smoothness, root.split(4).key(), spacing);
    const DisplacementField u = integrate_svf(v, integration_steps).displacement;
    BinaryMask fixed_mask = warp_mask(out.moving_mask, u);
    const bool folded = fixed_mask.empty() || folding_fraction(jacobian_determinant(u), fixed_mask.volume()) > 0.0;
    if (!folded || attempt == kMaxRetries) {
      if (folded) throw std::runtime_error("phantom: ground-truth deformation folds after retries");
      out.fixed = warp(moving, u);
      out.fixed_mask = std::move(fixed_mask);
      out.v_gt = std::move(v);
      out.retries = attempt;
      out.deformation.random_amplitude = amplitude;
      break;
    }
    amplitude *= 0.5;
  }
  out.moving = std::move(moving);
  out.delta_v_analog =
      1.0 - static_cast<double>(out.fixed_mask.count()) / static_cast<double>(out.moving_mask.count());
  return out;
}

}  // namespace svfreg
