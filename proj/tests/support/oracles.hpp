#pragma once

// Independent reference implementations and random fixtures shared by the
// unit tests and the acceptance runner. Everything here is written directly
// from the mathematical definitions, without calling the library routine
// that is being checked.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "svfreg/diffeo.hpp"
#include "svfreg/eval.hpp"
#include "svfreg/grid.hpp"

namespace oracle {

using svfreg::Dims;
using svfreg::ScalarVolume;
using svfreg::Vec3;
using svfreg::VectorField;

using Mat3 = std::array<std::array<double, 3>, 3>;

// ---------------------------------------------------------------------------
// Random fixtures
// ---------------------------------------------------------------------------

inline ScalarVolume random_volume(const Dims& d, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                  Vec3 spacing = {1.0, 1.0, 1.0}) {
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarVolume v(d, spacing);
  for (double& x : v.data()) x = u(rng);
  return v;
}

/// Sum of a few random low-frequency sinusoids, values roughly in [-1, 1].
inline ScalarVolume smooth_volume(const Dims& d, std::mt19937_64& rng, int terms = 4, double max_freq = 0.25) {
  std::uniform_real_distribution<double> f(-max_freq, max_freq), ph(0.0, 2.0 * std::numbers::pi);
  ScalarVolume v(d);
  for (int t = 0; t < terms; ++t) {
    const double fx = f(rng), fy = f(rng), fz = f(rng), p = ph(rng);
    for (int k = 0; k < d.nz; ++k)
      for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) v(i, j, k) += std::sin(fx * i + fy * j + fz * k + p) / terms;
  }
  return v;
}

inline VectorField smooth_field(const Dims& d, std::mt19937_64& rng, double amplitude, double max_freq = 0.2) {
  VectorField f(d);
  for (int c = 0; c < 3; ++c) {
    const ScalarVolume s = smooth_volume(d, rng, 3, max_freq);
    for (std::size_t n = 0; n < d.count(); ++n) f.at(c, n) = amplitude * s[n];
  }
  return f;
}

inline VectorField random_field(const Dims& d, std::mt19937_64& rng, double amplitude) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  VectorField f(d);
  for (double& x : f.data()) x = u(rng);
  return f;
}

inline svfreg::BinaryMask random_mask(const Dims& d, std::mt19937_64& rng, double density,
                                      Vec3 spacing = {1.0, 1.0, 1.0}) {
  std::bernoulli_distribution b(density);
  ScalarVolume v(d, spacing);
  for (double& x : v.data()) x = b(rng) ? 1.0 : 0.0;
  return svfreg::BinaryMask(v);
}

inline svfreg::BinaryMask box_mask(const Dims& d, std::array<int, 3> lo, std::array<int, 3> hi,
                                   Vec3 spacing = {1.0, 1.0, 1.0}) {
  ScalarVolume v(d, spacing);
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) v(i, j, k) = 1.0;
  return svfreg::BinaryMask(v);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Clamp to the grid, then explicit sum over the 8 surrounding nodes.
inline double trilinear(const std::vector<double>& values, const Dims& d, double x, double y, double z) {
  const std::array<double, 3> p = {std::clamp(x, 0.0, d.nx - 1.0), std::clamp(y, 0.0, d.ny - 1.0),
                                   std::clamp(z, 0.0, d.nz - 1.0)};
  const std::array<int, 3> n = {d.nx, d.ny, d.nz};
  std::array<int, 3> lo{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = static_cast<int>(std::floor(p[a]));
    if (lo[a] >= n[a] - 1) lo[a] = n[a] - 2;
    frac[a] = p[a] - lo[a];
  }
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dx ? frac[0] : 1 - frac[0]) * (dy ? frac[1] : 1 - frac[1]) * (dz ? frac[2] : 1 - frac[2]);
        const std::size_t idx = static_cast<std::size_t>(lo[0] + dx) +
                                static_cast<std::size_t>(d.nx) *
                                    (static_cast<std::size_t>(lo[1] + dy) +
                                     static_cast<std::size_t>(d.ny) * static_cast<std::size_t>(lo[2] + dz));
        acc += w * values[idx];
      }
  return acc;
}

inline double trilinear(const ScalarVolume& v, double x, double y, double z) {
  return trilinear(std::vector<double>(v.data().begin(), v.data().end()), v.dims(), x, y, z);
}

/// Per-voxel pull-back: out(x) = img(x + u(x)).
inline ScalarVolume warp(const ScalarVolume& img, const VectorField& u) {
  const Dims& d = img.dims();
  const std::vector<double> vals(img.data().begin(), img.data().end());
  ScalarVolume out(d, img.spacing());
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const std::size_t n = img.index(i, j, k);
        out[n] = trilinear(vals, d, i + u.at(0, n), j + u.at(1, n), k + u.at(2, n));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

/// exp(A) by Taylor series to 40 terms (accurate for the small norms used in tests).
inline Mat3 expm(const Mat3& a) {
  Mat3 result{}, term{};
  for (int i = 0; i < 3; ++i) result[i][i] = term[i][i] = 1.0;
  for (int n = 1; n <= 40; ++n) {
    term = mat_mul(term, a);
    for (auto& row : term)
      for (double& x : row) x /= n;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) result[i][j] += term[i][j];
  }
  return result;
}

/// Rule of Sarrus.
inline double det3(const Mat3& m) {
  return m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1] -
         m[0][2] * m[1][1] * m[2][0] - m[0][0] * m[1][2] * m[2][1] - m[0][1] * m[1][0] * m[2][2];
}

/// det(I + grad u) at an interior voxel, central differences written out per entry.
inline double jacobian_at(const VectorField& u, int i, int j, int k) {
  const Dims& d = u.dims();
  auto at = [&](int c, int x, int y, int z) {
    return u.at(c, static_cast<std::size_t>(x) + static_cast<std::size_t>(d.nx) * (y + static_cast<std::size_t>(d.ny) * z));
  };
  Mat3 m{};
  for (int c = 0; c < 3; ++c) {
    m[c][0] = 0.5 * (at(c, i + 1, j, k) - at(c, i - 1, j, k));
    m[c][1] = 0.5 * (at(c, i, j + 1, k) - at(c, i, j - 1, k));
    m[c][2] = 0.5 * (at(c, i, j, k + 1) - at(c, i, j, k - 1));
    m[c][c] += 1.0;
  }
  return det3(m);
}

// ---------------------------------------------------------------------------
// Masks and distances
// ---------------------------------------------------------------------------

inline double dice(const svfreg::BinaryMask& a, const svfreg::BinaryMask& b) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t n = 0; n < a.volume().size(); ++n) {
    sa += a.volume()[n];
    sb += b.volume()[n];
    inter += a.volume()[n] * b.volume()[n];
  }
  return 2.0 * inter / (sa + sb);
}

/// Voxels of the mask that touch a 6-neighbour outside the mask or the grid border.
inline std::vector<std::array<int, 3>> surface_points(const svfreg::BinaryMask& m) {
  const Dims& d = m.dims();
  auto inside = [&](int i, int j, int k) {
    if (i < 0 || j < 0 || k < 0 || i >= d.nx || j >= d.ny || k >= d.nz) return false;
    return m.volume()(i, j, k) == 1.0;
  };
  std::vector<std::array<int, 3>> pts;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        if (!inside(i, j, k)) continue;
        if (!inside(i - 1, j, k) || !inside(i + 1, j, k) || !inside(i, j - 1, k) || !inside(i, j + 1, k) ||
            !inside(i, j, k - 1) || !inside(i, j, k + 1)) {
          pts.push_back({i, j, k});
        }
      }
  return pts;
}

inline double point_distance(const std::array<int, 3>& a, const std::array<int, 3>& b, const Vec3& s) {
  const double dx = (a[0] - b[0]) * s[0], dy = (a[1] - b[1]) * s[1], dz = (a[2] - b[2]) * s[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Distance (mm) from every voxel to the nearest surface voxel, by exhaustive scan.
inline ScalarVolume edt(const svfreg::BinaryMask& m) {
  const Dims& d = m.dims();
  const auto surf = surface_points(m);
  ScalarVolume out(d, m.spacing());
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& p : surf) best = std::min(best, point_distance({i, j, k}, p, m.spacing()));
        out(i, j, k) = best;
      }
  return out;
}

inline double assd(const svfreg::BinaryMask& a, const svfreg::BinaryMask& b) {
  const auto sa = surface_points(a), sb = surface_points(b);
  auto nearest = [&](const std::array<int, 3>& p, const std::vector<std::array<int, 3>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) best = std::min(best, point_distance(p, q, a.spacing()));
    return best;
  };
  double sum = 0.0;
  for (const auto& p : sa) sum += nearest(p, sb);
  for (const auto& p : sb) sum += nearest(p, sa);
  return sum / static_cast<double>(sa.size() + sb.size());
}

// ---------------------------------------------------------------------------
// Statistics and calculus
// ---------------------------------------------------------------------------

/// Population mean and variance of each voxel/channel, two separate passes.
inline std::pair<std::vector<double>, std::vector<double>> two_pass_variance(const std::vector<VectorField>& samples) {
  const std::size_t len = samples.front().data().size();
  std::vector<double> mean(len, 0.0), var(len, 0.0);
  for (const auto& s : samples)
    for (std::size_t q = 0; q < len; ++q) mean[q] += s.data()[q];
  for (double& m : mean) m /= static_cast<double>(samples.size());
  for (const auto& s : samples)
    for (std::size_t q = 0; q < len; ++q) var[q] += (s.data()[q] - mean[q]) * (s.data()[q] - mean[q]);
  for (double& v : var) v /= static_cast<double>(samples.size());
  return {mean, var};
}

/// Central difference of f along one coordinate.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

inline bool interior(const Dims& d, int i, int j, int k, int margin) {
  return i >= margin && j >= margin && k >= margin && i < d.nx - margin && j < d.ny - margin && k < d.nz - margin;
}

}  // namespace oracle
