#include "svfreg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "svfreg/error.hpp"

namespace svfreg {

namespace {

void require_valid_spacing(const Vec3& spacing) {
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("spacing components must be finite and > 0");
  }
}

struct AxisWeight {
  int i0 = 0;
  double t = 0.0;
  bool clamped = false;
};

AxisWeight axis_weight(double x, int n) {
  AxisWeight w;
  const double hi = static_cast<double>(n - 1);
  if (x < 0.0) {
    x = 0.0;
    w.clamped = true;
  } else if (x > hi) {
    x = hi;
    w.clamped = true;
  }
  w.i0 = std::min(static_cast<int>(std::floor(x)), n - 2);
  w.t = x - static_cast<double>(w.i0);
  return w;
}

void require_finite(const GridPoint& p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
    throw NumericalError("non-finite sample coordinate");
  }
}

}  // namespace

ScalarVolume::ScalarVolume(Dims dims, Vec3 spacing, double fill) : dims_(dims), spacing_(spacing) {
  require_valid_dims(dims_);
  require_valid_spacing(spacing_);
  data_.assign(dims_.count(), fill);
}

ScalarVolume::ScalarVolume(Dims dims, Vec3 spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  require_valid_dims(dims_);
  require_valid_spacing(spacing_);
  if (data_.size() != dims_.count()) throw std::invalid_argument("volume data length does not match dims");
}

VectorField::VectorField(Dims dims, Vec3 spacing, double fill) : dims_(dims), spacing_(spacing) {
  require_valid_dims(dims_);
  require_valid_spacing(spacing_);
  data_.assign(3 * dims_.count(), fill);
}

VectorField::VectorField(Dims dims, Vec3 spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  require_valid_dims(dims_);
  require_valid_spacing(spacing_);
  if (data_.size() != 3 * dims_.count()) throw std::invalid_argument("vector field data length does not match dims");
}

VectorField VectorField::constant(Dims dims, const Vec3& value, Vec3 spacing) {
  VectorField f(dims, spacing);
  for (int c = 0; c < 3; ++c) std::fill(f.channel(c).begin(), f.channel(c).end(), value[c]);
  return f;
}

ScalarVolume VectorField::component(int c) const {
  auto ch = channel(c);
  return ScalarVolume(dims_, spacing_, std::vector<double>(ch.begin(), ch.end()));
}

VectorField& VectorField::operator+=(const VectorField& other) {
  require_same_dims(dims_, other.dims_, "vector field addition");
  for (std::size_t n = 0; n < data_.size(); ++n) data_[n] += other.data_[n];
  return *this;
}

VectorField& VectorField::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

VectorField VectorField::operator-() const {
  VectorField out = *this;
  out *= -1.0;
  return out;
}

bool VectorField::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void require_valid_dims(const Dims& dims, int min_extent) {
  if (dims.nx < min_extent || dims.ny < min_extent || dims.nz < min_extent) {
    throw std::invalid_argument("grid dims must be >= " + std::to_string(min_extent) + " along every axis");
  }
}

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw std::invalid_argument(std::string("dimension mismatch in ") + what);
}

TrilinearStencil make_stencil(const Dims& dims, const GridPoint& p) {
  require_finite(p);
  const AxisWeight wx = axis_weight(p.x, dims.nx);
  const AxisWeight wy = axis_weight(p.y, dims.ny);
  const AxisWeight wz = axis_weight(p.z, dims.nz);
  const std::size_t sx = 1;
  const std::size_t sy = static_cast<std::size_t>(dims.nx);
  const std::size_t sz = sy * static_cast<std::size_t>(dims.ny);
  const std::size_t base = static_cast<std::size_t>(wx.i0) * sx + static_cast<std::size_t>(wy.i0) * sy +
                           static_cast<std::size_t>(wz.i0) * sz;
  const double ax[2] = {1.0 - wx.t, wx.t};
  const double ay[2] = {1.0 - wy.t, wy.t};
  const double az[2] = {1.0 - wz.t, wz.t};

  TrilinearStencil s;
  int n = 0;
  for (int c = 0; c < 2; ++c) {
    for (int b = 0; b < 2; ++b) {
      for (int a = 0; a < 2; ++a) {
        s.index[n] = base + a * sx + b * sy + c * sz;
        s.weight[n] = ax[a] * ay[b] * az[c];
        ++n;
      }
    }
  }
  return s;
}

TrilinearStencilGrad make_stencil_with_derivative(const Dims& dims, const GridPoint& p) {
  require_finite(p);
  const std::array<AxisWeight, 3> w = {axis_weight(p.x, dims.nx), axis_weight(p.y, dims.ny),
                                       axis_weight(p.z, dims.nz)};
  const std::size_t sy = static_cast<std::size_t>(dims.nx);
  const std::size_t sz = sy * static_cast<std::size_t>(dims.ny);
  const std::size_t base =
      static_cast<std::size_t>(w[0].i0) + static_cast<std::size_t>(w[1].i0) * sy + static_cast<std::size_t>(w[2].i0) * sz;

  TrilinearStencilGrad out;
  std::array<std::array<double, 2>, 3> val{};
  std::array<std::array<double, 2>, 3> der{};
  for (int a = 0; a < 3; ++a) {
    val[a] = {1.0 - w[a].t, w[a].t};
    der[a] = w[a].clamped ? std::array<double, 2>{0.0, 0.0} : std::array<double, 2>{-1.0, 1.0};
    if (!w[a].clamped && w[a].t == 0.0 && w[a].i0 > 0) out.on_grid_plane = true;
  }
  int n = 0;
  for (int c = 0; c < 2; ++c) {
    for (int b = 0; b < 2; ++b) {
      for (int a = 0; a < 2; ++a) {
        out.stencil.index[n] = base + a + b * sy + c * sz;
        out.stencil.weight[n] = val[0][a] * val[1][b] * val[2][c];
        out.dweight[0][n] = der[0][a] * val[1][b] * val[2][c];
        out.dweight[1][n] = val[0][a] * der[1][b] * val[2][c];
        out.dweight[2][n] = val[0][a] * val[1][b] * der[2][c];
        ++n;
      }
    }
  }
  return out;
}

Vec3 sample_derivative(std::span<const double> values, const Dims& dims, const GridPoint& p) {
  require_finite(p);
  const std::array<AxisWeight, 3> w = {axis_weight(p.x, dims.nx), axis_weight(p.y, dims.ny),
                                       axis_weight(p.z, dims.nz)};
  const std::array<std::size_t, 3> stride = {1, static_cast<std::size_t>(dims.nx),
                                             static_cast<std::size_t>(dims.nx) * static_cast<std::size_t>(dims.ny)};
  Vec3 grad{0.0, 0.0, 0.0};
  for (int axis = 0; axis < 3; ++axis) {
    if (w[axis].clamped) continue;
    const int b = (axis + 1) % 3;
    const int c = (axis + 2) % 3;

    // Bilinear interpolation over the two other axes at a fixed index along `axis`.
    auto plane_value = [&](int index_along_axis) {
      double acc = 0.0;
      for (int db = 0; db < 2; ++db) {
        const double wb = db == 0 ? 1.0 - w[b].t : w[b].t;
        for (int dc = 0; dc < 2; ++dc) {
          const double wc = dc == 0 ? 1.0 - w[c].t : w[c].t;
          const std::size_t idx = static_cast<std::size_t>(index_along_axis) * stride[axis] +
                                  static_cast<std::size_t>(w[b].i0 + db) * stride[b] +
                                  static_cast<std::size_t>(w[c].i0 + dc) * stride[c];
          acc += wb * wc * values[idx];
        }
      }
      return acc;
    };

    const int i0 = w[axis].i0;
    if (w[axis].t == 0.0 && i0 > 0) {
      grad[axis] = 0.5 * (plane_value(i0 + 1) - plane_value(i0 - 1));
    } else {
      grad[axis] = plane_value(i0 + 1) - plane_value(i0);
    }
  }
  return grad;
}

std::vector<double> trilinear_sample(const ScalarVolume& vol, std::span<const GridPoint> points) {
  std::vector<double> out(points.size());
  for (std::size_t n = 0; n < points.size(); ++n) out[n] = make_stencil(vol.dims(), points[n]).apply(vol.data());
  return out;
}

std::vector<Vec3> trilinear_sample(const VectorField& field, std::span<const GridPoint> points) {
  std::vector<Vec3> out(points.size());
  for (std::size_t n = 0; n < points.size(); ++n) {
    const TrilinearStencil s = make_stencil(field.dims(), points[n]);
    for (int c = 0; c < 3; ++c) out[n][c] = s.apply(field.channel(c));
  }
  return out;
}

ScalarVolume trilinear_sample_adjoint(const Dims& dims, std::span<const GridPoint> points,
                                      std::span<const double> upstream, Vec3 spacing) {
  if (points.size() != upstream.size()) throw std::invalid_argument("adjoint: one upstream value per point required");
  ScalarVolume grad(dims, spacing);
  for (std::size_t n = 0; n < points.size(); ++n) make_stencil(dims, points[n]).scatter(grad.data(), upstream[n]);
  return grad;
}

VectorField trilinear_sample_adjoint(const Dims& dims, std::span<const GridPoint> points,
                                     std::span<const Vec3> upstream, Vec3 spacing) {
  if (points.size() != upstream.size()) throw std::invalid_argument("adjoint: one upstream value per point required");
  VectorField grad(dims, spacing);
  for (std::size_t n = 0; n < points.size(); ++n) {
    const TrilinearStencil s = make_stencil(dims, points[n]);
    for (int c = 0; c < 3; ++c) s.scatter(grad.channel(c), upstream[n][c]);
  }
  return grad;
}

VectorField central_gradient(const ScalarVolume& vol) {
  const Dims& d = vol.dims();
  require_valid_dims(d, 2);
  VectorField g(d, vol.spacing());
  auto diff = [](double lo, double hi, double span) { return (hi - lo) / span; };
  for (int k = 0; k < d.nz; ++k) {
    for (int j = 0; j < d.ny; ++j) {
      for (int i = 0; i < d.nx; ++i) {
        const std::size_t n = vol.index(i, j, k);
        {
          const int lo = std::max(i - 1, 0);
          const int hi = std::min(i + 1, d.nx - 1);
          g.at(0, n) = diff(vol(lo, j, k), vol(hi, j, k), hi - lo);
        }
        {
          const int lo = std::max(j - 1, 0);
          const int hi = std::min(j + 1, d.ny - 1);
          g.at(1, n) = diff(vol(i, lo, k), vol(i, hi, k), hi - lo);
        }
        {
          const int lo = std::max(k - 1, 0);
          const int hi = std::min(k + 1, d.nz - 1);
          g.at(2, n) = diff(vol(i, j, lo), vol(i, j, hi), hi - lo);
        }
      }
    }
  }
  return g;
}

namespace {

double source_coordinate(int i, int n_old, int n_new) {
  return (static_cast<double>(i) + 0.5) * static_cast<double>(n_old) / static_cast<double>(n_new) - 0.5;
}

Vec3 rescaled_spacing(const Vec3& spacing, const Dims& from, const Dims& to) {
  return {spacing[0] * from.nx / to.nx, spacing[1] * from.ny / to.ny, spacing[2] * from.nz / to.nz};
}

// Calls fn(fine_index, stencil_on_source_grid) for every voxel of `to`.
template <typename Fn>
void for_each_resample_stencil(const Dims& from, const Dims& to, Fn&& fn) {
  std::size_t n = 0;
  for (int k = 0; k < to.nz; ++k) {
    const double z = source_coordinate(k, from.nz, to.nz);
    for (int j = 0; j < to.ny; ++j) {
      const double y = source_coordinate(j, from.ny, to.ny);
      for (int i = 0; i < to.nx; ++i, ++n) {
        fn(n, make_stencil(from, GridPoint{source_coordinate(i, from.nx, to.nx), y, z}));
      }
    }
  }
}

}  // namespace

ScalarVolume resample_to(const ScalarVolume& vol, const Dims& new_dims) {
  require_valid_dims(new_dims);
  ScalarVolume out(new_dims, rescaled_spacing(vol.spacing(), vol.dims(), new_dims));
  auto src = vol.data();
  auto dst = out.data();
  for_each_resample_stencil(vol.dims(), new_dims,
                            [&](std::size_t n, const TrilinearStencil& s) { dst[n] = s.apply(src); });
  return out;
}

ScalarVolume resample(const ScalarVolume& vol, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw std::invalid_argument("resample factor must be > 0");
  const Dims& d = vol.dims();
  const Dims target{static_cast<int>(std::lround(d.nx * factor)), static_cast<int>(std::lround(d.ny * factor)),
                    static_cast<int>(std::lround(d.nz * factor))};
  if (target.nx < 2 || target.ny < 2 || target.nz < 2) throw std::invalid_argument("resample: degenerate target dims");
  return resample_to(vol, target);
}

VectorField upsample_field(const VectorField& field, const Dims& new_dims) {
  require_valid_dims(new_dims);
  const Dims& from = field.dims();
  VectorField out(new_dims, rescaled_spacing(field.spacing(), from, new_dims));
  const Vec3 scale = {static_cast<double>(new_dims.nx) / from.nx, static_cast<double>(new_dims.ny) / from.ny,
                      static_cast<double>(new_dims.nz) / from.nz};
  for_each_resample_stencil(from, new_dims, [&](std::size_t n, const TrilinearStencil& s) {
    for (int c = 0; c < 3; ++c) out.at(c, n) = scale[c] * s.apply(field.channel(c));
  });
  return out;
}

VectorField upsample_field_adjoint(const VectorField& fine_grad, const Dims& coarse_dims, Vec3 coarse_spacing) {
  const Dims& to = fine_grad.dims();
  VectorField out(coarse_dims, coarse_spacing);
  const Vec3 scale = {static_cast<double>(to.nx) / coarse_dims.nx, static_cast<double>(to.ny) / coarse_dims.ny,
                      static_cast<double>(to.nz) / coarse_dims.nz};
  for_each_resample_stencil(coarse_dims, to, [&](std::size_t n, const TrilinearStencil& s) {
    for (int c = 0; c < 3; ++c) s.scatter(out.channel(c), scale[c] * fine_grad.at(c, n));
  });
  return out;
}

ScalarVolume clip_rescale(const ScalarVolume& vol) {
  ScalarVolume out = vol;
  for (double& x : out.data()) x = std::clamp(x, -kHounsfieldClip, kHounsfieldClip) / kHounsfieldClip;
  return out;
}

}  // namespace svfreg
