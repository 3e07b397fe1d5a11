#pragma once

// Dense 3D grid containers, trilinear sampling (and its adjoint), finite
// difference stencils, resampling and CT intensity preprocessing.
//
// Layout: x fastest, then y, then z. Vector fields are channel-major: all x
// components first, then all y, then all z. Vector quantities (displacements,
// velocities) are in voxel units of the grid they live on.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace svfreg {

using Vec3 = std::array<double, 3>;

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  bool operator==(const Dims&) const = default;
};

/// Continuous coordinate in voxel index space.
struct GridPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

class ScalarVolume {
 public:
  ScalarVolume() = default;
  ScalarVolume(Dims dims, Vec3 spacing = {1.0, 1.0, 1.0}, double fill = 0.0);
  ScalarVolume(Dims dims, Vec3 spacing, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_.nx) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_.ny) * static_cast<std::size_t>(k));
  }
  double& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }
  double operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }
  double& operator[](std::size_t n) { return data_[n]; }
  double operator[](std::size_t n) const { return data_[n]; }

 private:
  Dims dims_{};
  Vec3 spacing_{1.0, 1.0, 1.0};
  std::vector<double> data_;
};

class VectorField {
 public:
  VectorField() = default;
  VectorField(Dims dims, Vec3 spacing = {1.0, 1.0, 1.0}, double fill = 0.0);
  VectorField(Dims dims, Vec3 spacing, std::vector<double> data);

  /// Builds a field with the same value at every voxel.
  static VectorField constant(Dims dims, const Vec3& value, Vec3 spacing = {1.0, 1.0, 1.0});

  const Dims& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  std::size_t voxel_count() const { return dims_.count(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> channel(int c) { return std::span<double>(data_).subspan(c * voxel_count(), voxel_count()); }
  std::span<const double> channel(int c) const {
    return std::span<const double>(data_).subspan(c * voxel_count(), voxel_count());
  }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_.nx) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_.ny) * static_cast<std::size_t>(k));
  }
  double& at(int c, std::size_t n) { return data_[c * voxel_count() + n]; }
  double at(int c, std::size_t n) const { return data_[c * voxel_count() + n]; }
  Vec3 vec(std::size_t n) const { return {at(0, n), at(1, n), at(2, n)}; }

  /// Extracts one component as a scalar volume.
  ScalarVolume component(int c) const;

  VectorField& operator+=(const VectorField& other);
  VectorField& operator*=(double s);
  VectorField operator-() const;

  bool all_finite() const;

 private:
  Dims dims_{};
  Vec3 spacing_{1.0, 1.0, 1.0};
  std::vector<double> data_;
};

void require_valid_dims(const Dims& dims, int min_extent = 2);
void require_same_dims(const Dims& a, const Dims& b, const char* what);

// ---------------------------------------------------------------------------
// Trilinear sampling
// ---------------------------------------------------------------------------

/// Eight corner indices and weights of one trilinear lookup. Out-of-range
/// coordinates are clamped to the grid (replicate padding) before weighting.
struct TrilinearStencil {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};

  double apply(std::span<const double> values) const {
    double acc = 0.0;
    for (int n = 0; n < 8; ++n) acc += weight[n] * values[index[n]];
    return acc;
  }
  void scatter(std::span<double> target, double value) const {
    for (int n = 0; n < 8; ++n) target[index[n]] += weight[n] * value;
  }
};

/// Throws NumericalError for non-finite coordinates.
TrilinearStencil make_stencil(const Dims& dims, const GridPoint& p);

/// Stencil plus per-corner weights of d/dx, d/dy, d/dz. When the point lies
/// exactly on an interior grid plane of an unclamped axis, `on_grid_plane` is
/// set and callers should use sample_derivative instead of the weights.
struct TrilinearStencilGrad {
  TrilinearStencil stencil;
  std::array<std::array<double, 8>, 3> dweight{};
  bool on_grid_plane = false;

  Vec3 derivative(std::span<const double> values) const {
    Vec3 g{0.0, 0.0, 0.0};
    for (int n = 0; n < 8; ++n) {
      const double v = values[stencil.index[n]];
      g[0] += dweight[0][n] * v;
      g[1] += dweight[1][n] * v;
      g[2] += dweight[2][n] * v;
    }
    return g;
  }
};

TrilinearStencilGrad make_stencil_with_derivative(const Dims& dims, const GridPoint& p);

/// Spatial derivative of the trilinear interpolant at p, per axis, in voxel
/// units. Clamped axes have zero derivative. Exactly on an interior grid
/// plane the interpolant has a kink; there the average of the two one-sided
/// slopes is returned.
Vec3 sample_derivative(std::span<const double> values, const Dims& dims, const GridPoint& p);

std::vector<double> trilinear_sample(const ScalarVolume& vol, std::span<const GridPoint> points);
/// Returns 3 values per point, point-major.
std::vector<Vec3> trilinear_sample(const VectorField& field, std::span<const GridPoint> points);

ScalarVolume trilinear_sample_adjoint(const Dims& dims, std::span<const GridPoint> points,
                                      std::span<const double> upstream, Vec3 spacing = {1.0, 1.0, 1.0});
VectorField trilinear_sample_adjoint(const Dims& dims, std::span<const GridPoint> points,
                                     std::span<const Vec3> upstream, Vec3 spacing = {1.0, 1.0, 1.0});

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central differences in the interior, one-sided at the boundary (voxel units).
VectorField central_gradient(const ScalarVolume& vol);

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Trilinear resampling onto a grid with the same physical extent. Grid
/// cells are cell-centred: new index i maps to old coordinate
/// (i + 0.5) * n_old / n_new - 0.5.
ScalarVolume resample_to(const ScalarVolume& vol, const Dims& new_dims);
ScalarVolume resample(const ScalarVolume& vol, double factor);
/// As resample_to, and rescales each component by n_new / n_old along its
/// axis so the vectors stay correct in the new voxel units.
VectorField upsample_field(const VectorField& field, const Dims& new_dims);
/// Adjoint of upsample_field with respect to the coarse field values.
VectorField upsample_field_adjoint(const VectorField& fine_grad, const Dims& coarse_dims, Vec3 coarse_spacing);

// ---------------------------------------------------------------------------
// Intensity preprocessing
// ---------------------------------------------------------------------------

inline constexpr double kHounsfieldClip = 1024.0;

/// Clamps to [-1024, 1024] HU and maps linearly onto [-1, 1].
ScalarVolume clip_rescale(const ScalarVolume& vol);

}  // namespace svfreg
