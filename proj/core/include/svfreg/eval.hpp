#pragma once

// Overlap and surface metrics for binary masks, folding and inverse
// consistency of displacement fields. Distances are reported in mm using the
// mask spacing; displacements stay in voxels.

#include <optional>
#include <string>

#include "svfreg/diffeo.hpp"
#include "svfreg/grid.hpp"

namespace svfreg {

/// Volume whose values are all exactly 0 or 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(ScalarVolume volume);

  /// 1 where value >= level.
  static BinaryMask threshold(const ScalarVolume& volume, double level = 0.5);

  const ScalarVolume& volume() const { return volume_; }
  const Dims& dims() const { return volume_.dims(); }
  const Vec3& spacing() const { return volume_.spacing(); }
  bool operator[](std::size_t n) const { return volume_[n] != 0.0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

 private:
  ScalarVolume volume_;
};

/// Trilinear warp of the {0,1} volume, then values >= 0.5 become 1.
BinaryMask warp_mask(const BinaryMask& mask, const DisplacementField& u);

double dice(const BinaryMask& a, const BinaryMask& b);

/// Mask voxels with at least one 6-neighbour outside the mask (grid border counts as outside).
BinaryMask surface(const BinaryMask& mask);

/// Exact Euclidean distance (mm) from every voxel to the nearest surface voxel of `mask`.
ScalarVolume edt(const BinaryMask& mask);

/// Squared EDT (mm^2) to the non-zero voxels of `sources`, separable lower-envelope algorithm.
ScalarVolume squared_edt_to(const BinaryMask& sources);

/// Average symmetric surface distance in mm.
double assd(const BinaryMask& a, const BinaryMask& b);

/// Mean over `region` of |compose(fwd, inv)| and |compose(inv, fwd)|, averaged, in voxels.
double inverse_consistency_error(const DisplacementField& forward, const DisplacementField& inverse,
                                 const BinaryMask& region);

struct MetricsReport {
  std::string case_id;
  Direction direction = Direction::Forward;
  double dsc = 0.0;
  double assd_mm = 0.0;
  double folding_pct = 0.0;
  std::optional<double> inv_consistency_vox;
};

/// Compares `reference` against `warped_source`, folding measured inside `reference`.
MetricsReport evaluate(const BinaryMask& reference, const BinaryMask& warped_source, const DisplacementField& u,
                       std::string case_id = {});

}  // namespace svfreg
