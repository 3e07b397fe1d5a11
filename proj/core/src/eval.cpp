#include "svfreg/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace svfreg {

BinaryMask::BinaryMask(ScalarVolume volume) : volume_(std::move(volume)) {
  for (double v : volume_.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask values must be 0 or 1");
  }
}

BinaryMask BinaryMask::threshold(const ScalarVolume& volume, double level) {
  ScalarVolume out(volume.dims(), volume.spacing());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = volume[n] >= level ? 1.0 : 0.0;
  return BinaryMask(std::move(out));
}

std::size_t BinaryMask::count() const {
  std::size_t c = 0;
  for (double v : volume_.data()) c += v != 0.0 ? 1 : 0;
  return c;
}

BinaryMask warp_mask(const BinaryMask& mask, const DisplacementField& u) {
  require_same_dims(mask.dims(), u.dims(), "warp_mask");
  return BinaryMask::threshold(warp(mask.volume(), u), 0.5);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.dims(), b.dims(), "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t n = 0; n < a.volume().size(); ++n) {
    const bool x = a[n], y = b[n];
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) throw std::invalid_argument("dice: both masks empty");
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

BinaryMask surface(const BinaryMask& mask) {
  const Dims& d = mask.dims();
  const ScalarVolume& m = mask.volume();
  ScalarVolume out(d, mask.spacing());
  for (int k = 0; k < d.nz; ++k) {
    for (int j = 0; j < d.ny; ++j) {
      for (int i = 0; i < d.nx; ++i) {
        if (m(i, j, k) == 0.0) continue;
        const bool border = i == 0 || j == 0 || k == 0 || i == d.nx - 1 || j == d.ny - 1 || k == d.nz - 1;
        const bool exposed = border || m(i - 1, j, k) == 0.0 || m(i + 1, j, k) == 0.0 || m(i, j - 1, k) == 0.0 ||
                             m(i, j + 1, k) == 0.0 || m(i, j, k - 1) == 0.0 || m(i, j, k + 1) == 0.0;
        if (exposed) out(i, j, k) = 1.0;
      }
    }
  }
  return BinaryMask(std::move(out));
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform of sampled function f with sample spacing h
// (lower envelope of parabolas). Entries equal to +inf carry no source.
void distance_1d(std::vector<double>& f, double h, std::vector<int>& v, std::vector<double>& z,
                 std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  const double h2 = h * h;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    const double fq = f[static_cast<std::size_t>(q)] + h2 * q * q;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      const double s = (fq - (f[static_cast<std::size_t>(p)] + h2 * p * p)) / (2.0 * h2 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
    }
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  int idx = 0;
  for (int q = 0; q < n; ++q) {
    while (idx < k && z[static_cast<std::size_t>(idx + 1)] < q) ++idx;
    const int p = v[static_cast<std::size_t>(idx)];
    const double dq = h * (q - p);
    out[static_cast<std::size_t>(q)] = dq * dq + f[static_cast<std::size_t>(p)];
  }
}

}  // namespace

ScalarVolume squared_edt_to(const BinaryMask& sources) {
  if (sources.empty()) throw std::invalid_argument("distance transform: empty mask");
  const Dims& d = sources.dims();
  ScalarVolume dist(d, sources.spacing());
  for (std::size_t n = 0; n < dist.size(); ++n) dist[n] = sources[n] ? 0.0 : kInf;

  const std::array<std::size_t, 3> stride = {1, static_cast<std::size_t>(d.nx),
                                             static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = d[axis];
    const int b = (axis + 1) % 3, c = (axis + 2) % 3;
    std::vector<double> f(static_cast<std::size_t>(len)), out(static_cast<std::size_t>(len));
    std::vector<double> z(static_cast<std::size_t>(len) + 1);
    std::vector<int> v(static_cast<std::size_t>(len));
    for (int ic = 0; ic < d[c]; ++ic) {
      for (int ib = 0; ib < d[b]; ++ib) {
        const std::size_t base = static_cast<std::size_t>(ib) * stride[b] + static_cast<std::size_t>(ic) * stride[c];
        for (int q = 0; q < len; ++q) f[static_cast<std::size_t>(q)] = dist[base + q * stride[axis]];
        distance_1d(f, sources.spacing()[axis], v, z, out);
        for (int q = 0; q < len; ++q) dist[base + q * stride[axis]] = out[static_cast<std::size_t>(q)];
      }
    }
  }
  return dist;
}

ScalarVolume edt(const BinaryMask& mask) {
  if (mask.empty()) throw std::invalid_argument("edt: empty mask");
  ScalarVolume d = squared_edt_to(surface(mask));
  for (double& x : d.data()) x = std::sqrt(x);
  return d;
}

double assd(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.dims(), b.dims(), "assd");
  if (a.empty() || b.empty()) throw std::invalid_argument("assd: empty mask");
  const BinaryMask sa = surface(a);
  const BinaryMask sb = surface(b);
  const ScalarVolume da = edt(a);
  const ScalarVolume db = edt(b);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < da.size(); ++n) {
    if (sa[n]) {
      sum += db[n];
      ++count;
    }
  }
  for (std::size_t n = 0; n < da.size(); ++n) {
    if (sb[n]) {
      sum += da[n];
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

double inverse_consistency_error(const DisplacementField& forward, const DisplacementField& inverse,
                                 const BinaryMask& region) {
  require_same_dims(forward.dims(), inverse.dims(), "inverse_consistency_error");
  require_same_dims(forward.dims(), region.dims(), "inverse_consistency_error");
  if (region.empty()) throw std::invalid_argument("empty region");
  const VectorField fi = compose(forward.field, inverse.field);
  const VectorField iff = compose(inverse.field, forward.field);
  auto norm = [](const Vec3& r) { return std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]); };
  double s1 = 0.0, s2 = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < region.volume().size(); ++n) {
    if (!region[n]) continue;
    s1 += norm(fi.vec(n));
    s2 += norm(iff.vec(n));
    ++count;
  }
  return 0.5 * (s1 + s2) / static_cast<double>(count);
}

MetricsReport evaluate(const BinaryMask& reference, const BinaryMask& warped_source, const DisplacementField& u,
                       std::string case_id) {
  MetricsReport r;
  r.case_id = std::move(case_id);
  r.direction = u.direction;
  r.dsc = dice(reference, warped_source);
  r.assd_mm = assd(reference, warped_source);
  r.folding_pct = folding_fraction(jacobian_determinant(u), reference.volume());
  return r;
}

}  // namespace svfreg
