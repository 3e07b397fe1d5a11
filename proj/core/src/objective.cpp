#include "svfreg/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "svfreg/error.hpp"

namespace svfreg {

MseResult mse_loss(const ScalarVolume& fixed, const ScalarVolume& warped, const ScalarVolume* weights) {
  require_same_dims(fixed.dims(), warped.dims(), "mse_loss");
  if (weights != nullptr) require_same_dims(fixed.dims(), weights->dims(), "mse_loss weights");
  const std::size_t n_vox = fixed.size();
  const double inv = 1.0 / static_cast<double>(n_vox);
  MseResult r{0.0, ScalarVolume(fixed.dims(), fixed.spacing())};
  for (std::size_t n = 0; n < n_vox; ++n) {
    const double w = weights != nullptr ? (*weights)[n] : 1.0;
    if (w < 0.0) throw std::invalid_argument("mse_loss: weights must be >= 0");
    const double diff = fixed[n] - warped[n];
    r.value += w * diff * diff;
    r.grad[n] = -2.0 * inv * w * diff;
  }
  r.value *= inv;
  return r;
}

BendingResult bending_energy(const VectorField& u) {
  const Dims& d = u.dims();
  require_valid_dims(d, 3);
  const double inv = 1.0 / static_cast<double>(d.count());
  BendingResult r{0.0, VectorField(d, u.spacing())};
  const std::ptrdiff_t sx = 1;
  const std::ptrdiff_t sy = d.nx;
  const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(d.nx) * d.ny;

  for (int c = 0; c < 3; ++c) {
    const double* f = u.channel(c).data();
    double* g = r.grad.channel(c).data();
    for (int k = 1; k < d.nz - 1; ++k) {
      for (int j = 1; j < d.ny - 1; ++j) {
        for (int i = 1; i < d.nx - 1; ++i) {
          const std::ptrdiff_t n = i * sx + j * sy + k * sz;
          const double dxx = f[n + sx] - 2.0 * f[n] + f[n - sx];
          const double dyy = f[n + sy] - 2.0 * f[n] + f[n - sy];
          const double dzz = f[n + sz] - 2.0 * f[n] + f[n - sz];
          auto mixed = [&](std::ptrdiff_t a, std::ptrdiff_t b) {
            return 0.25 * (f[n + a + b] - f[n + a - b] - f[n - a + b] + f[n - a - b]);
          };
          const double dxy = mixed(sx, sy);
          const double dxz = mixed(sx, sz);
          const double dyz = mixed(sy, sz);
          r.value += dxx * dxx + dyy * dyy + dzz * dzz + 2.0 * (dxy * dxy + dxz * dxz + dyz * dyz);

          auto pure_adj = [&](std::ptrdiff_t a, double dd) {
            const double s = 2.0 * inv * dd;
            g[n + a] += s;
            g[n] -= 2.0 * s;
            g[n - a] += s;
          };
          pure_adj(sx, dxx);
          pure_adj(sy, dyy);
          pure_adj(sz, dzz);
          // d/df of 2*m^2 is 4*m*dm/df, dm/df = +-1/4.
          auto mixed_adj = [&](std::ptrdiff_t a, std::ptrdiff_t b, double m) {
            const double s = inv * m;
            g[n + a + b] += s;
            g[n + a - b] -= s;
            g[n - a + b] -= s;
            g[n - a - b] += s;
          };
          mixed_adj(sx, sy, dxy);
          mixed_adj(sx, sz, dxz);
          mixed_adj(sy, sz, dyz);
        }
      }
    }
  }
  r.value *= inv;
  return r;
}

TotalLoss total_loss(const ScalarVolume& fixed, const ScalarVolume& moving, const PredictorParams& params,
                     const DropoutMask* mask, const ScalarVolume* weights, const LossOptions& options,
                     bool compute_grads) {
  if (!(options.lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  require_same_dims(fixed.dims(), moving.dims(), "total_loss");

  PredictorOutput pred = forward(params, fixed, moving, mask);
  const bool inverse = options.direction == Direction::Inverse;
  VectorField velocity = inverse ? -pred.svf : std::move(pred.svf);

  Integration integ = integrate_svf(velocity, options.integration_steps);
  integ.displacement.direction = options.direction;
  const VectorField& u = integ.displacement.field;

  const ScalarVolume& target = inverse ? moving : fixed;
  const ScalarVolume& source = inverse ? fixed : moving;
  ScalarVolume warped = warp(source, u);

  MseResult mse = mse_loss(target, warped, weights);
  const bool reg_displacement = options.regularize == Regularize::Displacement;
  BendingResult bend = bending_energy(reg_displacement ? u : velocity);

  TotalLoss out;
  out.breakdown.mse = mse.value;
  out.breakdown.bending = bend.value;
  out.breakdown.lambda = options.lambda;
  out.breakdown.total = mse.value + options.lambda * bend.value;
  out.breakdown.weighted = weights != nullptr;
  if (!std::isfinite(out.breakdown.total)) throw NumericalError("non-finite loss");

  if (compute_grads) {
    VectorField grad_u = warp_backward(source, u, mse.grad);
    bend.grad *= options.lambda;
    if (reg_displacement) grad_u += bend.grad;
    VectorField grad_v = integrate_svf_backward(integ.tape, grad_u);
    if (!reg_displacement) grad_v += bend.grad;
    if (inverse) grad_v *= -1.0;
    out.grads = backward(params, pred.tape, grad_v);
  }
  out.displacement = std::move(integ.displacement);
  out.warped = std::move(warped);
  return out;
}

}  // namespace svfreg
