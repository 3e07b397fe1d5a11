#include "svfreg/diffeo.hpp"

#include <cmath>
#include <stdexcept>

#include "svfreg/error.hpp"

namespace svfreg {

namespace {

template <typename Fn>
void for_each_voxel(const Dims& d, Fn&& fn) {
  std::size_t n = 0;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i, ++n) fn(n, i, j, k);
}

GridPoint displaced(int i, int j, int k, const VectorField& u, std::size_t n) {
  return GridPoint{i + u.at(0, n), j + u.at(1, n), k + u.at(2, n)};
}

// Reverse pass of r = u o u (one squaring) for input u and upstream dL/dr.
VectorField squaring_backward(const VectorField& u, const VectorField& grad_r) {
  const Dims& d = u.dims();
  VectorField grad_u = grad_r;  // pass-through term of "+ u(x)"
  for_each_voxel(d, [&](std::size_t n, int i, int j, int k) {
    const Vec3 g = grad_r.vec(n);
    if (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) return;
    const GridPoint p = displaced(i, j, k, u, n);
    const TrilinearStencilGrad sg = make_stencil_with_derivative(d, p);
    // Sampled-field term: scatter to the corners of p.
    for (int c = 0; c < 3; ++c) sg.stencil.scatter(grad_u.channel(c), g[c]);
    // Sampling-location term: J_u(p)^T g.
    for (int c = 0; c < 3; ++c) {
      const Vec3 dc = sg.on_grid_plane ? sample_derivative(u.channel(c), d, p) : sg.derivative(u.channel(c));
      for (int a = 0; a < 3; ++a) grad_u.at(a, n) += dc[a] * g[c];
    }
  });
  return grad_u;
}

}  // namespace

VectorField compose(const VectorField& outer, const VectorField& inner) {
  require_same_dims(outer.dims(), inner.dims(), "compose");
  const Dims& d = outer.dims();
  VectorField out(d, outer.spacing());
  for_each_voxel(d, [&](std::size_t n, int i, int j, int k) {
    const TrilinearStencil s = make_stencil(d, displaced(i, j, k, inner, n));
    for (int c = 0; c < 3; ++c) out.at(c, n) = s.apply(outer.channel(c)) + inner.at(c, n);
  });
  return out;
}

DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner) {
  return {compose(outer.field, inner.field), outer.direction, outer.integration_steps};
}

Integration integrate_svf(const VectorField& velocity, int steps) {
  if (steps < 0) throw std::invalid_argument("integration steps must be >= 0");
  Integration result;
  VectorField u = velocity;
  u *= std::ldexp(1.0, -steps);
  result.tape.inputs.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    VectorField next = compose(u, u);
    result.tape.inputs.push_back(std::move(u));
    u = std::move(next);
  }
  if (!u.all_finite()) throw NumericalError("non-finite displacement after integration");
  result.displacement = DisplacementField{std::move(u), Direction::Forward, steps};
  return result;
}

VectorField integrate_svf_backward(const IntegrationTape& tape, const VectorField& grad_displacement) {
  VectorField g = grad_displacement;
  for (int k = tape.steps() - 1; k >= 0; --k) {
    const VectorField& u = tape.inputs[static_cast<std::size_t>(k)];
    require_same_dims(u.dims(), g.dims(), "integrate_svf_backward");
    g = squaring_backward(u, g);
  }
  g *= std::ldexp(1.0, -tape.steps());
  return g;
}

ScalarVolume warp(const ScalarVolume& img, const VectorField& u) {
  require_same_dims(img.dims(), u.dims(), "warp");
  const Dims& d = img.dims();
  ScalarVolume out(d, img.spacing());
  auto src = img.data();
  for_each_voxel(d, [&](std::size_t n, int i, int j, int k) {
    out[n] = make_stencil(d, displaced(i, j, k, u, n)).apply(src);
  });
  return out;
}

ScalarVolume warp(const ScalarVolume& img, const DisplacementField& u) { return warp(img, u.field); }

VectorField warp_backward(const ScalarVolume& img, const VectorField& u, const ScalarVolume& grad_warped) {
  require_same_dims(img.dims(), u.dims(), "warp_backward");
  require_same_dims(img.dims(), grad_warped.dims(), "warp_backward");
  const Dims& d = img.dims();
  VectorField grad(d, u.spacing());
  for_each_voxel(d, [&](std::size_t n, int i, int j, int k) {
    const double g = grad_warped[n];
    if (g == 0.0) return;
    const GridPoint p = displaced(i, j, k, u, n);
    const TrilinearStencilGrad sg = make_stencil_with_derivative(d, p);
    const Vec3 di = sg.on_grid_plane ? sample_derivative(img.data(), d, p) : sg.derivative(img.data());
    for (int a = 0; a < 3; ++a) grad.at(a, n) = g * di[a];
  });
  return grad;
}

DisplacementField invert_via_negation(const VectorField& velocity, int steps) {
  DisplacementField u = integrate_svf(-velocity, steps).displacement;
  u.direction = Direction::Inverse;
  return u;
}

ScalarVolume jacobian_determinant(const VectorField& u) {
  const Dims& d = u.dims();
  require_valid_dims(d, 3);
  const VectorField gx = central_gradient(u.component(0));
  const VectorField gy = central_gradient(u.component(1));
  const VectorField gz = central_gradient(u.component(2));
  ScalarVolume jac(d, u.spacing());
  for (std::size_t n = 0; n < d.count(); ++n) {
    const double a00 = 1.0 + gx.at(0, n), a01 = gx.at(1, n), a02 = gx.at(2, n);
    const double a10 = gy.at(0, n), a11 = 1.0 + gy.at(1, n), a12 = gy.at(2, n);
    const double a20 = gz.at(0, n), a21 = gz.at(1, n), a22 = 1.0 + gz.at(2, n);
    jac[n] = a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) + a02 * (a10 * a21 - a11 * a20);
  }
  return jac;
}

ScalarVolume jacobian_determinant(const DisplacementField& u) { return jacobian_determinant(u.field); }

double folding_fraction(const ScalarVolume& jacobian, const ScalarVolume& mask) {
  require_same_dims(jacobian.dims(), mask.dims(), "folding_fraction");
  std::size_t region = 0;
  std::size_t folded = 0;
  for (std::size_t n = 0; n < mask.size(); ++n) {
    const double m = mask[n];
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("folding_fraction: mask must be binary");
    if (m == 1.0) {
      ++region;
      if (jacobian[n] < 0.0) ++folded;
    }
  }
  if (region == 0) throw std::invalid_argument("empty region");
  return 100.0 * static_cast<double>(folded) / static_cast<double>(region);
}

}  // namespace svfreg
