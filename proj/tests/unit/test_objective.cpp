#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "svfreg/error.hpp"
#include "svfreg/objective.hpp"

using namespace svfreg;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
  return s;
}

template <class T>
T shifted(const T& base, const T& dir, double t) {
  T out = base;
  for (std::size_t q = 0; q < out.data().size(); ++q) out.data()[q] += t * dir.data()[q];
  return out;
}

ScalarVolume positive_weights(const Dims& d, std::mt19937_64& rng) { return oracle::random_volume(d, rng, 0.1, 2.0); }

PredictorParams random_head(std::uint64_t seed, double scale) {
  PredictorParams p = init_params(Architecture{}, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& b : p.blocks)
    if (b.name.rfind("head", 0) == 0)
      for (double& x : b.values) x = nd(rng);
  return p;
}

VectorField polynomial_field(const Dims& d, int channel, const std::function<double(int, int, int)>& f) {
  VectorField u(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) u.at(channel, u.index(i, j, k)) = f(i, j, k);
  return u;
}

}  // namespace

TEST_CASE("weighted mean squared error") {
  const Dims d{4, 4, 4};
  const ScalarVolume a(d, {1, 1, 1}, 1.0), b(d, {1, 1, 1}, 0.5);
  CHECK(mse_loss(a, a).value == 0.0);
  CHECK(mse_loss(a, b).value == doctest::Approx(0.25));
  const ScalarVolume w(d, {1, 1, 1}, 2.0);
  CHECK(mse_loss(a, b, &w).value == doctest::Approx(0.5));

  std::mt19937_64 rng(30);
  const ScalarVolume f = oracle::random_volume(d, rng), g = oracle::random_volume(d, rng);
  const ScalarVolume wr = positive_weights(d, rng);
  double ref = 0.0;
  for (std::size_t n = 0; n < f.size(); ++n) ref += wr[n] * (f[n] - g[n]) * (f[n] - g[n]);
  const MseResult r = mse_loss(f, g, &wr);
  CHECK(oracle::relative_error(r.value, ref / 64.0) <= 1e-12);

  const ScalarVolume dir = oracle::random_volume(d, rng);
  const double fd = oracle::central_difference(
      [&](double t) { return mse_loss(f, shifted(g, dir, t), &wr).value; }, 0.0, 1e-6);
  CHECK(oracle::relative_error(dot(r.grad.data(), dir.data()), fd) < 1e-6);

  ScalarVolume neg = wr;
  neg[3] = -0.1;
  CHECK_THROWS_AS(mse_loss(f, g, &neg), std::invalid_argument);
  CHECK_THROWS_AS(mse_loss(f, ScalarVolume(Dims{4, 4, 5})), std::invalid_argument);
}

TEST_CASE("bending energy") {
  const Dims d{9, 9, 9};
  SUBCASE("affine fields have zero energy") {
    VectorField u(d);
    for (int c = 0; c < 3; ++c) {
      const VectorField part = polynomial_field(d, c, [c](int i, int j, int k) { return 0.3 * i - 0.2 * j + c * k + 1.0; });
      u += part;
    }
    CHECK(bending_energy(u).value == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("quadratic along x") {
    const VectorField u = polynomial_field(d, 0, [](int i, int, int) { return static_cast<double>(i * i); });
    CHECK(bending_energy(u).value == doctest::Approx(343.0 * 4.0 / 729.0));
  }
  SUBCASE("cross term xy") {
    const VectorField u = polynomial_field(d, 1, [](int i, int j, int) { return static_cast<double>(i * j); });
    CHECK(bending_energy(u).value == doctest::Approx(343.0 * 2.0 / 729.0));
  }
  SUBCASE("gradient, translation invariance and sign") {
    std::mt19937_64 rng(31);
    const VectorField u = oracle::random_field(d, rng, 1.0);
    const VectorField dir = oracle::random_field(d, rng, 1.0);
    const BendingResult r = bending_energy(u);
    CHECK(r.value > 0.0);
    const double fd =
        oracle::central_difference([&](double t) { return bending_energy(shifted(u, dir, t)).value; }, 0.0, 1e-6);
    CHECK(oracle::relative_error(dot(r.grad.data(), dir.data()), fd) < 1e-6);
    const VectorField moved = shifted(u, VectorField::constant(d, {1.0, -2.0, 0.5}), 1.0);
    CHECK(bending_energy(moved).value == doctest::Approx(r.value).epsilon(1e-12));
  }
  CHECK_THROWS_AS(bending_energy(VectorField(Dims{2, 5, 5})), std::invalid_argument);
}

TEST_CASE("total loss composition") {
  std::mt19937_64 rng(32);
  const Dims d{16, 16, 16};
  const ScalarVolume f = oracle::smooth_volume(d, rng), m = oracle::smooth_volume(d, rng);

  SUBCASE("zero parameters leave only the image term") {
    const PredictorParams p = init_params(Architecture{}, 1);
    for (Direction dir : {Direction::Forward, Direction::Inverse}) {
      LossOptions opt;
      opt.direction = dir;
      const TotalLoss t = total_loss(f, m, p, nullptr, nullptr, opt);
      CHECK(t.breakdown.bending == 0.0);
      CHECK(t.breakdown.total == doctest::Approx(mse_loss(f, m).value).epsilon(1e-14));
    }
  }

  const PredictorParams p = random_head(3, 0.3);
  const ScalarVolume w = positive_weights(d, rng);
  LossOptions opt;
  opt.lambda = 0.7;

  SUBCASE("recomposition and lambda") {
    const TotalLoss t = total_loss(f, m, p, nullptr, &w, opt);
    CHECK(t.breakdown.weighted);
    CHECK(t.breakdown.bending > 0.0);
    CHECK(std::abs(t.breakdown.total - (t.breakdown.mse + 0.7 * t.breakdown.bending)) <= 1e-12);
    CHECK(t.breakdown.mse == doctest::Approx(mse_loss(f, t.warped, &w).value).epsilon(1e-14));

    LossOptions no_reg = opt;
    no_reg.lambda = 0.0;
    CHECK(total_loss(f, m, p, nullptr, &w, no_reg).breakdown.total == t.breakdown.mse);

    const ScalarVolume ones(d, {1, 1, 1}, 1.0);
    CHECK(total_loss(f, m, p, nullptr, &ones, opt).breakdown.total ==
          doctest::Approx(total_loss(f, m, p, nullptr, nullptr, opt).breakdown.total).epsilon(1e-14));
  }

  SUBCASE("parameter gradients match finite differences") {
    const DropoutMask mask = sample_dropout_mask(p, 4);
    for (Regularize reg : {Regularize::Displacement, Regularize::Velocity}) {
      for (Direction dir : {Direction::Forward, Direction::Inverse}) {
        LossOptions o = opt;
        o.direction = dir;
        o.regularize = reg;
        const TotalLoss t = total_loss(f, m, p, &mask, &w, o);
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
          std::uniform_int_distribution<std::size_t> pick_block(0, p.blocks.size() - 1);
          const std::size_t blk = pick_block(rng);
          std::uniform_int_distribution<std::size_t> pick(0, p.blocks[blk].values.size() - 1);
          const std::size_t idx = pick(rng);
          const double fd = oracle::central_difference(
              [&](double h) {
                PredictorParams q = p;
                q.blocks[blk].values[idx] += h;
                return total_loss(f, m, q, &mask, &w, o, false).breakdown.total;
              },
              0.0, 1e-6);
          worst = std::max(worst, oracle::relative_error(t.grads[blk][idx], fd));
        }
        CHECK(worst < 1e-4);
      }
    }
  }

  SUBCASE("non-finite inputs are numerical failures") {
    ScalarVolume bad = f;
    bad[10] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(total_loss(bad, m, p, nullptr, nullptr, opt), NumericalError);
  }
}
