#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "svfreg/predictor.hpp"

using namespace svfreg;

namespace {

// Direct-sum correlation with zero padding.
std::vector<double> conv_oracle(const std::vector<double>& in, int cin, const Dims& d, const std::vector<double>& w,
                                const std::vector<double>& b, int cout) {
  const std::size_t m = d.count();
  std::vector<double> out(cout * m);
  for (int o = 0; o < cout; ++o)
    for (int k = 0; k < d.nz; ++k)
      for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
          double acc = b[o];
          for (int c = 0; c < cin; ++c)
            for (int dz = -1; dz <= 1; ++dz)
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  const int x = i + dx, y = j + dy, z = k + dz;
                  if (x < 0 || y < 0 || z < 0 || x >= d.nx || y >= d.ny || z >= d.nz) continue;
                  acc += w[(o * cin + c) * 27 + (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)] *
                         in[c * m + x + d.nx * (y + d.ny * z)];
                }
          out[o * m + i + d.nx * (j + d.ny * k)] = acc;
        }
  return out;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
  return s;
}

PredictorParams perturbed_params(const Architecture& arch, std::uint64_t seed, double rate, double head_scale) {
  PredictorParams p = init_params(arch, seed, rate);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, head_scale);
  for (auto& b : p.blocks)
    if (b.name.rfind("head", 0) == 0)
      for (double& x : b.values) x = nd(rng);
  return p;
}

}  // namespace

TEST_CASE("initial parameters predict a zero velocity") {
  std::mt19937_64 rng(20);
  const Dims d{16, 16, 16};
  const PredictorParams p = init_params(Architecture{}, 7);
  const PredictorOutput out = forward(p, oracle::random_volume(d, rng), oracle::random_volume(d, rng));
  CHECK(out.svf.dims() == d);
  CHECK(out.coarse_svf.dims() == Dims{4, 4, 4});
  for (double x : out.svf.data()) CHECK(x == 0.0);
}

TEST_CASE("parameter layout and seeding") {
  const PredictorParams a = init_params(Architecture{}, 7);
  const PredictorParams b = init_params(Architecture{}, 7);
  const PredictorParams c = init_params(Architecture{}, 8);
  CHECK(a.parameter_count() == 16 * 2 * 27 + 16 + 16 * 16 * 27 + 16 + 3 * 16 * 27 + 3);
  CHECK(a.blocks.size() == 6);
  CHECK(a.blocks.back().name == "head.bias");
  bool differ = false;
  for (std::size_t n = 0; n < a.blocks.size(); ++n) {
    CHECK(a.blocks[n].values == b.blocks[n].values);
    differ = differ || a.blocks[n].values != c.blocks[n].values;
  }
  CHECK(differ);

  PredictorParams bad = a;
  bad.blocks[0].values.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = a;
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  Architecture no_hidden;
  no_hidden.hidden_widths = {0};
  CHECK_THROWS_AS(no_hidden.validate(), std::invalid_argument);
}

TEST_CASE("dropout masks") {
  Architecture wide;
  wide.hidden_widths = {5000, 5000};
  const DropoutMask none = sample_dropout_mask(wide, 0.0, 3);
  for (const auto& layer : none.keep)
    for (auto k : layer) CHECK(k == 1);

  const DropoutMask half = sample_dropout_mask(wide, 0.5, 3);
  double kept = 0.0;
  for (const auto& layer : half.keep)
    for (auto k : layer) kept += k;
  CHECK(kept / 10000.0 >= 0.48);
  CHECK(kept / 10000.0 <= 0.52);

  CHECK(sample_dropout_mask(wide, 0.5, 3).keep == half.keep);
  CHECK(sample_dropout_mask(wide, 0.5, 4).keep != half.keep);
  CHECK_THROWS_AS(sample_dropout_mask(wide, 1.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(sample_dropout_mask(wide, -0.1, 3), std::invalid_argument);
}

TEST_CASE("a mask at zero rate equals the deterministic pass") {
  std::mt19937_64 rng(21);
  const Dims d{16, 16, 16};
  const PredictorParams p = perturbed_params(Architecture{}, 5, 0.0, 0.3);
  const ScalarVolume f = oracle::random_volume(d, rng), m = oracle::random_volume(d, rng);
  const DropoutMask mask = sample_dropout_mask(p, 9);
  const PredictorOutput a = forward(p, f, m);
  const PredictorOutput b = forward(p, f, m, &mask);
  for (std::size_t n = 0; n < a.svf.data().size(); ++n) CHECK(a.svf.data()[n] == b.svf.data()[n]);
}

TEST_CASE("convolution matches a direct sum") {
  std::mt19937_64 rng(22);
  const Dims d{5, 5, 5};
  const int cin = 2, cout = 3;
  const auto in = random_vector(cin * d.count(), rng);
  const auto w = random_vector(cout * cin * 27, rng);
  const auto b = random_vector(cout, rng);
  std::vector<double> out(cout * d.count());
  detail::conv3d_forward(in, cin, d, w, b, cout, out);
  const auto ref = conv_oracle(in, cin, d, w, b, cout);
  for (std::size_t n = 0; n < out.size(); ++n) CHECK(oracle::relative_error(out[n], ref[n]) <= 1e-12);

  // Adjoint identities against the direct sum.
  const auto g = random_vector(out.size(), rng);
  std::vector<double> gi(in.size(), 0.0), gw(w.size(), 0.0), gb(b.size(), 0.0);
  detail::conv3d_backward(in, cin, d, w, cout, g, gi, gw, gb);
  const std::vector<double> zero_b(cout, 0.0);
  const auto dx = random_vector(in.size(), rng);
  const auto dw = random_vector(w.size(), rng);
  const auto db = random_vector(b.size(), rng);
  CHECK(oracle::relative_error(dot(gi, dx), dot(g, conv_oracle(dx, cin, d, w, zero_b, cout))) <= 1e-12);
  CHECK(oracle::relative_error(dot(gw, dw), dot(g, conv_oracle(in, cin, d, dw, zero_b, cout))) <= 1e-12);
  double ref_b = 0.0;
  for (int o = 0; o < cout; ++o)
    for (std::size_t n = 0; n < d.count(); ++n) ref_b += g[o * d.count() + n] * db[o];
  CHECK(oracle::relative_error(dot(gb, db), ref_b) <= 1e-12);
}

TEST_CASE("average pooling") {
  const Dims d{4, 4, 8};
  std::vector<double> in(2 * d.count());
  for (std::size_t n = 0; n < in.size(); ++n) in[n] = static_cast<double>(n);
  const auto out = detail::average_pool(in, 2, d, 2);
  REQUIRE(out.size() == 2 * 2 * 2 * 4);
  double expect = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) expect += in[dx + 4 * (dy + 4 * dz)];
  CHECK(out[0] == doctest::Approx(expect / 8.0));
  CHECK(out[16] == doctest::Approx(out[0] + 128.0));
  CHECK_THROWS_AS(detail::average_pool(in, 2, Dims{4, 4, 8}, 3), std::invalid_argument);

  std::mt19937_64 rng(23);
  const PredictorParams p = init_params(Architecture{}, 1);
  const Dims odd{18, 16, 16};
  CHECK_THROWS_AS(forward(p, oracle::random_volume(odd, rng), oracle::random_volume(odd, rng)),
                  std::invalid_argument);
}

TEST_CASE("backward: zero upstream and finite differences") {
  std::mt19937_64 rng(24);
  const Dims d{12, 12, 12};
  const ScalarVolume f = oracle::smooth_volume(d, rng), m = oracle::smooth_volume(d, rng);
  const PredictorParams p = perturbed_params(Architecture{}, 11, 0.2, 0.3);
  const DropoutMask mask = sample_dropout_mask(p, 5);

  const PredictorOutput out = forward(p, f, m, &mask);
  const ParamGrads none = backward(p, out.tape, VectorField(d));
  for (const auto& g : none)
    for (double x : g) CHECK(x == 0.0);

  const VectorField w = oracle::random_field(d, rng, 1.0);
  const ParamGrads grads = backward(p, out.tape, w);
  REQUIRE(grads.size() == p.blocks.size());
  auto loss = [&](std::size_t blk, std::size_t idx, double t) {
    PredictorParams q = p;
    q.blocks[blk].values[idx] += t;
    const VectorField v = forward(q, f, m, &mask).svf;
    return dot(v.data(), w.data());
  };
  std::uniform_int_distribution<std::size_t> pick_block(0, p.blocks.size() - 1);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t blk = pick_block(rng);
    std::uniform_int_distribution<std::size_t> pick(0, p.blocks[blk].values.size() - 1);
    const std::size_t idx = pick(rng);
    const double fd = oracle::central_difference([&](double h) { return loss(blk, idx, h); }, 0.0, 1e-6);
    worst = std::max(worst, oracle::relative_error(grads[blk][idx], fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("dropout keeps the expected activation unchanged") {
  std::mt19937_64 rng(25);
  Architecture arch;
  arch.hidden_widths = {8};
  const Dims d{8, 8, 8};
  const PredictorParams p = perturbed_params(arch, 3, 0.3, 0.5);
  const ScalarVolume f = oracle::smooth_volume(d, rng), m = oracle::smooth_volume(d, rng);
  const VectorField w = oracle::random_field(d, rng, 1.0);
  const double reference = dot(forward(p, f, m).svf.data(), w.data());
  const int samples = 10000;
  double sum = 0.0, sq = 0.0;
  for (int s = 0; s < samples; ++s) {
    const DropoutMask mask = sample_dropout_mask(p, static_cast<std::uint64_t>(s));
    const double x = dot(forward(p, f, m, &mask).svf.data(), w.data());
    sum += x;
    sq += x * x;
  }
  const double mean = sum / samples;
  const double sd = std::sqrt((sq / samples - mean * mean) / samples);
  CHECK(std::abs(mean - reference) <= 3.0 * sd);
}
