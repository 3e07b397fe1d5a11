#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "svfreg/engine.hpp"
#include "svfreg/phantom.hpp"

using namespace svfreg;

namespace {

PredictorParams scalar_params(double value) {
  PredictorParams p;
  p.blocks.push_back({"theta", {1}, {value}});
  return p;
}

PredictorParams random_head(std::uint64_t seed, double scale) {
  PredictorParams p = init_params(Architecture{}, seed);
  std::mt19937_64 rng(seed + 11);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& b : p.blocks)
    if (b.name.rfind("head", 0) == 0)
      for (double& x : b.values) x = nd(rng);
  return p;
}

bool same_params(const PredictorParams& a, const PredictorParams& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t n = 0; n < a.blocks.size(); ++n)
    if (a.blocks[n].values != b.blocks[n].values) return false;
  return true;
}

AdaptConfig small_config(int steps) {
  AdaptConfig c;
  c.adapt_steps = steps;
  c.mc_samples = 4;
  c.learning_rate = 1e-3;
  c.seed = 17;
  return c;
}

}  // namespace

TEST_CASE("Adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    PredictorParams p = scalar_params(1.5);
    OptState s = OptState::zeros_like(p);
    adam_step(p, {{0.0}}, s, 0.1);
    CHECK(p.blocks[0].values[0] == 1.5);
    CHECK(s.step == 1);
  }
  SUBCASE("first step moves by the learning rate") {
    PredictorParams p = scalar_params(0.0);
    OptState s = OptState::zeros_like(p);
    adam_step(p, {{3.7}}, s, 0.01);
    CHECK(p.blocks[0].values[0] == doctest::Approx(-0.01).epsilon(1e-8));
  }
  SUBCASE("two steps match the closed form") {
    PredictorParams p = scalar_params(1.0);
    OptState s = OptState::zeros_like(p);
    adam_step(p, {{2.0}}, s, 0.1);
    adam_step(p, {{-1.0}}, s, 0.1);
    const double m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0;
    const double v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
    const double m_hat = m / (1.0 - 0.81), v_hat = v / (1.0 - 0.999 * 0.999);
    const double first = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    CHECK(p.blocks[0].values[0] == doctest::Approx(first - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("minimises a quadratic") {
    PredictorParams p = scalar_params(1.0);
    OptState s = OptState::zeros_like(p);
    for (int t = 0; t < 100; ++t) adam_step(p, {{2.0 * p.blocks[0].values[0]}}, s, 0.1);
    CHECK(std::abs(p.blocks[0].values[0]) < 0.05);
  }
  SUBCASE("shape mismatch") {
    PredictorParams p = scalar_params(1.0);
    OptState s = OptState::zeros_like(p);
    CHECK_THROWS_AS(adam_step(p, {{1.0, 2.0}}, s, 0.1), std::invalid_argument);
  }
}

TEST_CASE("configuration validation") {
  AdaptConfig c;
  CHECK_NOTHROW(c.validate());
  c.mc_samples = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AdaptConfig{};
  c.eps = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AdaptConfig{};
  c.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AdaptConfig{};
  c.adapt_steps = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("pretraining") {
  std::mt19937_64 rng(50);
  const Dims d{16, 16, 16};
  const PredictorParams init = init_params(Architecture{}, 3);
  AdaptConfig cfg;
  cfg.learning_rate = 1e-3;

  SUBCASE("initial loss is the mean image mismatch") {
    std::vector<ImagePair> pairs;
    double expect = 0.0;
    for (int n = 0; n < 3; ++n) {
      ImagePair p{oracle::smooth_volume(d, rng), oracle::smooth_volume(d, rng)};
      expect += mse_loss(p.fixed, p.moving).value / 3.0;
      pairs.push_back(std::move(p));
    }
    const PretrainResult r = pretrain(init, pairs, cfg, 0, 1);
    CHECK(r.initial_loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(r.epoch_losses.empty());
    CHECK(same_params(r.params, init));
  }
  SUBCASE("identical images stay registered") {
    const ScalarVolume img = oracle::smooth_volume(d, rng);
    const std::vector<ImagePair> pairs{{img, img}};
    const PretrainResult r = pretrain(init, pairs, cfg, 3, 1);
    for (double l : r.epoch_losses) CHECK(l <= 1e-8);
  }
  SUBCASE("loss decreases on phantoms and the run is reproducible") {
    PhantomDeformation def;
    def.radial_scale = 0.85;
    def.random_amplitude = 0.5;
    std::vector<ImagePair> pairs;
    for (std::uint64_t s = 0; s < 3; ++s) {
      PhantomCase c = make_phantom_pair(Dims{24, 24, 24}, def, 100 + s);
      pairs.push_back({c.fixed, c.moving});
    }
    const PretrainResult r = pretrain(init, pairs, cfg, 8, 2);
    REQUIRE(r.epoch_losses.size() == 8);
    CHECK(r.epoch_losses.back() < r.initial_loss);
    const PretrainResult again = pretrain(init, pairs, cfg, 8, 2);
    CHECK(same_params(r.params, again.params));
    CHECK(r.epoch_losses == again.epoch_losses);
  }
  CHECK_THROWS_AS(pretrain(init, std::vector<ImagePair>{}, cfg, 1, 1), std::invalid_argument);
}

TEST_CASE("test-time adaptation") {
  std::mt19937_64 rng(51);
  const Dims d{16, 16, 16};
  const ScalarVolume f = oracle::smooth_volume(d, rng), m = oracle::smooth_volume(d, rng);
  const PredictorParams p = random_head(4, 0.1);

  SUBCASE("zero steps return the input parameters") {
    const int snaps[] = {0};
    const AdaptResult r = adapt(p, f, m, small_config(0), snaps);
    CHECK(same_params(r.params, p));
    CHECK(r.report.trajectory.empty());
    CHECK(r.snapshots.count(0) == 1);
    CHECK(r.report.final_loss.total == total_loss(f, m, p, nullptr, nullptr, LossOptions{}, false).breakdown.total);
  }
  SUBCASE("trajectory, snapshots and determinism") {
    const PredictorParams before = p;
    const int snaps[] = {0, 2, 5};
    const AdaptResult a = adapt(p, f, m, small_config(5), snaps);
    const AdaptResult b = adapt(p, f, m, small_config(5), snaps);
    CHECK(same_params(p, before));
    CHECK(a.report.trajectory.size() == 5);
    CHECK(a.report.step_seconds.size() == 5);
    CHECK(a.snapshots.size() == 3);
    CHECK(same_params(a.snapshots.at(5), a.params));
    CHECK(same_params(a.snapshots.at(0), p));
    CHECK(same_params(a.params, b.params));
    CHECK(a.report.final_loss.total == b.report.final_loss.total);
    CHECK(a.report.trajectory.front().weighted);
    CHECK(a.report.uncertainty.weights.dims() == d);
  }
  SUBCASE("zero dropout rate reduces to unweighted adaptation") {
    AdaptConfig c = small_config(3);
    c.dropout_rate = 0.0;
    const AdaptResult r = adapt(p, f, m, c);
    for (double w : r.report.uncertainty.weights.data()) CHECK(std::abs(w - 1.0) <= 1e-10);
    PredictorParams q = p;
    q.dropout_rate = 0.0;
    OptState s = OptState::zeros_like(q);
    for (int t = 0; t < 3; ++t) {
      const TotalLoss l = total_loss(f, m, q, nullptr, nullptr, c.loss_options());
      CHECK(std::abs(l.breakdown.total - r.report.trajectory[t].total) <= 1e-10 * l.breakdown.total);
      adam_step(q, l.grads, s, c.learning_rate);
    }
  }
  SUBCASE("uncertainty refresh count") {
    AdaptConfig c = small_config(6);
    c.refresh_uncertainty = 2;
    CHECK(adapt(p, f, m, c).report.uncertainty_refreshes == 2);
    c.refresh_uncertainty = 0;
    CHECK(adapt(p, f, m, c).report.uncertainty_refreshes == 0);
  }
}

TEST_CASE("registration with an untrained predictor is the identity") {
  std::mt19937_64 rng(52);
  const Dims d{16, 16, 16};
  const ScalarVolume f = oracle::smooth_volume(d, rng), m = oracle::smooth_volume(d, rng);
  const PredictorParams p = init_params(Architecture{}, 1);
  const Registration fwd = register_pair(p, f, m, Direction::Forward);
  const Registration inv = register_pair(p, f, m, Direction::Inverse);
  CHECK(inv.displacement.direction == Direction::Inverse);
  for (std::size_t n = 0; n < d.count(); ++n) {
    CHECK(fwd.warped[n] == m[n]);
    CHECK(inv.warped[n] == f[n]);
  }
}
