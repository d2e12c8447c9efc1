#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tdl/dtm.hpp"
#include "tdl/tensor.hpp"
#include "tdl/world.hpp"

using namespace tdl;

namespace {

dtm::DtmConfig tiny_config() {
  dtm::DtmConfig cfg;
  cfg.K = 20;
  cfg.cond_width = 32;
  cfg.hidden = 48;
  cfg.time_dim = 8;
  cfg.blocks = 2;
  return cfg;
}

world::Observation blank_obs() {
  world::Observation obs;
  obs.data.assign(static_cast<std::size_t>(world::Observation::kChannels) *
                      world::Observation::kSize * world::Observation::kSize,
                  0.0f);
  return obs;
}

data::Trajectory2D diagonal_target() {
  data::Trajectory2D t;
  for (int i = 0; i < data::kTrajectoryPoints; ++i) {
    const double u = 2.0 * i / (data::kTrajectoryPoints - 1) - 1.0;
    t.points[i] = {u, -0.5 * u};
  }
  return t;
}

}  // namespace

TEST_CASE("schedule matches an independent running-product oracle") {
  const auto s = dtm::make_schedule(100, 1e-4, 0.02);
  REQUIRE(s.K == 100);
  CHECK(s.beta.front() == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(s.beta.back() == doctest::Approx(0.02).epsilon(1e-15));
  long double prod = 1.0L;
  for (int k = 0; k < 100; ++k) {
    const long double beta =
        1e-4L + (0.02L - 1e-4L) * k / 99.0L;
    prod *= 1.0L - beta;
    CHECK(std::abs(s.alpha_bar[k] - static_cast<double>(prod)) < 1e-12);
    CHECK(s.alpha[k] == doctest::Approx(1.0 - s.beta[k]).epsilon(1e-15));
    if (k > 0)
      CHECK(s.sigma[k] ==
            doctest::Approx(std::sqrt(s.beta[k])).epsilon(1e-15));
    CHECK(s.alpha_bar[k] > 0.0);
    CHECK(s.alpha_bar[k] < 1.0);
    if (k > 0) CHECK(s.alpha_bar[k] < s.alpha_bar[k - 1]);
  }
  CHECK(s.sigma[0] == 0.0);
}

TEST_CASE("make_schedule rejects invalid parameters") {
  CHECK_THROWS_AS(dtm::make_schedule(0, 1e-4, 0.02), nc::NumericError);
  CHECK_THROWS_AS(dtm::make_schedule(10, 0.0, 0.02), nc::NumericError);
  CHECK_THROWS_AS(dtm::make_schedule(10, 0.03, 0.02), nc::NumericError);
  CHECK_THROWS_AS(dtm::make_schedule(10, 0.5, 1.0), nc::NumericError);
}

TEST_CASE("forward_noise reproduces the closed form exactly") {
  const auto s = dtm::make_schedule(50, 1e-4, 0.02);
  const std::vector<double> x0{0.3, -0.7, 1.0};
  const std::vector<double> eps{1.5, -0.2, 0.0};
  for (int k : {1, 17, 50}) {
    const auto xk = dtm::forward_noise(x0, k, eps, s);
    const double ab = s.alpha_bar[k - 1];
    for (int i = 0; i < 3; ++i)
      CHECK(xk[i] == doctest::Approx(std::sqrt(ab) * x0[i] +
                                     std::sqrt(1 - ab) * eps[i])
                         .epsilon(1e-15));
  }
  CHECK_THROWS_AS(dtm::forward_noise(x0, 0, eps, s), nc::NumericError);
  CHECK_THROWS_AS(dtm::forward_noise(x0, 51, eps, s), nc::NumericError);
  CHECK_THROWS_AS(dtm::forward_noise({1.0}, 1, eps, s), nc::NumericError);
}

TEST_CASE("forward_noise statistics match the schedule by Monte Carlo") {
  const auto s = dtm::make_schedule(100, 1e-4, 0.02);
  std::mt19937_64 rng(99);
  std::normal_distribution<double> gauss;
  const std::vector<double> x0{0.4};
  for (int k : {10, 60, 100}) {
    const double ab = s.alpha_bar[k - 1];
    double sum = 0, sum2 = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
      const auto xk = dtm::forward_noise(x0, k, {gauss(rng)}, s);
      sum += xk[0];
      sum2 += xk[0] * xk[0];
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean - std::sqrt(ab) * 0.4) < 0.02);
    CHECK(std::abs(var - (1.0 - ab)) / std::max(0.05, 1.0 - ab) < 0.02);
  }
}

TEST_CASE("obs_patch_matrix lays out 8x8 patches row-major") {
  auto obs = blank_obs();
  // mark channel 2, pixel (y=9, x=17): patch row 1, patch col 2
  obs.data[(2 * 64 + 9) * 64 + 17] = 0.75f;
  const auto m = dtm::obs_patch_matrix(obs);
  REQUIRE(m->shape == std::vector<std::size_t>{64, 256});
  const std::size_t row = 1 * 8 + 2;
  const std::size_t col = (2 * 8 + (9 - 8)) * 8 + (17 - 16);
  CHECK(m->data[row * 256 + col] == doctest::Approx(0.75));
  double total = 0;
  for (double v : m->data) total += v;
  CHECK(total == doctest::Approx(0.75));  // nothing else set
}

TEST_CASE("condition encoding depends on both language and observation") {
  dtm::DiffusionTrajectoryModel model(tiny_config(), 18, 1);
  const auto obs = blank_obs();
  auto obs2 = blank_obs();
  obs2.data[100] = 1.0f;
  const auto a = model.encode_condition({0, 3}, obs);
  const auto b = model.encode_condition({1, 3}, obs);
  const auto c = model.encode_condition({0, 3}, obs2);
  REQUIRE(a->shape == std::vector<std::size_t>{1, 32});
  CHECK(a->data != b->data);
  CHECK(a->data != c->data);
}

TEST_CASE("sampling is deterministic in the seed and lands in bounds") {
  dtm::DiffusionTrajectoryModel model(tiny_config(), 18, 2);
  const auto obs = blank_obs();
  const std::vector<std::size_t> tokens{1, 2, 3};
  const auto s1 = model.sample(tokens, obs, 42);
  const auto s2 = model.sample(tokens, obs, 42);
  const auto s3 = model.sample(tokens, obs, 43);
  CHECK(s1.points == s2.points);
  CHECK(s1.points != s3.points);
  for (const auto& p : s1.points) {
    CHECK(p[0] >= -1.0);
    CHECK(p[0] <= 1.0);
    CHECK(p[1] >= -1.0);
    CHECK(p[1] <= 1.0);
  }
}

TEST_CASE("loss is deterministic and denoise validates k") {
  dtm::DiffusionTrajectoryModel model(tiny_config(), 18, 3);
  dtm::TrainItem item;
  item.tokens = {0, 5};
  item.obs = blank_obs();
  item.target = diagonal_target();
  const auto l1 = model.loss({&item}, 7)->item();
  const auto l2 = model.loss({&item}, 7)->item();
  const auto l3 = model.loss({&item}, 8)->item();
  CHECK(l1 == l2);
  CHECK(l1 != l3);
  CHECK_THROWS_AS(model.loss({}, 1), nc::NumericError);
  auto xk = nc::zeros({1, 64});
  auto cond = model.encode_condition(item.tokens, item.obs);
  CHECK_THROWS_AS(model.denoise(xk, 0, cond), nc::NumericError);
  CHECK_THROWS_AS(model.denoise(xk, 21, cond), nc::NumericError);
}

TEST_CASE("a small model memorizes a single trajectory") {
  // The full 100-step schedule matters here: with far fewer steps the
  // terminal alpha_bar stays close to 1 and ancestral sampling from a
  // standard normal starts far outside the trained distribution.
  dtm::DtmConfig cfg;
  cfg.cond_width = 32;
  cfg.hidden = 128;
  cfg.time_dim = 8;
  cfg.blocks = 2;
  dtm::DiffusionTrajectoryModel model(cfg, 18, 4);
  dtm::TrainItem item;
  item.tokens = world::tokenize("grasp the red block");
  item.obs = blank_obs();
  item.target = diagonal_target();
  nc::Adam opt(model.params().all(), {3e-3});
  const std::vector<const dtm::TrainItem*> batch(8, &item);
  const int steps = 3000;
  for (int step = 0; step < steps; ++step) {
    if (step == steps / 2) opt.set_lr(1e-3);
    if (step == 3 * steps / 4) opt.set_lr(3e-4);
    auto l = model.loss(batch, 1000 + step);
    opt.zero_grad();
    nc::backward(l);
    opt.step();
  }
  // Per-step minibatch losses are noisy (the noise level k is resampled each
  // step), so measure the fit over many fresh draws instead of the last step.
  double eval_loss = 0;
  for (int i = 0; i < 20; ++i) eval_loss += model.loss(batch, 777 + i)->item();
  eval_loss /= 20;
  CHECK(eval_loss < 0.2);
  double dist = 0;
  for (int i = 0; i < 5; ++i) {
    const auto sample = model.sample(item.tokens, item.obs, 5 + i);
    dist += dtm::mean_point_distance(sample, item.target);
  }
  CHECK(dist / 5 < 0.15);
}

TEST_CASE("mean_point_distance is the average Euclidean gap") {
  data::Trajectory2D a, b;
  for (int i = 0; i < data::kTrajectoryPoints; ++i) {
    a.points[i] = {0.0, 0.0};
    b.points[i] = {0.3, 0.4};  // distance 0.5 everywhere
  }
  CHECK(dtm::mean_point_distance(a, b) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(dtm::mean_point_distance(a, a) == 0.0);
}

TEST_CASE("model checkpoints round-trip") {
  namespace fs = std::filesystem;
  const std::string path = "dtm_roundtrip.ckpt";
  dtm::DiffusionTrajectoryModel a(tiny_config(), 18, 11);
  dtm::DiffusionTrajectoryModel b(tiny_config(), 18, 12);
  const auto obs = blank_obs();
  const std::vector<std::size_t> tokens{2, 4};
  a.save(path);
  b.load(path);
  CHECK(a.sample(tokens, obs, 1).points == b.sample(tokens, obs, 1).points);
  // a model with a different architecture refuses the checkpoint
  auto other = tiny_config();
  other.hidden = 32;
  dtm::DiffusionTrajectoryModel c(other, 18, 13);
  CHECK_THROWS_AS(c.load(path), nc::NumericError);
  fs::remove(path);
}
