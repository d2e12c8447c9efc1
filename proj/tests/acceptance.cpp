#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdl/camera.hpp"
#include "tdl/data.hpp"
#include "tdl/dtm.hpp"
#include "tdl/dtp.hpp"
#include "tdl/eval.hpp"
#include "tdl/tensor.hpp"
#include "tdl/world.hpp"

// Acceptance suite. Every criterion prints exactly one "criterion N: PASS" /
// "criterion N: FAIL" line with the measured quantity and its pinned
// threshold. Expensive artifacts (the demonstration dataset, the trained
// trajectory model, trained policies, evaluation reports) are cached under
// acceptance_artifacts/ so criteria can run independently and reruns are
// incremental.

namespace fs = std::filesystem;
using namespace tdl;

namespace {

const std::string kArtifacts = "acceptance_artifacts";

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s — %s\n", criterion, pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
}

// ------------------------------------------------------------ shared helpers

world::Observation blank_obs() {
  world::Observation obs;
  obs.data.assign(static_cast<std::size_t>(world::Observation::kChannels) *
                      world::Observation::kSize * world::Observation::kSize,
                  0.0f);
  return obs;
}

// Demonstration corpus: 28 episodes per (task kind, layout), colors cycling
// per episode, expert retries on the rare unreachable reset.
const std::string& dataset_path() {
  static const std::string path = kArtifacts + "/dataset.bin";
  if (fs::exists(path) && fs::exists(path + ".json")) return path;
  fs::create_directories(kArtifacts);
  const auto camera = cam::default_camera();
  data::DatasetWriter writer(path, camera);
  constexpr int kPerCell = 28;
  constexpr int kMaxAttempts = 20;
  for (int kind = 0; kind < world::kNumTaskKinds; ++kind)
    for (int layout = 0; layout < world::kNumLayouts; ++layout)
      for (int ep = 0; ep < kPerCell; ++ep) {
        world::TaskSpec task;
        task.kind = static_cast<world::TaskKind>(kind);
        if (task.kind == world::TaskKind::grasp_block ||
            task.kind == world::TaskKind::place_block_in_zone)
          task.color = ep % world::kNumColors;
        const std::uint64_t base =
            mix(1, (kind * 97ull + layout) * 131071ull + ep);
        for (int a = 0; a < kMaxAttempts; ++a) {
          if (auto demo =
                  data::record_demo(task, mix(base, a), layout, camera)) {
            writer.add(*demo);
            break;
          }
        }
      }
  writer.finalize();
  return path;
}

data::Split unseen_split(const data::Dataset& dataset) {
  data::SplitSpec spec;
  spec.scheme = data::SplitScheme::unseen;
  return data::split(dataset.manifest(), spec, 1);
}

// Trajectory model trained on layouts 0-2 (the unseen-layout split).
std::unique_ptr<dtm::DiffusionTrajectoryModel> trained_dtm(
    const data::Dataset& dataset) {
  auto model = std::make_unique<dtm::DiffusionTrajectoryModel>(
      dtm::DtmConfig{}, dataset.manifest().vocab.size(), 1);
  const std::string ckpt = kArtifacts + "/dtm.ckpt";
  if (fs::exists(ckpt)) {
    model->load(ckpt);
    return model;
  }
  dtm::TrainConfig tc;  // defaults: 4000 steps, batch 16, lr 1e-3
  tc.seed = mix(1, 0xACCD7ull);
  dtm::train_dtm(*model, dataset, unseen_split(dataset).train, tc);
  model->save(ckpt + ".tmp");
  fs::rename(ckpt + ".tmp", ckpt);
  return model;
}

std::unique_ptr<dtp::Policy> trained_policy(
    const data::Dataset& dataset, const std::vector<std::size_t>& train_ids,
    bool use_trajectory, std::uint64_t seed, const std::string& name) {
  dtp::PolicyConfig pc;
  pc.use_trajectory = use_trajectory;
  auto policy = std::make_unique<dtp::Policy>(
      pc, dataset.manifest().vocab.size(), 100 + seed);
  const std::string ckpt = kArtifacts + "/" + name + ".ckpt";
  if (fs::exists(ckpt)) {
    policy->load(ckpt);
    return policy;
  }
  dtp::TrainPolicyConfig tc;  // defaults: 1500 steps, batch 4, lr 3e-4
  tc.seed = mix(seed, 0xACC90ull);
  dtp::train_policy(*policy, dataset, train_ids, tc);
  policy->save(ckpt + ".tmp");
  fs::rename(ckpt + ".tmp", ckpt);
  return policy;
}

// Chain-evaluation result cache: one avg_len per named run.
double cached_avg_len(const std::string& name,
                      const std::function<double()>& compute) {
  const std::string path = kArtifacts + "/eval_" + name + ".txt";
  if (fs::exists(path)) {
    std::ifstream is(path);
    double v;
    if (is >> v) return v;
  }
  const double v = compute();
  std::ofstream os(path);
  os.precision(17);
  os << v << "\n";
  return v;
}

double eval_policy_chains(const dtp::Policy& policy,
                          const dtm::DiffusionTrajectoryModel* dtm,
                          int n_chains, std::uint64_t agent_seed) {
  dtp::DtpAgent agent(policy, dtm, cam::default_camera(), agent_seed);
  return eval::run_chains(agent, n_chains, 3, 9000).avg_len;
}

// Directional ablation shared by criteria 5 and 8: per seed, train a policy
// with and without trajectory guidance on the same episodes and compare
// chain avg-len on layout 3.
struct AblationOutcome {
  std::vector<double> with_traj, without_traj;
  int positive = 0;
  double mean_with = 0, mean_without = 0;
};

AblationOutcome run_ablation(const std::string& tag,
                             const std::vector<std::size_t>& train_ids,
                             int n_chains) {
  auto dataset = data::Dataset::open(dataset_path());
  auto dtm_model = trained_dtm(dataset);
  AblationOutcome out;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::string base = tag + "_s" + std::to_string(seed);
    double w, wo;
    {
      auto policy =
          trained_policy(dataset, train_ids, true, seed, base + "_traj");
      w = cached_avg_len(base + "_traj", [&] {
        return eval_policy_chains(*policy, dtm_model.get(), n_chains,
                                  mix(seed, 0xE7A1ull));
      });
    }
    {
      auto policy =
          trained_policy(dataset, train_ids, false, seed, base + "_notraj");
      wo = cached_avg_len(base + "_notraj", [&] {
        return eval_policy_chains(*policy, nullptr, n_chains,
                                  mix(seed, 0xE7A2ull));
      });
    }
    out.with_traj.push_back(w);
    out.without_traj.push_back(wo);
    if (w > wo) ++out.positive;
    std::printf("  %s seed %llu: avg_len %.3f (with) vs %.3f (without)\n",
                tag.c_str(), static_cast<unsigned long long>(seed), w, wo);
    std::fflush(stdout);
  }
  const auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) /
           static_cast<double>(v.size());
  };
  out.mean_with = mean(out.with_traj);
  out.mean_without = mean(out.without_traj);
  return out;
}

// ------------------------------------------------- finite-difference helpers

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

// Checks d(loss)/d(input) for every coordinate of the given leaves against
// central differences; returns the worst relative error.
double max_grad_err(const std::function<nc::TensorPtr()>& make_loss,
                    const std::vector<nc::TensorPtr>& leaves, double step) {
  auto loss = make_loss();
  for (const auto& l : leaves) l->zero_grad();
  nc::backward(loss);
  double worst = 0;
  for (const auto& leaf : leaves) {
    const auto grads = leaf->grad;
    const std::vector<double> x0 = leaf->data;  // detach from the leaf
    const auto num = nc::finite_diff_grad(
        [&](const std::vector<double>& x) {
          leaf->data = x;
          return make_loss()->item();
        },
        x0, step);
    leaf->data = x0;
    for (std::size_t i = 0; i < grads.size(); ++i)
      worst = std::max(worst, rel_err(grads[i], num[i]));
  }
  return worst;
}

// Same check restricted to a sample of parameter coordinates of a model.
double sampled_param_grad_err(const std::function<nc::TensorPtr()>& make_loss,
                              const std::vector<nc::TensorPtr>& params,
                              int n_coords, std::mt19937_64& rng,
                              double step) {
  auto loss = make_loss();
  for (const auto& p : params) p->zero_grad();
  nc::backward(loss);
  double worst = 0;
  for (int c = 0; c < n_coords; ++c) {
    auto& p = params[rng() % params.size()];
    const std::size_t i = rng() % p->size();
    const double save = p->data[i], g = p->grad[i];
    p->data[i] = save + step;
    const double up = make_loss()->item();
    p->data[i] = save - step;
    const double dn = make_loss()->item();
    p->data[i] = save;
    worst = std::max(worst, rel_err(g, (up - dn) / (2 * step)));
  }
  return worst;
}

}  // namespace

// ===========================================================================

TEST_SUITE("criterion 1") {
TEST_CASE("gradients of all ops and both end-to-end losses") {
  double worst_op = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto leaf = [&](std::vector<std::size_t> shape, double sd = 1.0) {
      return nc::randn(std::move(shape), rng, sd, true);
    };
    auto tgt = [&](std::vector<std::size_t> shape) {
      return nc::randn(std::move(shape), rng, 1.0);
    };
    struct Case {
      std::function<nc::TensorPtr()> loss;
      std::vector<nc::TensorPtr> leaves;
    };
    std::vector<Case> cases;
    {
      auto a = leaf({3, 4}), b = leaf({4, 2}), t = tgt({3, 2});
      cases.push_back({[=] { return nc::mse(nc::matmul(a, b), t); }, {a, b}});
    }
    {
      auto a = leaf({2, 5}), t = tgt({5, 2});
      cases.push_back({[=] { return nc::mse(nc::transpose(a), t); }, {a}});
    }
    {
      auto a = leaf({3, 4}), b = leaf({3, 4}), t = tgt({3, 4});
      cases.push_back({[=] { return nc::mse(nc::add(a, b), t); }, {a, b}});
      cases.push_back({[=] { return nc::mse(nc::sub(a, b), t); }, {a, b}});
      cases.push_back({[=] { return nc::mse(nc::mul(a, b), t); }, {a, b}});
      cases.push_back(
          {[=] { return nc::mse(nc::scale(a, -1.7), t); }, {a}});
      cases.push_back({[=] { return nc::mse(nc::gelu(a), t); }, {a}});
      cases.push_back({[=] { return nc::mse(nc::softmax(a), t); }, {a}});
    }
    {
      auto a = leaf({3, 4}), bias = leaf({4});
      auto t = tgt({3, 4});
      cases.push_back({[=] { return nc::mse(nc::add(a, bias), t); },
                       {a, bias}});
    }
    {
      auto a = leaf({3, 6}), g = leaf({6}, 0.3), b = leaf({6}, 0.3);
      auto t = tgt({3, 6});
      // keep rows away from zero variance
      cases.push_back(
          {[=] { return nc::mse(nc::layer_norm(a, g, b), t); }, {a, g, b}});
    }
    {
      auto logits = leaf({2, 3});
      auto t = nc::make_tensor({2, 3}, {1, 0, 1, 0, 1, 0});
      cases.push_back(
          {[=] { return nc::bce_with_logits(logits, t); }, {logits}});
    }
    {
      auto a = leaf({2, 3}), b = leaf({2, 2}), t = tgt({2, 5});
      cases.push_back(
          {[=] { return nc::mse(nc::concat({a, b}, 1), t); }, {a, b}});
    }
    {
      auto a = leaf({4, 5}), t = tgt({2, 3});
      cases.push_back(
          {[=] {
             return nc::mse(nc::slice(nc::slice(a, 0, 1, 3), 1, 2, 5), t);
           },
           {a}});
    }
    {
      auto table = leaf({6, 3});
      auto t = tgt({4, 3});
      const std::vector<std::size_t> ids{1, 5, 1, 0};
      cases.push_back(
          {[=] { return nc::mse(nc::embedding(table, ids), t); }, {table}});
    }
    {
      auto a = leaf({5, 3}), t = tgt({1, 3});
      cases.push_back({[=] { return nc::mse(nc::mean_rows(a), t); }, {a}});
    }
    for (const auto& c : cases)
      worst_op = std::max(worst_op, max_grad_err(c.loss, c.leaves, 1e-6));
  }

  double worst_e2e = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(mix(seed, 0xE2Eull));
    // trajectory-model loss
    dtm::DtmConfig dc;
    dc.K = 20;
    dc.cond_width = 16;
    dc.hidden = 24;
    dc.time_dim = 8;
    dc.blocks = 2;
    dtm::DiffusionTrajectoryModel model(dc, 18, seed);
    dtm::TrainItem item;
    item.tokens = {1, 4};
    item.obs = blank_obs();
    item.obs.data[100] = 0.7f;
    for (int i = 0; i < data::kTrajectoryPoints; ++i)
      item.target.points[i] = {std::sin(0.2 * i), std::cos(0.2 * i)};
    worst_e2e = std::max(
        worst_e2e,
        sampled_param_grad_err([&] { return model.loss({&item}, seed); },
                               model.params().all(), 8, rng, 1e-5));
    // policy joint loss
    dtp::PolicyConfig pc;
    pc.h = 2;
    pc.width = 16;
    pc.blocks = 1;
    pc.heads = 2;
    pc.ffn = 32;
    pc.obs_tokens = 2;
    pc.traj_tokens = 2;
    dtp::Policy policy(pc, 18, seed);
    std::vector<dtp::StepInput> window(2);
    std::vector<dtp::StepTargets> targets(2);
    for (int s = 0; s < 2; ++s) {
      window[s].tokens = {2, 7};
      window[s].obs = blank_obs();
      window[s].obs.data[200 + s] = 0.5f;
      window[s].state = {0.4, 0.2, 0.1, 0.0};
      window[s].traj = item.target;
      window[s].step_index = s;
      targets[s].valid = true;
      targets[s].traj = item.target;
      targets[s].action_chunk = {{0.004, -0.002, 0.001, 1.0}};
      targets[s].video_feature = policy.video_feature(window[s].obs);
    }
    worst_e2e = std::max(
        worst_e2e,
        sampled_param_grad_err(
            [&] { return policy.loss(policy.forward_window(window), targets)
                      .total; },
            policy.params().all(), 8, rng, 1e-5));
  }

  const bool pass = worst_op < 1e-4 && worst_e2e < 1e-3;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "op grad rel err %.2e (tol 1e-4), end-to-end %.2e (tol 1e-3), "
                "20 seeds",
                worst_op, worst_e2e);
  report(1, pass, buf);
  CHECK(worst_op < 1e-4);
  CHECK(worst_e2e < 1e-3);
}
}

TEST_SUITE("criterion 2") {
TEST_CASE("diffusion analytics: schedule oracle, noise statistics, "
          "sampling determinism") {
  // schedule vs independent running product
  const auto s = dtm::make_schedule(100, 1e-4, 0.02);
  long double prod = 1.0L;
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * k / 99.0L;
    prod *= 1.0L - beta;
    worst = std::max(worst,
                     std::abs(s.alpha_bar[k] - static_cast<double>(prod)));
  }
  const bool sched_ok = worst < 1e-12 && s.sigma[0] == 0.0;

  // Monte-Carlo moments of the closed-form corruption
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss;
  double worst_var = 0;
  for (int k : {10, 60, 100}) {
    const double ab = s.alpha_bar[k - 1];
    double sum = 0, sum2 = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
      const auto xk = dtm::forward_noise({0.4}, k, {gauss(rng)}, s);
      sum += xk[0];
      sum2 += xk[0] * xk[0];
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    worst_var = std::max(worst_var, std::abs(var - (1.0 - ab)) /
                                        std::max(0.05, 1.0 - ab));
  }
  const bool mc_ok = worst_var < 0.02;

  // sampling determinism under a fixed seed
  dtm::DtmConfig dc;
  dc.cond_width = 32;
  dc.hidden = 48;
  dc.time_dim = 8;
  dc.blocks = 2;
  dtm::DiffusionTrajectoryModel model(dc, 18, 5);
  const auto obs = blank_obs();
  const auto a = model.sample({1, 2}, obs, 31);
  const auto b = model.sample({1, 2}, obs, 31);
  const auto c = model.sample({1, 2}, obs, 32);
  const bool det_ok = a.points == b.points && a.points != c.points;

  const bool pass = sched_ok && mc_ok && det_ok;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "alpha_bar err %.1e (tol 1e-12), MC var err %.3f%% (tol 2%%), "
                "determinism %s",
                worst, 100 * worst_var, det_ok ? "ok" : "BROKEN");
  report(2, pass, buf);
  CHECK(sched_ok);
  CHECK(mc_ok);
  CHECK(det_ok);
}
}

TEST_SUITE("criterion 3") {
TEST_CASE("singleton memorization within 2000 Adam steps") {
  dtm::DiffusionTrajectoryModel model(dtm::DtmConfig{}, 18, 4);
  dtm::TrainItem item;
  item.tokens = world::tokenize("grasp the red block");
  item.obs = blank_obs();
  for (int i = 0; i < data::kTrajectoryPoints; ++i) {
    const double u = 2.0 * i / (data::kTrajectoryPoints - 1) - 1.0;
    item.target.points[i] = {u, -0.5 * u};
  }
  nc::Adam opt(model.params().all(), {2e-3});
  const std::vector<const dtm::TrainItem*> batch(16, &item);
  for (int step = 0; step < 2000; ++step) {
    if (step == 1000) opt.set_lr(5e-4);
    if (step == 1600) opt.set_lr(2e-4);
    auto l = model.loss(batch, 1000 + step);
    opt.zero_grad();
    nc::backward(l);
    opt.step();
  }
  // the per-step minibatch loss is noisy in the resampled noise level, so the
  // reported loss is averaged over 20 fresh fixed-seed batches
  double loss = 0;
  for (int i = 0; i < 20; ++i) loss += model.loss(batch, 777 + i)->item();
  loss /= 20;
  double dist = 0;
  for (int i = 0; i < 5; ++i)
    dist += dtm::mean_point_distance(model.sample(item.tokens, item.obs, 5 + i),
                                     item.target);
  dist /= 5;
  const bool pass = loss < 0.05 && dist < 0.05;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "loss %.4f (tol 0.05) after 2000 steps, sample err %.4f "
                "(tol 0.05)",
                loss, dist);
  report(3, pass, buf);
  CHECK(loss < 0.05);
  CHECK(dist < 0.05);
}
}

TEST_SUITE("criterion 4") {
TEST_CASE("trajectory-model generalization to the held-out layout") {
  auto dataset = data::Dataset::open(dataset_path());
  const auto split = unseen_split(dataset);
  REQUIRE(split.train.size() >= 500);
  auto model = trained_dtm(dataset);
  std::vector<std::size_t> test_ids(
      split.test.begin(),
      split.test.begin() + std::min<std::size_t>(60, split.test.size()));
  REQUIRE(test_ids.size() >= 50);
  const double err = dtm::eval_dtm(*model, dataset, test_ids, 0xE0A1ull);
  const bool pass = err <= 0.08;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "held-out layout-3 mean per-point error %.4f (tol 0.08) on "
                "%zu episodes, %zu training demos",
                err, test_ids.size(), split.train.size());
  report(4, pass, buf);
  CHECK(err <= 0.08);
}
}

TEST_SUITE("criterion 5") {
TEST_CASE("trajectory guidance raises the average completed length") {
  auto dataset = data::Dataset::open(dataset_path());
  const auto train_ids = unseen_split(dataset).train;
  const auto out = run_ablation("c5", train_ids, 200);
  const bool pass = out.mean_with > out.mean_without && out.positive >= 4;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "mean avg_len %.3f (with) vs %.3f (without), gap positive for "
                "%d/5 seeds (need mean gap > 0 and >= 4/5), 200 chains",
                out.mean_with, out.mean_without, out.positive);
  report(5, pass, buf);
  CHECK(out.mean_with > out.mean_without);
  CHECK(out.positive >= 4);
}
}

TEST_SUITE("criterion 6") {
TEST_CASE("protocol oracles for summarize and chain evaluation") {
  // ten fixed count vectors with independently hand-computed summaries
  struct Fixture {
    std::vector<int> counts;
  };
  const std::vector<Fixture> fixtures = {
      {{0, 0, 0}},         {{5, 5, 5, 5}},     {{0, 1, 2, 3, 4, 5}},
      {{1, 1, 1, 1}},      {{2, 4}},           {{3}},
      {{5, 0, 5, 0}},      {{1, 2, 2, 5}},     {{4, 4, 4, 4, 4}},
      {{0, 5, 1, 4, 2, 3, 3, 2}}};
  bool ok = true;
  for (const auto& f : fixtures) {
    const auto rep = eval::summarize(f.counts);
    // independent oracle: direct counting
    const double n = static_cast<double>(f.counts.size());
    double expect_avg = 0;
    for (int c : f.counts) expect_avg += c;
    expect_avg /= n;
    double rate_sum = 0;
    for (int i = 0; i < 5; ++i) {
      double ge = 0;
      for (int c : f.counts) ge += c >= i + 1 ? 1 : 0;
      if (std::abs(rep.rates[i] - ge / n) > 1e-12) ok = false;
      rate_sum += rep.rates[i];
    }
    if (std::abs(rep.avg_len - expect_avg) > 1e-12) ok = false;
    if (std::abs(rep.avg_len - rate_sum) > 1e-12) ok = false;
  }

  // stop-on-failure and carry-over: an agent that expertly solves the first
  // `budget` tasks and then freezes must complete exactly `budget` tasks
  class Budgeted : public eval::Agent {
   public:
    explicit Budgeted(int budget) : budget_(budget) {}
    void start_task(const world::WorldState&,
                    const world::TaskSpec&) override {
      ++started_;
    }
    world::Action act(const world::WorldState& s,
                      const world::TaskSpec& t) override {
      if (started_ > budget_) return {};
      return world::expert_action(s, t);
    }

   private:
    int budget_, started_ = 0;
  };
  const auto chain = eval::make_chain(11, 2);
  for (int budget = 0; budget <= 5 && ok; ++budget) {
    Budgeted agent(budget);
    if (eval::eval_chain(agent, chain) != budget) ok = false;
  }
  // carry-over: task i is unsatisfied when reached but satisfied after
  eval::ExpertAgent expert;
  auto state = eval::chain_initial_state(chain);
  for (const auto& task : chain.tasks) {
    if (world::success(state, task)) ok = false;
    const auto r = eval::rollout_task(expert, state, task);
    if (!r.success || !world::success(r.final_state, task)) ok = false;
    state = r.final_state;
  }

  report(6, ok, ok ? "summarize matches hand-computed rates on 10 fixtures; "
                     "stop-on-failure and carry-over verified"
                   : "protocol mismatch");
  CHECK(ok);
}
}

TEST_SUITE("criterion 7") {
TEST_CASE("expert reliability and environment determinism") {
  eval::ExpertAgent expert;
  // per-task success over 500 fresh episodes spread over tasks and layouts
  int successes = 0, total = 0;
  for (int i = 0; total < 500; ++i) {
    const int kind = i % world::kNumTaskKinds;
    world::TaskSpec task;
    task.kind = static_cast<world::TaskKind>(kind);
    if (task.kind == world::TaskKind::grasp_block ||
        task.kind == world::TaskKind::place_block_in_zone)
      task.color = i % world::kNumColors;
    const int layout = (i / world::kNumTaskKinds) % world::kNumLayouts;
    const auto start = world::reset(3000 + i, task, layout);
    ++total;
    if (eval::rollout_task(expert, start, task).success) ++successes;
  }
  const double rate = static_cast<double>(successes) / total;

  // expert-as-policy chains
  const auto rep = eval::run_chains(expert, 50, 3, 500);

  // full-episode bit determinism
  bool det = true;
  {
    const world::TaskSpec task{world::TaskKind::place_block_in_zone, 1};
    auto s1 = world::reset(77, task, 2);
    auto s2 = world::reset(77, task, 2);
    const auto camera = cam::default_camera();
    for (int t = 0; t < 150 && det; ++t) {
      const auto a1 = world::expert_action(s1, task);
      const auto a2 = world::expert_action(s2, task);
      s1 = world::step(s1, a1);
      s2 = world::step(s2, a2);
      if (!(s1 == s2)) det = false;
      if (world::render_features(s1, camera).data !=
          world::render_features(s2, camera).data)
        det = false;
    }
  }

  const bool pass = rate >= 0.95 && rep.avg_len >= 4.5 && det;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "expert success %.1f%% of 500 (need 95%%), chain avg len %.2f "
                "of 50 chains (need 4.5), determinism %s",
                100 * rate, rep.avg_len, det ? "ok" : "BROKEN");
  report(7, pass, buf);
  CHECK(rate >= 0.95);
  CHECK(rep.avg_len >= 4.5);
  CHECK(det);
}
}

TEST_SUITE("criterion 8") {
TEST_CASE("the directional gap survives on 10% of the training data") {
  auto dataset = data::Dataset::open(dataset_path());
  const auto full = unseen_split(dataset).train;
  // deterministic 10% subsample of the criterion-5 training episodes
  std::vector<std::size_t> small = full;
  std::mt19937_64 rng(0xF1AC ^ 1ull);
  std::shuffle(small.begin(), small.end(), rng);
  small.resize(std::max<std::size_t>(1, full.size() / 10));
  std::sort(small.begin(), small.end());
  const auto out = run_ablation("c8", small, 100);
  const bool pass = out.positive >= 3;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "10%% data (%zu episodes): gap positive for %d/5 seeds "
                "(need >= 3), mean %.3f vs %.3f, 100 chains",
                small.size(), out.positive, out.mean_with, out.mean_without);
  report(8, pass, buf);
  CHECK(out.positive >= 3);
}
}
