#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "tdl/world.hpp"

// Long-horizon rollout evaluation: per-task success, five-task chains with
// stop-on-failure and state carry-over, per-position success rates, Avg. Len.

namespace tdl::eval {

class Agent {
 public:
  virtual ~Agent() = default;
  virtual void start_task(const world::WorldState& state,
                          const world::TaskSpec& task) {}
  virtual world::Action act(const world::WorldState& state,
                            const world::TaskSpec& task) = 0;
};

class ExpertAgent : public Agent {
 public:
  world::Action act(const world::WorldState& s,
                    const world::TaskSpec& t) override {
    return world::expert_action(s, t);
  }
};

class RandomAgent : public Agent {
 public:
  explicit RandomAgent(std::uint64_t seed) : rng_(seed) {}
  world::Action act(const world::WorldState&, const world::TaskSpec&) override;

 private:
  std::mt19937_64 rng_;
};

struct RolloutResult {
  bool success = false;
  world::WorldState final_state;
  int steps = 0;
};

// Steps the environment with the agent until success or the step cap. A task
// already satisfied at entry succeeds immediately with zero steps.
RolloutResult rollout_task(Agent& agent, const world::WorldState& start,
                           const world::TaskSpec& task, int max_steps = 200);

struct ChainSpec {
  std::array<world::TaskSpec, 5> tasks;
  std::uint64_t seed = 0;
  int layout_id = 0;
};

// Samples a compatible five-task chain: every task is unsatisfied when it is
// reached (tracked abstractly) and a grasp is always followed by a place of
// the same color.
ChainSpec make_chain(std::uint64_t seed, int layout_id);

world::WorldState chain_initial_state(const ChainSpec& chain);

// Runs the chain sequentially with state carry-over; stops at the first
// failure and returns the number of completed tasks.
int eval_chain(Agent& agent, const ChainSpec& chain, int max_steps = 200);

struct EvalReport {
  std::vector<int> counts;           // completed tasks per chain, 0..5
  std::array<double, 5> rates{};     // r_i = fraction of chains with count >= i
  double avg_len = 0.0;              // mean count == sum of rates
  std::string config_fingerprint;
  std::vector<std::uint64_t> seeds;
};

EvalReport summarize(const std::vector<int>& counts);

// Runs n_chains chains with per-chain seeds seed0, seed0+1, ...
EvalReport run_chains(Agent& agent, int n_chains, int layout_id,
                      std::uint64_t seed0, int max_steps = 200,
                      std::ostream* csv = nullptr);

struct AblationEntry {
  std::string config_name;
  std::uint64_t seed = 0;
  std::function<std::unique_ptr<Agent>()> make_agent;
};

struct AblationRow {
  std::string config_name;
  std::uint64_t seed = 0;
  EvalReport report;
};

// Evaluates each (config, seed) entry on the same chain set and emits a
// per-run CSV plus a formatted per-config mean/spread table.
std::vector<AblationRow> ablation_run(const std::vector<AblationEntry>& entries,
                                      int n_chains, int layout_id,
                                      std::uint64_t chain_seed0,
                                      int max_steps, std::ostream& csv,
                                      std::ostream& text);

}  // namespace tdl::eval
