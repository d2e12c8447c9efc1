#include "tdl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace tdl::eval {

world::Action RandomAgent::act(const world::WorldState&,
                               const world::TaskSpec&) {
  std::uniform_real_distribution<double> d(-world::kActionClip,
                                           world::kActionClip);
  world::Action a;
  a.dx = d(rng_);
  a.dy = d(rng_);
  a.dz = d(rng_);
  a.close = (rng_() & 1u) != 0;
  return a;
}

RolloutResult rollout_task(Agent& agent, const world::WorldState& start,
                           const world::TaskSpec& task, int max_steps) {
  agent.start_task(start, task);
  RolloutResult r;
  r.final_state = start;
  if (world::success(start, task)) {
    r.success = true;
    return r;
  }
  for (int t = 1; t <= max_steps; ++t) {
    const auto a = agent.act(r.final_state, task);
    r.final_state = world::step(r.final_state, a);
    r.steps = t;
    if (world::success(r.final_state, task)) {
      r.success = true;
      return r;
    }
  }
  return r;
}

namespace {

// Abstract effect tracking used when sampling chains: enough world knowledge
// to predict whether a later task would already be satisfied when reached.
struct AbstractState {
  bool switch_on = false;
  double slider = 0;
  int held = -1;                           // color held between grasp and place
  std::array<bool, world::kNumColors> in_zone{};

  static AbstractState from(const world::WorldState& s) {
    AbstractState a;
    a.switch_on = s.switch_on;
    a.slider = s.slider;
    const auto& zone = world::layout(s.layout_id).zone_center;
    for (int c = 0; c < world::kNumColors; ++c)
      a.in_zone[c] = std::hypot(s.blocks[c].x - zone[0],
                                s.blocks[c].y - zone[1]) <= world::kZoneRadius;
    return a;
  }

  bool compatible(const world::TaskSpec& t, bool is_last) const {
    using K = world::TaskKind;
    constexpr double kEndMargin = 0.05;  // stay clear of the success tolerance
    switch (t.kind) {
      case K::grasp_block:
        // a grasp must leave room for its paired place, and grasping a block
        // back out of the zone would pre-satisfy that place
        return !is_last && held == -1 && !in_zone[t.color];
      case K::place_block_in_zone:
        return !in_zone[t.color];
      case K::slide_left:
        return slider > kEndMargin;
      case K::slide_right:
        return slider < world::kRailLength - kEndMargin;
      case K::switch_on:
        return !switch_on;
      case K::switch_off:
        return switch_on;
    }
    return false;
  }

  void apply(const world::TaskSpec& t) {
    using K = world::TaskKind;
    switch (t.kind) {
      case K::grasp_block:
        held = t.color;
        in_zone[t.color] = false;
        break;
      case K::place_block_in_zone:
        held = -1;  // a wrongly held block is dropped before placing
        in_zone[t.color] = true;
        break;
      case K::slide_left:
        slider = 0;
        break;
      case K::slide_right:
        slider = world::kRailLength;
        break;
      case K::switch_on:
        switch_on = true;
        break;
      case K::switch_off:
        switch_on = false;
        break;
    }
  }
};

world::TaskSpec random_task(std::mt19937_64& rng) {
  world::TaskSpec t;
  t.kind = static_cast<world::TaskKind>(rng() % world::kNumTaskKinds);
  if (t.kind == world::TaskKind::grasp_block ||
      t.kind == world::TaskKind::place_block_in_zone)
    t.color = static_cast<int>(rng() % world::kNumColors);
  return t;
}

}  // namespace

ChainSpec make_chain(std::uint64_t seed, int layout_id) {
  ChainSpec chain;
  chain.seed = seed;
  chain.layout_id = layout_id;
  std::mt19937_64 rng(seed ^ 0xC4A1Bull);
  chain.tasks[0] = random_task(rng);
  auto abs = AbstractState::from(
      world::reset(seed, chain.tasks[0], layout_id));
  abs.apply(chain.tasks[0]);
  for (int i = 1; i < 5; ++i) {
    if (chain.tasks[i - 1].kind == world::TaskKind::grasp_block) {
      chain.tasks[i] = {world::TaskKind::place_block_in_zone,
                        chain.tasks[i - 1].color};
    } else {
      int guard = 0;
      do {
        chain.tasks[i] = random_task(rng);
        if (++guard > 1000)
          throw world::WorldError("make_chain: no compatible task found");
      } while (!abs.compatible(chain.tasks[i], i == 4));
    }
    abs.apply(chain.tasks[i]);
  }
  return chain;
}

world::WorldState chain_initial_state(const ChainSpec& chain) {
  return world::reset(chain.seed, chain.tasks[0], chain.layout_id);
}

int eval_chain(Agent& agent, const ChainSpec& chain, int max_steps) {
  auto state = chain_initial_state(chain);
  int completed = 0;
  for (const auto& task : chain.tasks) {
    const auto r = rollout_task(agent, state, task, max_steps);
    state = r.final_state;
    if (!r.success) break;
    ++completed;
  }
  return completed;
}

EvalReport summarize(const std::vector<int>& counts) {
  if (counts.empty()) throw world::WorldError("summarize: no chains");
  EvalReport rep;
  rep.counts = counts;
  for (int c : counts) {
    if (c < 0 || c > 5)
      throw world::WorldError("summarize: completed count out of range");
    for (int i = 0; i < c; ++i) rep.rates[i] += 1.0;
  }
  const double n = static_cast<double>(counts.size());
  for (auto& r : rep.rates) r /= n;
  rep.avg_len =
      std::accumulate(counts.begin(), counts.end(), 0.0) / n;
  return rep;
}

EvalReport run_chains(Agent& agent, int n_chains, int layout_id,
                      std::uint64_t seed0, int max_steps, std::ostream* csv) {
  if (n_chains < 1) throw world::WorldError("run_chains: need n_chains >= 1");
  if (csv) *csv << "chain,seed,layout,completed,tasks\n";
  std::vector<int> counts(static_cast<std::size_t>(n_chains));
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_chains));
  for (int i = 0; i < n_chains; ++i) {
    const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(i);
    const auto chain = make_chain(seed, layout_id);
    counts[i] = eval_chain(agent, chain, max_steps);
    seeds[i] = seed;
    if (csv) {
      *csv << i << ',' << seed << ',' << layout_id << ',' << counts[i] << ',';
      for (int t = 0; t < 5; ++t) {
        if (t) *csv << '|';
        *csv << chain.tasks[t].instruction();
      }
      *csv << '\n';
    }
  }
  auto rep = summarize(counts);
  rep.seeds = std::move(seeds);
  return rep;
}

std::vector<AblationRow> ablation_run(const std::vector<AblationEntry>& entries,
                                      int n_chains, int layout_id,
                                      std::uint64_t chain_seed0, int max_steps,
                                      std::ostream& csv, std::ostream& text) {
  csv << "config,seed,avg_len,r1,r2,r3,r4,r5\n";
  std::vector<AblationRow> rows;
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> by_config;
  for (const auto& entry : entries) {
    auto agent = entry.make_agent();
    AblationRow row;
    row.config_name = entry.config_name;
    row.seed = entry.seed;
    row.report = run_chains(*agent, n_chains, layout_id, chain_seed0,
                            max_steps);
    row.report.config_fingerprint =
        entry.config_name + "#" + std::to_string(entry.seed);
    csv << row.config_name << ',' << row.seed << ',' << row.report.avg_len;
    for (double r : row.report.rates) csv << ',' << r;
    csv << '\n';
    if (!by_config.count(row.config_name)) order.push_back(row.config_name);
    by_config[row.config_name].push_back(row.report.avg_len);
    rows.push_back(std::move(row));
  }
  text << "config                     seeds  avg_len  min    max\n";
  for (const auto& name : order) {
    const auto& v = by_config[name];
    const double mean =
        std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-26s %5zu  %6.3f  %5.3f  %5.3f\n",
                  name.c_str(), v.size(), mean, *lo, *hi);
    text << buf;
  }
  return rows;
}

}  // namespace tdl::eval
