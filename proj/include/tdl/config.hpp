#pragma once

#include <cstdint>
#include <ostream>
#include <string>

// Flat key=value run configuration: one struct holding every tunable, a
// strict parser (unknown keys rejected) and a resolved-config writer so each
// output directory records exactly what produced it.

namespace tdl::config {

struct RunConfig {
  std::uint64_t seed = 1;

  // data generation
  int data_episodes_per_task_layout = 28;
  std::string data_path = "dataset.bin";

  // split selection for training/eval commands
  std::string split_scheme = "seen";  // seen | unseen | fraction
  double split_fraction = 0.1;

  // diffusion trajectory model
  int dtm_k = 100;
  double dtm_beta_min = 1e-4;
  double dtm_beta_max = 0.02;
  int dtm_cond_width = 128;
  int dtm_hidden = 256;
  int dtm_time_dim = 32;
  int dtm_blocks = 4;
  int dtm_steps = 4000;
  int dtm_batch = 16;
  double dtm_lr = 1e-3;
  int dtm_augment_shift = 10;
  int dtm_augment_jitter = 12;

  // policy
  int policy_h = 4;
  int policy_width = 128;
  int policy_blocks = 4;
  int policy_heads = 4;
  int policy_ffn = 256;
  int policy_obs_tokens = 8;
  int policy_traj_tokens = 8;
  int policy_chunk = 1;
  int policy_replan = 16;
  bool policy_use_trajectory = true;
  int policy_steps = 1500;
  int policy_batch = 4;
  double policy_lr = 3e-4;

  // training bookkeeping
  int checkpoint_every = 500;
  std::string dtm_checkpoint = "";
  std::string policy_checkpoint = "";
  bool resume = false;

  // evaluation
  std::string eval_agent = "policy";  // policy | expert | random
  int eval_chains = 200;
  int eval_layout = 3;
  int eval_max_steps = 200;

  // plotting
  int plot_episode = 0;
  int plot_samples = 3;
};

// Parses `key = value` lines ('#' starts a comment). Throws
// data::DataError on unknown keys or malformed values.
RunConfig load_config(const std::string& path);

// Applies a single key=value assignment (used for file lines and overrides).
void apply_key_value(RunConfig& cfg, const std::string& key,
                     const std::string& value);

// Every key with its current value, parseable by load_config.
void dump_config(const RunConfig& cfg, std::ostream& os);

}  // namespace tdl::config
