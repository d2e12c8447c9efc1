#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tdl/data.hpp"
#include "tdl/dtm.hpp"
#include "tdl/eval.hpp"
#include "tdl/tensor.hpp"
#include "tdl/world.hpp"

// Trajectory-guided imitation policy: a causal transformer over per-step
// token groups [language, state, observation tokens, trajectory tokens,
// trajectory/action/video queries], with trajectory tokens placed before the
// action query so they can guide action prediction.

namespace tdl::dtp {

struct PolicyConfig {
  int h = 4;             // history window
  int width = 128;
  int blocks = 4;
  int heads = 4;
  int ffn = 256;
  int obs_tokens = 8;
  int traj_tokens = 8;   // M
  int chunk = 1;         // C, actions predicted per step
  int replan = 16;       // trajectory refresh interval; 0 = sample once
  bool use_trajectory = true;

  int tokens_per_step() const { return 2 + obs_tokens + traj_tokens + 3; }
  int context_per_step() const { return 2 + obs_tokens + traj_tokens; }
};

struct StepInput {
  std::vector<std::size_t> tokens;
  world::Observation obs;
  std::array<double, 4> state{};
  data::Trajectory2D traj;
  int step_index = 0;    // absolute episode step, drives position features
  bool padded = false;
};

struct StepTargets {
  bool valid = false;
  data::Trajectory2D traj;
  std::vector<std::array<double, 4>> action_chunk;  // C entries, dxyz + grip
  std::vector<double> video_feature;                // 64 dims
};

struct PolicyOutput {
  data::Trajectory2D trajectory;
  std::vector<std::array<double, 4>> actions;  // C entries, dxyz + grip logit
  std::array<double, 64> video{};
};

struct LossParts {
  nc::TensorPtr total;
  double trajectory = 0, action = 0, video = 0;
};

class Policy {
 public:
  Policy(PolicyConfig cfg, std::size_t vocab_size, std::uint64_t seed);

  struct ForwardResult {
    std::vector<nc::TensorPtr> traj_out;   // per step, [1,64]
    std::vector<nc::TensorPtr> act_out;    // per step, [1,4C]
    std::vector<nc::TensorPtr> video_out;  // per step, [1,64]
  };

  // Full teacher-forced forward over a window of exactly h steps (padded
  // entries carry the learned pad token). block_traj_to_action is a
  // diagnostic switch that masks attention from trajectory tokens to the
  // action query.
  ForwardResult forward_window(const std::vector<StepInput>& steps,
                               bool block_traj_to_action = false) const;

  // Decoded outputs for the latest step.
  PolicyOutput forward(const std::vector<StepInput>& steps,
                       bool block_traj_to_action = false) const;

  // L_trajectory + L_action + L_video averaged over valid steps. The
  // trajectory fed to the window must be the dataset label during training
  // (teacher forcing); asserted via StepInput construction in train_policy.
  LossParts loss(const ForwardResult& out,
                 const std::vector<StepTargets>& targets) const;

  // Frozen random patch projection of an observation; the video head target.
  std::vector<double> video_feature(const world::Observation& obs) const;

  PolicyOutput decode(const ForwardResult& out, int step) const;

  const PolicyConfig& config() const { return cfg_; }
  nc::ParamStore& params() { return params_; }
  const nc::ParamStore& params() const { return params_; }

  void save(const std::string& path,
            const std::vector<std::pair<std::string, nc::TensorPtr>>& extra =
                {}) const;
  void load(const std::string& path);

  friend nc::TensorPtr resample_tokens(const Policy& policy,
                                       const data::Trajectory2D& traj);

 private:
  PolicyConfig cfg_;
  nc::ParamStore params_;
  nc::TensorPtr video_proj_;   // frozen, not part of params_
  nc::TensorPtr grid_pos_;     // constant 2D sinusoidal features, [64,width]
  nc::TensorPtr traj_pos_;     // constant index sinusoidal, [32,width]
  mutable nc::TensorPtr mask_, mask_blocked_;

  nc::TensorPtr encode_step(const StepInput& step) const;
  nc::TensorPtr resample(const std::string& prefix,
                         const nc::TensorPtr& inputs) const;
  const nc::TensorPtr& mask(bool block_traj_to_action) const;
};

// M trajectory tokens from a Trajectory2D via the learned cross-attention
// resampler (standalone wrapper around the policy's resampler for tests).
nc::TensorPtr resample_tokens(const Policy& policy,
                              const data::Trajectory2D& traj);

struct ChunkRecord {
  int birth_step = 0;
  std::vector<std::array<double, 4>> actions;  // dxyz + gripper logit
};

// Exponentially weighted average (decay 0.1 per step of staleness) of all
// chunk entries that target current_step; gripper by weighted majority.
world::Action temporal_ensemble(const std::vector<ChunkRecord>& chunks,
                                int current_step, double decay = 0.1);

class DtpAgent : public eval::Agent {
 public:
  DtpAgent(const Policy& policy, const dtm::DiffusionTrajectoryModel* dtm,
           const cam::CameraParams& camera, std::uint64_t seed);

  void start_task(const world::WorldState& state,
                  const world::TaskSpec& task) override;
  world::Action act(const world::WorldState& state,
                    const world::TaskSpec& task) override;

 private:
  const Policy& policy_;
  const dtm::DiffusionTrajectoryModel* dtm_;
  cam::CameraParams camera_;
  std::mt19937_64 rng_;
  std::deque<StepInput> history_;
  data::Trajectory2D current_traj_;
  std::vector<std::size_t> tokens_;
  std::vector<ChunkRecord> chunk_history_;
  int step_counter_ = 0;
  int steps_since_replan_ = 0;

  void replan(const world::WorldState& state, const world::Observation& obs);
};

struct TrainPolicyConfig {
  int steps = 1500;
  int batch = 4;
  double lr = 3e-4;
  std::uint64_t seed = 0;
};

double train_policy(Policy& policy, const data::Dataset& dataset,
                    const std::vector<std::size_t>& episode_ids,
                    const TrainPolicyConfig& cfg,
                    const std::function<void(int, double)>& logger = {},
                    int log_every = 50, nc::Adam* optimizer = nullptr);

}  // namespace tdl::dtp
