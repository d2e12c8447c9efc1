#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tdl/data.hpp"
#include "tdl/tensor.hpp"
#include "tdl/world.hpp"

// Conditional DDPM mapping (instruction, observation) to a fixed-length 2D
// trajectory in normalized image coordinates.

namespace tdl::dtm {

struct NoiseSchedule {
  int K = 0;
  std::vector<double> beta;       // beta[k-1] for step k
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product of alpha
  std::vector<double> sigma;      // sqrt(beta), with sigma for k=1 forced to 0
};

// Linear beta ramp from beta_min to beta_max over K steps.
NoiseSchedule make_schedule(int K, double beta_min, double beta_max);

// Closed-form corruption x^k = sqrt(abar_k) x0 + sqrt(1-abar_k) eps.
std::vector<double> forward_noise(const std::vector<double>& x0, int k,
                                  const std::vector<double>& eps,
                                  const NoiseSchedule& sched);

struct DtmConfig {
  int K = 100;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int cond_width = 128;
  int hidden = 256;
  int time_dim = 32;
  int blocks = 4;
};

// 8x8 patches of the 64x64x4 raster as a [64, 256] row-major matrix; shared
// by the DTM condition encoder and the policy's observation tokenizer.
nc::TensorPtr obs_patch_matrix(const world::Observation& obs);

// [1,24] mass/centroid features per blob intensity band (see dtm.cpp).
nc::TensorPtr obs_moment_vector(const world::Observation& obs);

struct TrainItem {
  std::vector<std::size_t> tokens;
  world::Observation obs;
  data::Trajectory2D target;
};

class DiffusionTrajectoryModel {
 public:
  DiffusionTrajectoryModel(DtmConfig cfg, std::size_t vocab_size,
                           std::uint64_t seed);

  // Sum of mean-pooled word embeddings and a linear patch encoding of the
  // observation raster; [1, cond_width].
  nc::TensorPtr encode_condition(const std::vector<std::size_t>& tokens,
                                 const world::Observation& obs) const;

  // Residual-MLP noise predictor eps_theta(x^k, k | condition); [1, 64].
  nc::TensorPtr denoise(const nc::TensorPtr& xk, int k,
                        const nc::TensorPtr& cond) const;

  // Denoising-matching MSE over a batch with seed-deterministic (k, eps).
  nc::TensorPtr loss(const std::vector<const TrainItem*>& batch,
                     std::uint64_t seed) const;

  // Ancestral sampling from x^K ~ N(0,I); deterministic given the seed.
  // The final output is clamped to [-1,1]^2.
  data::Trajectory2D sample(const std::vector<std::size_t>& tokens,
                            const world::Observation& obs,
                            std::uint64_t seed) const;

  const NoiseSchedule& schedule() const { return sched_; }
  const DtmConfig& config() const { return cfg_; }
  nc::ParamStore& params() { return params_; }
  const nc::ParamStore& params() const { return params_; }

  void save(const std::string& path,
            const std::vector<std::pair<std::string, nc::TensorPtr>>& extra =
                {}) const;
  void load(const std::string& path);

 private:
  DtmConfig cfg_;
  NoiseSchedule sched_;
  nc::ParamStore params_;
  nc::TensorPtr time_embedding(int k) const;
};

struct TrainConfig {
  int steps = 4000;
  int batch = 16;
  double lr = 1e-3;
  // max joint raster+label translation, in observation pixels per axis
  // (0 = off)
  int augment_shift = 10;
  // max independent relocation of instruction-irrelevant fixtures, in
  // observation pixels per axis (0 = off)
  int augment_jitter = 12;
  std::uint64_t seed = 0;
};

// Draws (episode, anchor) pairs from the dataset, reading rasters lazily.
// Returns the final loss; invokes the logger every log_every steps.
double train_dtm(DiffusionTrajectoryModel& model, const data::Dataset& dataset,
                 const std::vector<std::size_t>& episode_ids,
                 const TrainConfig& cfg,
                 const std::function<void(int, double)>& logger = {},
                 int log_every = 100, nc::Adam* optimizer = nullptr);

// Mean per-point Euclidean distance between a sampled trajectory and the
// ground-truth label at anchor 0, averaged over the given episodes.
double eval_dtm(const DiffusionTrajectoryModel& model,
                const data::Dataset& dataset,
                const std::vector<std::size_t>& episode_ids,
                std::uint64_t seed);

double mean_point_distance(const data::Trajectory2D& a,
                           const data::Trajectory2D& b);

}  // namespace tdl::dtm
