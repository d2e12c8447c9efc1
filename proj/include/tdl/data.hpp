#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdl/camera.hpp"
#include "tdl/world.hpp"

// Demonstration recording, trajectory labeling, fixed-length resampling,
// dataset persistence and experiment splits.

namespace tdl::data {

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr int kTrajectoryPoints = 32;

struct StepRecord {
  world::Observation obs;
  std::array<double, 4> state;   // gripper x, y, z, closed flag
  std::array<double, 4> action;  // dx, dy, dz, gripper command
  cam::Vec3 ee;                  // end-effector world position
};

struct Demonstration {
  world::TaskSpec task;
  std::uint64_t seed = 0;
  int layout_id = 0;
  std::vector<StepRecord> steps;  // length T; last step has zero action

  int length() const { return static_cast<int>(steps.size()); }
};

struct Trajectory2D {
  std::array<std::array<double, 2>, kTrajectoryPoints> points{};  // [-1,1]^2
  std::int64_t episode_id = -1;
  int anchor = 0;
};

// pixel <-> [-1,1]^2, anchored so pixel 0 maps to -1 and W-1/H-1 map to +1
std::array<double, 2> normalize(const cam::Pixel& px, int width, int height);
cam::Pixel denormalize(const std::array<double, 2>& p, int width, int height);

// Arc-length-uniform resampling with linear interpolation; endpoints are
// preserved exactly and a single-point path repeats the point.
std::vector<cam::Pixel> resample_fixed(const std::vector<cam::Pixel>& path,
                                       int n);

struct LabelStats {
  std::int64_t total_points = 0;
  std::int64_t clamped_points = 0;
};

// Projects the end-effector path from step t to the end, resamples it to
// kTrajectoryPoints and normalizes. Points leaving the frame are clamped to
// [-1,1] and counted in stats when given.
Trajectory2D label_trajectory(const Demonstration& demo,
                              const cam::CameraParams& camera, int t,
                              LabelStats* stats = nullptr);

// Runs the scripted expert; returns nullopt (with the reason) if it does not
// reach success within max_steps.
std::optional<Demonstration> record_demo(const world::TaskSpec& task,
                                         std::uint64_t seed, int layout_id,
                                         const cam::CameraParams& camera,
                                         std::string* fail_reason = nullptr,
                                         int max_steps = 200);

struct EpisodeMeta {
  std::uint64_t offset = 0;
  std::uint32_t length = 0;
  world::TaskSpec task;
  int layout_id = 0;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::uint32_t version = 1;
  cam::CameraParams camera;
  std::vector<std::string> vocab;
  int trajectory_points = kTrajectoryPoints;
  std::vector<EpisodeMeta> episodes;
};

// Container format, magic "TDLDATA1": header + episode blobs + trailing
// index; rasters are little-endian f32, everything else f64. A JSON sidecar
// (<path>.json) mirrors the manifest for inspection.
class DatasetWriter {
 public:
  DatasetWriter(const std::string& path, const cam::CameraParams& camera);
  void add(const Demonstration& demo);
  void finalize();  // writes the index and the JSON sidecar
  std::size_t count() const { return metas_.size(); }

 private:
  std::string path_;
  std::ofstream os_;
  DatasetManifest manifest_;
  std::vector<EpisodeMeta> metas_;
  bool finalized_ = false;
};

class Dataset {
 public:
  static Dataset open(const std::string& path);
  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t count() const { return manifest_.episodes.size(); }
  Demonstration load_episode(std::size_t id) const;
  StepRecord load_step(std::size_t id, int t) const;

 private:
  std::string path_;
  DatasetManifest manifest_;
  mutable std::ifstream is_;
};

enum class SplitScheme { seen, unseen, fraction };

struct SplitSpec {
  SplitScheme scheme = SplitScheme::seen;
  double fraction = 0.1;  // used by SplitScheme::fraction
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// seen: layout-3 episodes shuffled into 80% train / 20% test.
// unseen: train on layouts 0-2, test on all of layout 3.
// fraction: seen, with the train side subsampled to the given fraction.
Split split(const DatasetManifest& manifest, const SplitSpec& spec,
            std::uint64_t seed);

}  // namespace tdl::data
