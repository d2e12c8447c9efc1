#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdl/camera.hpp"

// Deterministic planar-tabletop world: three colored blocks, a slider on a
// rail, a toggle switch and a placement zone, arranged by one of four fixture
// layouts. Six templated language tasks with a scripted waypoint expert.

namespace tdl::world {

class WorldError : public std::runtime_error {
 public:
  explicit WorldError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kTableX = 1.0;
constexpr double kTableY = 0.6;
constexpr double kGripperZMax = 0.4;
constexpr double kActionClip = 0.02;
constexpr double kRailLength = 0.3;
constexpr double kGraspRadius = 0.02;     // xy, with z < 0.05
constexpr double kSliderGrabDist = 0.03;  // 3D distance to the handle
constexpr double kSwitchRadius = 0.03;    // xy, with z < 0.05
constexpr double kZoneRadius = 0.04;
constexpr double kSlideTol = 0.02;        // distance to rail end for success
constexpr double kHandleZ = 0.02;
constexpr int kNumLayouts = 4;
constexpr int kNumColors = 3;

enum class TaskKind : int {
  grasp_block = 0,
  place_block_in_zone,
  slide_left,
  slide_right,
  switch_on,
  switch_off,
};
constexpr int kNumTaskKinds = 6;

struct TaskSpec {
  TaskKind kind = TaskKind::grasp_block;
  int color = -1;  // 0 red, 1 blue, 2 green; -1 when not applicable

  std::string instruction() const;
  bool operator==(const TaskSpec&) const = default;
};

const char* color_name(int color);
const char* task_kind_name(TaskKind kind);

// Closed instruction vocabulary, sorted; every template word appears here.
const std::vector<std::string>& vocabulary();
std::vector<std::size_t> tokenize(const std::string& instruction);

struct Layout {
  std::array<double, 2> rail_anchor;  // rail runs along +x for kRailLength
  std::array<double, 2> switch_pos;
  std::array<double, 2> zone_center;
};
const Layout& layout(int layout_id);

struct Block {
  int color = 0;
  double x = 0, y = 0;
  bool held = false;

  bool operator==(const Block&) const = default;
};

struct WorldState {
  int time = 0;
  double gx = 0, gy = 0, gz = 0;
  bool gripper_closed = false;
  std::array<Block, kNumColors> blocks{};
  double slider = 0;      // position along the rail, [0, kRailLength]
  bool switch_on = false;
  int layout_id = 0;
  bool in_switch_region = false;  // edge detector for once-per-entry toggling

  cam::Vec3 gripper() const { return {gx, gy, gz}; }
  bool operator==(const WorldState&) const = default;
};

struct Action {
  double dx = 0, dy = 0, dz = 0;
  bool close = false;  // commanded gripper state
};

// Deterministic initial state; re-samples (bounded) until the task predicate
// is false at the start.
WorldState reset(std::uint64_t seed, const TaskSpec& task, int layout_id);

WorldState step(const WorldState& state, const Action& action);

bool success(const WorldState& state, const TaskSpec& task);

// Proportional waypoint controller: ascend, travel above the target, descend,
// actuate. Emits a zero displacement once the task is done.
Action expert_action(const WorldState& state, const TaskSpec& task);

// World position of the slider handle.
cam::Vec3 slider_handle(const WorldState& state);

struct Observation {
  static constexpr int kSize = 64;
  static constexpr int kChannels = 4;  // red, blue, green, fixtures/gripper
  std::vector<float> data;  // planar [c][y][x], values in [0,1]

  float at(int c, int y, int x) const {
    return data[(c * kSize + y) * kSize + x];
  }
};

// 64x64x4 raster: per-color block occupancy plus a fixture/gripper channel,
// drawn by projecting world positions through the camera.
Observation render_features(const WorldState& state,
                            const cam::CameraParams& camera);

}  // namespace tdl::world
