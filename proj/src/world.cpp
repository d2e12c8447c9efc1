#include "tdl/world.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace tdl::world {

namespace {

const std::array<Layout, kNumLayouts> kLayouts = {{
    {{0.10, 0.50}, {0.85, 0.50}, {0.75, 0.15}},
    {{0.60, 0.52}, {0.12, 0.48}, {0.25, 0.12}},
    {{0.35, 0.05}, {0.90, 0.30}, {0.15, 0.40}},
    {{0.15, 0.08}, {0.08, 0.25}, {0.80, 0.45}},
}};

double clampd(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

double xy_dist(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

double point_segment_dist(double px, double py, double ax, double ay,
                          double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = clampd(t, 0.0, 1.0);
  return xy_dist(px, py, ax + t * vx, ay + t * vy);
}

Action toward(const WorldState& s, double tx, double ty, double tz,
              bool close) {
  Action a;
  a.dx = clampd(tx - s.gx, -kActionClip, kActionClip);
  a.dy = clampd(ty - s.gy, -kActionClip, kActionClip);
  a.dz = clampd(tz - s.gz, -kActionClip, kActionClip);
  a.close = close;
  return a;
}

constexpr double kAlignTol = 0.012;
constexpr double kTravelZ = 0.12;

}  // namespace

const Layout& layout(int layout_id) {
  if (layout_id < 0 || layout_id >= kNumLayouts)
    throw WorldError("layout_id out of range: " + std::to_string(layout_id));
  return kLayouts[layout_id];
}

const char* color_name(int color) {
  switch (color) {
    case 0: return "red";
    case 1: return "blue";
    case 2: return "green";
  }
  throw WorldError("invalid color index: " + std::to_string(color));
}

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::grasp_block: return "grasp_block";
    case TaskKind::place_block_in_zone: return "place_block_in_zone";
    case TaskKind::slide_left: return "slide_left";
    case TaskKind::slide_right: return "slide_right";
    case TaskKind::switch_on: return "switch_on";
    case TaskKind::switch_off: return "switch_off";
  }
  throw WorldError("invalid task kind");
}

std::string TaskSpec::instruction() const {
  switch (kind) {
    case TaskKind::grasp_block:
      return std::string("grasp the ") + color_name(color) + " block";
    case TaskKind::place_block_in_zone:
      return std::string("place the ") + color_name(color) +
             " block in the zone";
    case TaskKind::slide_left: return "push the slider to the left";
    case TaskKind::slide_right: return "push the slider to the right";
    case TaskKind::switch_on: return "turn on the switch";
    case TaskKind::switch_off: return "turn off the switch";
  }
  throw WorldError("invalid task kind");
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v = {"block", "blue",  "grasp", "green", "in",
                                  "left",  "off",   "on",    "place", "push",
                                  "red",   "right", "slider", "switch", "the",
                                  "to",    "turn",  "zone"};
    std::sort(v.begin(), v.end());
    return v;
  }();
  return vocab;
}

std::vector<std::size_t> tokenize(const std::string& instruction) {
  const auto& vocab = vocabulary();
  std::vector<std::size_t> ids;
  std::istringstream is(instruction);
  std::string word;
  while (is >> word) {
    auto it = std::lower_bound(vocab.begin(), vocab.end(), word);
    if (it == vocab.end() || *it != word)
      throw WorldError("tokenize: word not in vocabulary: " + word);
    ids.push_back(static_cast<std::size_t>(it - vocab.begin()));
  }
  return ids;
}

cam::Vec3 slider_handle(const WorldState& s) {
  const Layout& lay = layout(s.layout_id);
  return {lay.rail_anchor[0] + s.slider, lay.rail_anchor[1], kHandleZ};
}

bool success(const WorldState& s, const TaskSpec& task) {
  const Layout& lay = layout(s.layout_id);
  switch (task.kind) {
    case TaskKind::grasp_block:
      return s.blocks[task.color].held;
    case TaskKind::place_block_in_zone: {
      const Block& b = s.blocks[task.color];
      return !b.held && xy_dist(b.x, b.y, lay.zone_center[0],
                                lay.zone_center[1]) <= kZoneRadius;
    }
    case TaskKind::slide_left: return s.slider <= kSlideTol;
    case TaskKind::slide_right: return s.slider >= kRailLength - kSlideTol;
    case TaskKind::switch_on: return s.switch_on;
    case TaskKind::switch_off: return !s.switch_on;
  }
  throw WorldError("invalid task kind");
}

WorldState reset(std::uint64_t seed, const TaskSpec& task, int layout_id) {
  const Layout& lay = layout(layout_id);
  // mix task identity into the stream so distinct tasks get distinct scenes
  std::uint64_t mixed = seed * 0x9E3779B97F4A7C15ull +
                        (static_cast<std::uint64_t>(task.kind) * 7 +
                         static_cast<std::uint64_t>(task.color + 1)) *
                            0xBF58476D1CE4E5B9ull +
                        static_cast<std::uint64_t>(layout_id);
  std::mt19937_64 rng(mixed);
  std::uniform_real_distribution<double> ux(0.08, kTableX - 0.08);
  std::uniform_real_distribution<double> uy(0.06, kTableY - 0.06);
  std::uniform_real_distribution<double> uslider(0.05, kRailLength - 0.05);

  for (int attempt = 0; attempt < 100; ++attempt) {
    WorldState s;
    s.layout_id = layout_id;
    s.gx = ux(rng);
    s.gy = uy(rng);
    s.gz = 0.2;
    s.gripper_closed = false;
    s.slider = uslider(rng);
    s.switch_on = (rng() & 1ull) != 0;
    for (int c = 0; c < kNumColors; ++c) {
      Block& b = s.blocks[c];
      b.color = c;
      bool ok = false;
      for (int tries = 0; tries < 200 && !ok; ++tries) {
        b.x = ux(rng);
        b.y = uy(rng);
        ok = true;
        for (int o = 0; o < c; ++o)
          if (xy_dist(b.x, b.y, s.blocks[o].x, s.blocks[o].y) < 0.08)
            ok = false;
        if (xy_dist(b.x, b.y, lay.switch_pos[0], lay.switch_pos[1]) < 0.08)
          ok = false;
        if (xy_dist(b.x, b.y, lay.zone_center[0], lay.zone_center[1]) < 0.08)
          ok = false;
        if (point_segment_dist(b.x, b.y, lay.rail_anchor[0], lay.rail_anchor[1],
                               lay.rail_anchor[0] + kRailLength,
                               lay.rail_anchor[1]) < 0.08)
          ok = false;
      }
      if (!ok) throw WorldError("reset: could not place blocks");
    }
    if (!success(s, task)) return s;
  }
  throw WorldError("reset: initial state keeps satisfying task " +
                   task.instruction());
}

WorldState step(const WorldState& state, const Action& action) {
  WorldState s = state;
  const double dx = clampd(action.dx, -kActionClip, kActionClip);
  const double dy = clampd(action.dy, -kActionClip, kActionClip);
  const double dz = clampd(action.dz, -kActionClip, kActionClip);

  const double ngx = clampd(s.gx + dx, 0.0, kTableX);
  const double ngy = clampd(s.gy + dy, 0.0, kTableY);
  const double ngz = clampd(s.gz + dz, 0.0, kGripperZMax);

  // slider drag: proximity to the handle before the move, displacement after
  const cam::Vec3 handle = slider_handle(s);
  const double hd = std::sqrt((s.gx - handle[0]) * (s.gx - handle[0]) +
                              (s.gy - handle[1]) * (s.gy - handle[1]) +
                              (s.gz - handle[2]) * (s.gz - handle[2]));
  if (hd <= kSliderGrabDist)
    s.slider = clampd(s.slider + (ngx - s.gx), 0.0, kRailLength);

  s.gx = ngx;
  s.gy = ngy;
  s.gz = ngz;

  if (action.close && !s.gripper_closed) {
    s.gripper_closed = true;
    if (s.gz < 0.05) {
      int best = -1;
      double best_d = kGraspRadius;
      for (int c = 0; c < kNumColors; ++c) {
        const double d = xy_dist(s.gx, s.gy, s.blocks[c].x, s.blocks[c].y);
        if (d <= best_d) {
          best_d = d;
          best = c;
        }
      }
      if (best >= 0) s.blocks[best].held = true;
    }
  } else if (!action.close && s.gripper_closed) {
    s.gripper_closed = false;
    for (auto& b : s.blocks) b.held = false;
  }

  for (auto& b : s.blocks)
    if (b.held) {
      b.x = s.gx;
      b.y = s.gy;
    }

  const Layout& lay = layout(s.layout_id);
  const bool in_region =
      xy_dist(s.gx, s.gy, lay.switch_pos[0], lay.switch_pos[1]) <=
          kSwitchRadius &&
      s.gz < 0.05;
  if (in_region && !s.in_switch_region) s.switch_on = !s.switch_on;
  s.in_switch_region = in_region;

  s.time += 1;
  return s;
}

namespace {

// Shared approach logic: ascend if travelling low, otherwise head above the
// target; returns nullopt once aligned in xy.
std::optional<Action> travel(const WorldState& s, double tx, double ty,
                             bool close) {
  if (xy_dist(s.gx, s.gy, tx, ty) > kAlignTol) {
    if (s.gz < 0.10) return toward(s, s.gx, s.gy, kTravelZ, close);
    return toward(s, tx, ty, kTravelZ, close);
  }
  return std::nullopt;
}

Action expert_grasp(const WorldState& s, int color) {
  const Block& b = s.blocks[color];
  if (b.held) return Action{0, 0, 0, true};
  if (auto a = travel(s, b.x, b.y, false)) return *a;
  if (s.gz <= 0.045) return Action{0, 0, 0, true};
  return toward(s, b.x, b.y, 0.03, false);
}

Action expert_release_first(const WorldState& s) {
  return Action{0, 0, 0, false};
}

bool holding_any(const WorldState& s) {
  for (const auto& b : s.blocks)
    if (b.held) return true;
  return false;
}

}  // namespace

Action expert_action(const WorldState& s, const TaskSpec& task) {
  if (success(s, task))
    return Action{0, 0, 0, s.gripper_closed};
  const Layout& lay = layout(s.layout_id);
  switch (task.kind) {
    case TaskKind::grasp_block:
      return expert_grasp(s, task.color);
    case TaskKind::place_block_in_zone: {
      const Block& b = s.blocks[task.color];
      if (!b.held) {
        if (holding_any(s)) return expert_release_first(s);
        return expert_grasp(s, task.color);
      }
      if (xy_dist(s.gx, s.gy, lay.zone_center[0], lay.zone_center[1]) <=
          kAlignTol)
        return Action{0, 0, 0, false};  // release in the zone
      if (auto a = travel(s, lay.zone_center[0], lay.zone_center[1], true))
        return *a;
      return toward(s, lay.zone_center[0], lay.zone_center[1], kTravelZ, true);
    }
    case TaskKind::slide_left:
    case TaskKind::slide_right: {
      if (holding_any(s)) return expert_release_first(s);
      const cam::Vec3 h = slider_handle(s);
      const double d3 = std::sqrt((s.gx - h[0]) * (s.gx - h[0]) +
                                  (s.gy - h[1]) * (s.gy - h[1]) +
                                  (s.gz - h[2]) * (s.gz - h[2]));
      if (d3 <= 0.025) {
        const double tx = task.kind == TaskKind::slide_left
                              ? lay.rail_anchor[0] - 0.1
                              : lay.rail_anchor[0] + kRailLength + 0.1;
        return toward(s, tx, h[1], kHandleZ, false);
      }
      if (auto a = travel(s, h[0], h[1], false)) return *a;
      return toward(s, h[0], h[1], kHandleZ, false);
    }
    case TaskKind::switch_on:
    case TaskKind::switch_off: {
      if (holding_any(s)) return expert_release_first(s);
      // the toggle fires on region entry, so leave the region first when a
      // previous task ended with the gripper parked on the switch
      if (s.in_switch_region) return {0, 0, kActionClip, false};
      if (auto a = travel(s, lay.switch_pos[0], lay.switch_pos[1], false))
        return *a;
      return toward(s, lay.switch_pos[0], lay.switch_pos[1], 0.03, false);
    }
  }
  throw WorldError("invalid task kind");
}

namespace {

void stamp(Observation& obs, int channel, double u224, double v224,
           double radius, float intensity) {
  const double scale = Observation::kSize / 224.0;
  const double cx = u224 * scale, cy = v224 * scale;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x1 = std::min(Observation::kSize - 1,
                          static_cast<int>(std::ceil(cx + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y1 = std::min(Observation::kSize - 1,
                          static_cast<int>(std::ceil(cy + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      if (d <= radius) {
        float& px = obs.data[(channel * Observation::kSize + y) *
                                 Observation::kSize +
                             x];
        px = std::max(px, intensity);
      }
    }
}

}  // namespace

Observation render_features(const WorldState& s,
                            const cam::CameraParams& camera) {
  Observation obs;
  obs.data.assign(Observation::kChannels * Observation::kSize *
                      Observation::kSize,
                  0.0f);
  const Layout& lay = layout(s.layout_id);
  for (int c = 0; c < kNumColors; ++c) {
    const auto px = cam::project({s.blocks[c].x, s.blocks[c].y, 0.02}, camera);
    stamp(obs, c, px[0], px[1], 1.6, 1.0f);
  }
  const auto zone = cam::project({lay.zone_center[0], lay.zone_center[1], 0.0},
                                 camera);
  stamp(obs, 3, zone[0], zone[1], 2.6, 0.2f);
  const auto sw =
      cam::project({lay.switch_pos[0], lay.switch_pos[1], 0.02}, camera);
  stamp(obs, 3, sw[0], sw[1], 1.6, s.switch_on ? 0.6f : 0.4f);
  const auto handle = cam::project(slider_handle(s), camera);
  stamp(obs, 3, handle[0], handle[1], 1.6, 0.8f);
  const auto grip = cam::project(s.gripper(), camera);
  stamp(obs, 3, grip[0], grip[1], 1.6, 1.0f);
  return obs;
}

}  // namespace tdl::world
