#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

// Ideal pinhole camera: world -> camera rigid transform followed by
// perspective projection onto a 224x224 image.

namespace tdl::cam {

class ProjectionError : public std::runtime_error {
 public:
  explicit ProjectionError(const std::string& msg) : std::runtime_error(msg) {}
};

using Vec3 = std::array<double, 3>;
using Pixel = std::array<double, 2>;

struct CameraParams {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::array<double, 9> rotation{};    // row-major world->camera
  Vec3 translation{};
  int width = 224;
  int height = 224;

  // rotation^T * rotation == I within tol, fx/fy > 0
  bool valid(double tol = 1e-9) const;
};

// Static oblique view 0.8 m above the table, looking at the table center.
// Chosen so every expert path projects inside the 224x224 frame.
CameraParams default_camera();

Vec3 world_to_camera(const Vec3& point, const CameraParams& cam);

// u = fx*x/z + cx, v = fy*y/z + cy; requires camera-frame depth > 1e-6.
Pixel project(const Vec3& point, const CameraParams& cam);

std::vector<Pixel> project_path(const std::vector<Vec3>& points,
                                const CameraParams& cam);

}  // namespace tdl::cam
