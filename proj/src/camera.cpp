#include "tdl/camera.hpp"

#include <cmath>

namespace tdl::cam {

namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& a) {
  const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  return {a[0] / n, a[1] / n, a[2] / n};
}

}  // namespace

bool CameraParams::valid(double tol) const {
  if (!(fx > 0) || !(fy > 0)) return false;
  const auto& r = rotation;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += r[k * 3 + i] * r[k * 3 + j];
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(dot - want) > tol) return false;
    }
  }
  return true;
}

CameraParams default_camera() {
  CameraParams cam;
  cam.fx = cam.fy = 140.0;  // whole table plus lift height fits in frame
  cam.cx = cam.cy = 112.0;
  const Vec3 eye{0.5, -0.35, 0.8};
  const Vec3 target{0.5, 0.3, 0.0};
  // camera axes: z forward (toward target), x right, y down
  const Vec3 fwd = normalized({target[0] - eye[0], target[1] - eye[1],
                               target[2] - eye[2]});
  const Vec3 world_up{0.0, 0.0, 1.0};
  const Vec3 right = normalized(cross(fwd, world_up));
  const Vec3 down = cross(fwd, right);
  cam.rotation = {right[0], right[1], right[2],
                  down[0],  down[1],  down[2],
                  fwd[0],   fwd[1],   fwd[2]};
  for (int i = 0; i < 3; ++i)
    cam.translation[i] = -(cam.rotation[i * 3 + 0] * eye[0] +
                           cam.rotation[i * 3 + 1] * eye[1] +
                           cam.rotation[i * 3 + 2] * eye[2]);
  return cam;
}

Vec3 world_to_camera(const Vec3& p, const CameraParams& cam) {
  Vec3 out;
  for (int i = 0; i < 3; ++i)
    out[i] = cam.rotation[i * 3 + 0] * p[0] + cam.rotation[i * 3 + 1] * p[1] +
             cam.rotation[i * 3 + 2] * p[2] + cam.translation[i];
  return out;
}

Pixel project(const Vec3& point, const CameraParams& cam) {
  const Vec3 pc = world_to_camera(point, cam);
  if (!(pc[2] > 1e-6))
    throw ProjectionError("project: point behind camera (depth " +
                          std::to_string(pc[2]) + ")");
  return {cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy};
}

std::vector<Pixel> project_path(const std::vector<Vec3>& points,
                                const CameraParams& cam) {
  std::vector<Pixel> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    try {
      out.push_back(project(points[i], cam));
    } catch (const ProjectionError& e) {
      throw ProjectionError("project_path: point " + std::to_string(i) + ": " +
                            e.what());
    }
  }
  return out;
}

}  // namespace tdl::cam
