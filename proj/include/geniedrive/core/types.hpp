#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace geniedrive {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;   // row-major
using Mat4 = std::array<double, 16>;  // row-major

/// Semantic labels over a metric voxel volume, x-major then y then z.
struct OccupancyGrid {
  int H = 0;  // x extent (voxels)
  int W = 0;  // y extent
  int D = 0;  // z extent
  std::vector<uint8_t> labels;
  double voxel_size = 0.5;
  Vec3 origin{0.0, 0.0, 0.0};  // world position of the corner of voxel (0,0,0)

  static OccupancyGrid filled(int H, int W, int D, uint8_t label, double voxel_size = 0.5,
                              Vec3 origin = {0.0, 0.0, 0.0});

  size_t index(int i, int j, int k) const {
    return (static_cast<size_t>(i) * W + static_cast<size_t>(j)) * D + static_cast<size_t>(k);
  }
  uint8_t at(int i, int j, int k) const { return labels[index(i, j, k)]; }
  void set(int i, int j, int k, uint8_t v) { labels[index(i, j, k)] = v; }
  bool in_bounds(int i, int j, int k) const { return i >= 0 && i < H && j >= 0 && j < W && k >= 0 && k < D; }
  size_t size() const { return labels.size(); }
  bool same_shape(const OccupancyGrid& o) const { return H == o.H && W == o.W && D == o.D; }

  Vec3 voxel_center(int i, int j, int k) const;
  /// Voxel containing a point, if inside the volume.
  std::optional<std::array<int, 3>> voxel_of(const Vec3& p) const;
  size_t count_not(uint8_t free_id) const;

  friend bool operator==(const OccupancyGrid&, const OccupancyGrid&) = default;
};

struct LabelPalette {
  int n_classes = 0;
  int free_id = 0;
  std::vector<std::string> names;
  std::vector<std::array<uint8_t, 3>> colors;

  /// free, road, vehicle, obstacle, sidewalk, vegetation (truncated/extended to n_classes).
  static LabelPalette standard(int n_classes);
  void validate() const;
  friend bool operator==(const LabelPalette&, const LabelPalette&) = default;
};

/// Planar rigid motion: p' = R(theta) p + t.
struct RigidTransform2D {
  double theta = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  static RigidTransform2D identity() { return {}; }
  Mat3 as_matrix() const;
  static RigidTransform2D from_matrix(const Mat3& m);
  /// Matrix product this * next: apply `next` in the frame reached by `this`.
  RigidTransform2D then(const RigidTransform2D& next) const;
  RigidTransform2D inverse() const;
  std::array<double, 2> apply(double x, double y) const;
  bool finite() const;

  friend bool operator==(const RigidTransform2D&, const RigidTransform2D&) = default;
};

/// Pose of `b` expressed in the frame of `a`: a^-1 * b.
RigidTransform2D relative(const RigidTransform2D& a, const RigidTransform2D& b);
double max_abs_diff(const Mat3& a, const Mat3& b);

enum class Command : int { GoStraight = 0, TurnLeft = 1, TurnRight = 2, Stop = 3 };
inline constexpr int kCommandCount = 4;
const char* to_string(Command c);
Command command_from_string(const std::string& s);

struct ControlSignal {
  Command command = Command::GoStraight;
  std::vector<std::array<double, 2>> waypoints;  // meters, current ego frame
  RigidTransform2D gt_transform;                 // ego motion to the next frame

  void validate() const;
  friend bool operator==(const ControlSignal&, const ControlSignal&) = default;
};

/// Pinhole camera: K (3x3), world-to-camera extrinsic (4x4), image size.
/// Camera axes: x right, y down, z forward.
struct Camera {
  Mat3 K{};
  Mat4 extrinsic{};
  int width = 0;
  int height = 0;

  /// Camera at `position` (grid/ego frame: x forward, y left, z up) looking
  /// along heading `yaw` (radians, CCW from +x), tilted down by `pitch`.
  static Camera look(const Vec3& position, double yaw, double pitch, double hfov_rad, int width, int height);

  double fx() const { return K[0]; }
  double fy() const { return K[4]; }
  double cx() const { return K[2]; }
  double cy() const { return K[5]; }
  Vec3 to_camera(const Vec3& p) const;
  Vec3 center() const;
  /// Unit direction (world frame) of the ray through pixel coordinate (u, v).
  Vec3 ray_direction(double u, double v) const;
  /// Throws ConfigError on fx/fy <= 0 or a non-orthonormal rotation.
  void validate() const;

  friend bool operator==(const Camera&, const Camera&) = default;
};

struct SceneSequence {
  std::vector<OccupancyGrid> frames;
  std::vector<ControlSignal> controls;        // frames.size() - 1
  std::vector<RigidTransform2D> ego_poses;    // world frame, one per frame
  std::vector<Camera> camera_rig;
  double fps = 2.0;
  int n_classes = 6;
  int free_id = 0;

  /// Checks the length contract and that ego_poses[t]^-1 * ego_poses[t+1]
  /// equals controls[t].gt_transform within `tol`. Throws ConsistencyError.
  void validate(double tol = 1e-6) const;
  friend bool operator==(const SceneSequence&, const SceneSequence&) = default;
};

}  // namespace geniedrive
