#include "geniedrive/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "geniedrive/core/errors.hpp"

namespace geniedrive {

OccupancyGrid OccupancyGrid::filled(int H, int W, int D, uint8_t label, double voxel_size, Vec3 origin) {
  if (H <= 0 || W <= 0 || D <= 0) throw ConfigError("grid dimensions must be positive");
  OccupancyGrid g;
  g.H = H;
  g.W = W;
  g.D = D;
  g.voxel_size = voxel_size;
  g.origin = origin;
  g.labels.assign(static_cast<size_t>(H) * W * D, label);
  return g;
}

Vec3 OccupancyGrid::voxel_center(int i, int j, int k) const {
  return {origin[0] + (i + 0.5) * voxel_size, origin[1] + (j + 0.5) * voxel_size,
          origin[2] + (k + 0.5) * voxel_size};
}

std::optional<std::array<int, 3>> OccupancyGrid::voxel_of(const Vec3& p) const {
  const double fi = std::floor((p[0] - origin[0]) / voxel_size);
  const double fj = std::floor((p[1] - origin[1]) / voxel_size);
  const double fk = std::floor((p[2] - origin[2]) / voxel_size);
  if (fi < 0 || fj < 0 || fk < 0 || fi >= H || fj >= W || fk >= D) return std::nullopt;
  return std::array<int, 3>{static_cast<int>(fi), static_cast<int>(fj), static_cast<int>(fk)};
}

size_t OccupancyGrid::count_not(uint8_t free_id) const {
  return static_cast<size_t>(std::count_if(labels.begin(), labels.end(), [free_id](uint8_t v) { return v != free_id; }));
}

LabelPalette LabelPalette::standard(int n_classes) {
  static const std::vector<std::string> kNames = {"free", "road", "vehicle", "obstacle", "sidewalk", "vegetation"};
  static const std::vector<std::array<uint8_t, 3>> kColors = {
      {0, 0, 0}, {128, 64, 128}, {0, 0, 230}, {255, 158, 0}, {244, 35, 232}, {0, 175, 0}};
  if (n_classes < 2 || n_classes > 255) throw ConfigError("palette needs 2..255 classes");
  LabelPalette p;
  p.n_classes = n_classes;
  p.free_id = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (c < static_cast<int>(kNames.size())) {
      p.names.push_back(kNames[c]);
      p.colors.push_back(kColors[c]);
    } else {
      p.names.push_back("class_" + std::to_string(c));
      p.colors.push_back({static_cast<uint8_t>((c * 67) % 256), static_cast<uint8_t>((c * 131) % 256),
                          static_cast<uint8_t>((c * 197) % 256)});
    }
  }
  return p;
}

void LabelPalette::validate() const {
  if (n_classes <= 0 || free_id < 0 || free_id >= n_classes) throw ConfigError("palette free_id out of range");
  if (static_cast<int>(names.size()) != n_classes || static_cast<int>(colors.size()) != n_classes) {
    throw ConfigError("palette names/colors must have n_classes entries");
  }
  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) throw ConfigError("palette class names must be unique");
}

Mat3 RigidTransform2D::as_matrix() const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c, -s, tx, s, c, ty, 0.0, 0.0, 1.0};
}

RigidTransform2D RigidTransform2D::from_matrix(const Mat3& m) {
  return {std::atan2(m[3], m[0]), m[2], m[5]};
}

RigidTransform2D RigidTransform2D::then(const RigidTransform2D& next) const {
  const double c = std::cos(theta), s = std::sin(theta);
  double th = theta + next.theta;
  th = std::remainder(th, 2.0 * std::numbers::pi);
  return {th, tx + c * next.tx - s * next.ty, ty + s * next.tx + c * next.ty};
}

RigidTransform2D RigidTransform2D::inverse() const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {-theta, -(c * tx + s * ty), -(-s * tx + c * ty)};
}

std::array<double, 2> RigidTransform2D::apply(double x, double y) const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * x - s * y + tx, s * x + c * y + ty};
}

bool RigidTransform2D::finite() const { return std::isfinite(theta) && std::isfinite(tx) && std::isfinite(ty); }

RigidTransform2D relative(const RigidTransform2D& a, const RigidTransform2D& b) { return a.inverse().then(b); }

double max_abs_diff(const Mat3& a, const Mat3& b) {
  double m = 0.0;
  for (size_t i = 0; i < 9; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

const char* to_string(Command c) {
  switch (c) {
    case Command::GoStraight: return "GO_STRAIGHT";
    case Command::TurnLeft: return "TURN_LEFT";
    case Command::TurnRight: return "TURN_RIGHT";
    case Command::Stop: return "STOP";
  }
  return "?";
}

Command command_from_string(const std::string& s) {
  for (int i = 0; i < kCommandCount; ++i) {
    if (s == to_string(static_cast<Command>(i))) return static_cast<Command>(i);
  }
  throw FormatError("unknown command: " + s);
}

void ControlSignal::validate() const {
  if (waypoints.empty()) throw ConsistencyError("control signal needs at least one waypoint");
  if (!gt_transform.finite()) throw ConsistencyError("control signal transform is not finite");
}

Camera Camera::look(const Vec3& position, double yaw, double pitch, double hfov_rad, int width, int height) {
  if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
  Camera cam;
  cam.width = width;
  cam.height = height;
  const double f = 0.5 * width / std::tan(0.5 * hfov_rad);
  cam.K = {f, 0.0, 0.5 * width, 0.0, f, 0.5 * height, 0.0, 0.0, 1.0};
  const Vec3 fwd{std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch), -std::sin(pitch)};
  const Vec3 right{std::sin(yaw), -std::cos(yaw), 0.0};
  const Vec3 down{fwd[1] * right[2] - fwd[2] * right[1], fwd[2] * right[0] - fwd[0] * right[2],
                  fwd[0] * right[1] - fwd[1] * right[0]};
  const std::array<Vec3, 3> rows{right, down, fwd};
  cam.extrinsic.fill(0.0);
  for (int r = 0; r < 3; ++r) {
    double t = 0.0;
    for (int c = 0; c < 3; ++c) {
      cam.extrinsic[r * 4 + c] = rows[r][c];
      t -= rows[r][c] * position[c];
    }
    cam.extrinsic[r * 4 + 3] = t;
  }
  cam.extrinsic[15] = 1.0;
  return cam;
}

Vec3 Camera::to_camera(const Vec3& p) const {
  Vec3 out{};
  for (int r = 0; r < 3; ++r) {
    out[r] = extrinsic[r * 4 + 0] * p[0] + extrinsic[r * 4 + 1] * p[1] + extrinsic[r * 4 + 2] * p[2] + extrinsic[r * 4 + 3];
  }
  return out;
}

Vec3 Camera::center() const {
  // c = -R^T t
  Vec3 c{};
  for (int col = 0; col < 3; ++col) {
    double s = 0.0;
    for (int r = 0; r < 3; ++r) s -= extrinsic[r * 4 + col] * extrinsic[r * 4 + 3];
    c[col] = s;
  }
  return c;
}

Vec3 Camera::ray_direction(double u, double v) const {
  const Vec3 dc{(u - cx()) / fx(), (v - cy()) / fy(), 1.0};
  Vec3 d{};
  for (int col = 0; col < 3; ++col) {
    double s = 0.0;
    for (int r = 0; r < 3; ++r) s += extrinsic[r * 4 + col] * dc[r];
    d[col] = s;
  }
  const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  return {d[0] / n, d[1] / n, d[2] / n};
}

void Camera::validate() const {
  if (!(fx() > 0.0) || !(fy() > 0.0)) throw ConfigError("degenerate camera: focal length must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("degenerate camera: empty image");
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) dot += extrinsic[a * 4 + c] * extrinsic[b * 4 + c];
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-6) throw ConfigError("camera rotation is not orthonormal");
    }
  }
}

void SceneSequence::validate(double tol) const {
  if (frames.empty()) throw ConsistencyError("sequence has no frames");
  if (controls.size() + 1 != frames.size()) {
    throw ConsistencyError("sequence has " + std::to_string(frames.size()) + " frames but " +
                           std::to_string(controls.size()) + " controls");
  }
  if (ego_poses.size() != frames.size()) throw ConsistencyError("ego pose count differs from frame count");
  for (const auto& f : frames) {
    if (!f.same_shape(frames.front())) throw ConsistencyError("frames differ in shape");
    for (auto v : f.labels) {
      if (v >= n_classes) throw ConsistencyError("label value exceeds n_classes");
    }
  }
  for (size_t t = 0; t < controls.size(); ++t) {
    controls[t].validate();
    const auto rel = relative(ego_poses[t], ego_poses[t + 1]);
    if (max_abs_diff(rel.as_matrix(), controls[t].gt_transform.as_matrix()) > tol) {
      throw ConsistencyError("control " + std::to_string(t) + " transform disagrees with ego poses");
    }
  }
}

}  // namespace geniedrive
