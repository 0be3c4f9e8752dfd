#include "geniedrive/core/scene_gen.hpp"

#include <cmath>
#include <numbers>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/core/rng.hpp"

namespace geniedrive {

namespace {

constexpr double kRoadHalfWidth = 3.0;
constexpr double kLaneOffset = 1.5;

struct PathPose {
  double x, y, heading;
};

// Constant-curvature centerline parametrized by arc length.
struct RoadPath {
  double kappa = 0.0;

  PathPose at(double s) const {
    if (std::abs(kappa) < 1e-9) return {s, 0.0, 0.0};
    return {std::sin(kappa * s) / kappa, (1.0 - std::cos(kappa * s)) / kappa, kappa * s};
  }

  // Signed offset to the left of the centerline.
  double lateral(double x, double y) const {
    if (std::abs(kappa) < 1e-9) return y;
    const double cy = 1.0 / kappa;
    const double r = std::hypot(x, y - cy);
    return (kappa > 0 ? 1.0 : -1.0) * (1.0 / std::abs(kappa) - r);
  }
};

struct Box {
  double cx, cy, heading;
  double half_len, half_wid;
  double z0, z1;
  uint8_t label;

  bool contains(double px, double py, double pz) const {
    if (pz < z0 || pz >= z1) return false;
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(heading), s = std::sin(heading);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) < half_len && std::abs(v) < half_wid;
  }
};

struct Vehicle {
  double s0, offset, speed;
  double half_len, half_wid, height;
};

struct World {
  RoadPath path;
  std::vector<Box> statics;
  std::vector<Vehicle> vehicles;
  SceneClasses cls;

  Box vehicle_box(const Vehicle& v, double time) const {
    const auto p = path.at(v.s0 + v.speed * time);
    return {p.x - v.offset * std::sin(p.heading), p.y + v.offset * std::cos(p.heading), p.heading,
            v.half_len, v.half_wid, 0.0, v.height, cls.vehicle};
  }
};

Box place_on_path(const RoadPath& path, double s, double offset, double half_len, double half_wid, double height,
                  uint8_t label) {
  const auto p = path.at(s);
  return {p.x - offset * std::sin(p.heading), p.y + offset * std::cos(p.heading), p.heading,
          half_len, half_wid, 0.0, height, label};
}

RigidTransform2D ego_pose(const RoadPath& path, double speed, double time) {
  const auto p = path.at(speed * time);
  return {p.heading, p.x, p.y};
}

Command classify(double speed, double kappa) {
  if (speed < 0.2) return Command::Stop;
  if (kappa > 0.02) return Command::TurnLeft;
  if (kappa < -0.02) return Command::TurnRight;
  return Command::GoStraight;
}

OccupancyGrid voxelize(const World& world, const SceneGenConfig& cfg, const RigidTransform2D& pose, double time) {
  const Vec3 origin{-0.5 * cfg.H * cfg.voxel_size, -0.5 * cfg.W * cfg.voxel_size, -cfg.voxel_size};
  auto grid = OccupancyGrid::filled(cfg.H, cfg.W, cfg.D, world.cls.free, cfg.voxel_size, origin);

  const double reach = 0.75 * std::hypot(cfg.H, cfg.W) * cfg.voxel_size + 4.0;
  std::vector<Box> nearby;
  for (const auto& v : world.vehicles) {
    auto b = world.vehicle_box(v, time);
    if (std::hypot(b.cx - pose.tx, b.cy - pose.ty) < reach) nearby.push_back(b);
  }
  for (const auto& b : world.statics) {
    if (std::hypot(b.cx - pose.tx, b.cy - pose.ty) < reach) nearby.push_back(b);
  }

  for (int i = 0; i < cfg.H; ++i) {
    for (int j = 0; j < cfg.W; ++j) {
      const auto q = grid.voxel_center(i, j, 0);
      const auto p = pose.apply(q[0], q[1]);
      for (int k = 0; k < cfg.D; ++k) {
        const double z = grid.voxel_center(i, j, k)[2];
        uint8_t label = world.cls.free;
        if (z < 0.0) {
          label = std::abs(world.path.lateral(p[0], p[1])) < kRoadHalfWidth ? world.cls.road : world.cls.sidewalk;
        } else {
          for (const auto& b : nearby) {
            if (b.contains(p[0], p[1], z)) {
              label = b.label;
              break;
            }
          }
        }
        grid.set(i, j, k, label);
      }
    }
  }
  return grid;
}

}  // namespace

void SceneGenConfig::validate() const {
  if (H <= 0 || W <= 0 || D <= 0) throw ConfigError("grid dimensions must be positive");
  if (downsample <= 0 || H % downsample || W % downsample || D % downsample) {
    throw ConfigError("grid dimensions must be divisible by the downsample factor " + std::to_string(downsample));
  }
  if (frames < 2) throw ConfigError("sequence length must be at least 2");
  if (n_classes < 4) throw ConfigError("at least 4 classes (free, road, vehicle, obstacle) are required");
  if (n_classes > 255) throw ConfigError("at most 255 classes");
  if (voxel_size <= 0 || fps <= 0) throw ConfigError("voxel_size and fps must be positive");
  if (speed_min < 0 || speed_max < speed_min) throw ConfigError("invalid ego speed range");
  if (n_waypoints < 1) throw ConfigError("at least one waypoint is required");
  if (n_dynamic < 0 || static_per_10m < 0) throw ConfigError("object counts must be non-negative");
  if (n_cameras < 1 || image_width <= 0 || image_height <= 0) throw ConfigError("invalid camera rig");
}

SceneClasses SceneClasses::for_count(int n_classes) {
  SceneClasses c;
  if (n_classes < 5) c.sidewalk = c.road;
  if (n_classes < 6) c.vegetation = c.obstacle;
  return c;
}

std::vector<Camera> make_camera_rig(int n_cameras, int width, int height) {
  const Vec3 mount{0.0, 0.0, 1.2};
  const double pitch = 0.22;
  const double hfov = std::numbers::pi / 2.0;
  std::vector<Camera> rig;
  if (n_cameras == 1) {
    rig.push_back(Camera::look(mount, 0.0, pitch, hfov, width, height));
  } else if (n_cameras == 2) {
    // Front-left / front-right with a shared central region.
    rig.push_back(Camera::look(mount, 0.35, pitch, hfov, width, height));
    rig.push_back(Camera::look(mount, -0.35, pitch, hfov, width, height));
  } else {
    for (int c = 0; c < n_cameras; ++c) {
      rig.push_back(Camera::look(mount, 2.0 * std::numbers::pi * c / n_cameras, pitch, hfov, width, height));
    }
  }
  return rig;
}

SceneSequence generate_synthetic_sequence(const SceneGenConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  World world;
  world.cls = SceneClasses::for_count(cfg.n_classes);
  world.path.kappa = rng.uniform(-cfg.curvature_max, cfg.curvature_max);
  const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  const double duration = (cfg.frames + cfg.n_waypoints) / cfg.fps;
  const double travel = speed * duration;

  const double s_lo = -15.0, s_hi = travel + 15.0;
  const int n_static = static_cast<int>(std::round(cfg.static_per_10m * (s_hi - s_lo) / 10.0));
  for (int n = 0; n < n_static; ++n) {
    const double s = rng.uniform(s_lo, s_hi);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double offset = side * rng.uniform(4.5, 7.5);
    const bool tree = rng.uniform() < 0.4;
    const double half_len = rng.uniform(1.5, 3.0);
    const double half_wid = rng.uniform(1.0, 2.0);
    const double height = tree ? rng.uniform(1.5, 2.5) : rng.uniform(1.0, 2.5);
    world.statics.push_back(place_on_path(world.path, s, offset, half_len, half_wid, height,
                                          tree ? world.cls.vegetation : world.cls.obstacle));
  }
  for (int n = 0; n < cfg.n_dynamic; ++n) {
    Vehicle v;
    v.s0 = rng.uniform(-8.0, 14.0);
    v.offset = rng.uniform() < 0.5 ? -kLaneOffset : kLaneOffset;
    const double sp = rng.uniform(cfg.object_speed_min, cfg.object_speed_max);
    v.speed = cfg.static_world ? 0.0 : sp;
    v.half_len = rng.uniform(1.5, 2.2);
    v.half_wid = 0.9;
    v.height = rng.uniform(1.3, 1.8);
    world.vehicles.push_back(v);
  }

  SceneSequence seq;
  seq.fps = cfg.fps;
  seq.n_classes = cfg.n_classes;
  seq.free_id = world.cls.free;
  seq.camera_rig = make_camera_rig(cfg.n_cameras, cfg.image_width, cfg.image_height);
  const double dt = 1.0 / cfg.fps;
  for (int t = 0; t < cfg.frames; ++t) {
    const auto pose = ego_pose(world.path, speed, t * dt);
    seq.ego_poses.push_back(pose);
    seq.frames.push_back(voxelize(world, cfg, pose, t * dt));
  }
  for (int t = 0; t + 1 < cfg.frames; ++t) {
    ControlSignal c;
    c.command = classify(speed, world.path.kappa);
    c.gt_transform = relative(seq.ego_poses[t], seq.ego_poses[t + 1]);
    for (int w = 1; w <= cfg.n_waypoints; ++w) {
      const auto rel = relative(seq.ego_poses[t], ego_pose(world.path, speed, (t + w) * dt));
      c.waypoints.push_back({rel.tx, rel.ty});
    }
    seq.controls.push_back(std::move(c));
  }
  return seq;
}

}  // namespace geniedrive
