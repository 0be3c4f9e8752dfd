#pragma once

#include <cstdint>
#include <vector>

#include "geniedrive/core/types.hpp"

namespace geniedrive {

/// Parameters for the synthetic driving world.
struct SceneGenConfig {
  int H = 32;
  int W = 32;
  int D = 8;
  int downsample = 4;
  int n_classes = 6;
  int frames = 10;
  double voxel_size = 0.5;
  double fps = 2.0;
  int n_dynamic = 3;
  double static_per_10m = 1.5;
  double speed_min = 0.5;  // ego speed, m/s
  double speed_max = 2.5;
  double curvature_max = 0.06;  // road curvature, 1/m
  double object_speed_min = -1.5;
  double object_speed_max = 3.0;
  bool static_world = false;  // dynamic objects do not move
  int n_waypoints = 3;
  int n_cameras = 2;
  int image_width = 32;
  int image_height = 32;

  /// Throws ConfigError when dims are not divisible by `downsample`, frames < 2,
  /// or fewer than 4 classes are requested.
  void validate() const;
};

/// Label ids used by the generator (sidewalk/vegetation fall back when n_classes is small).
struct SceneClasses {
  uint8_t free = 0, road = 1, vehicle = 2, obstacle = 3, sidewalk = 4, vegetation = 5;
  static SceneClasses for_count(int n_classes);
};

/// Camera rig in the ego frame used for conditioning renders.
std::vector<Camera> make_camera_rig(int n_cameras, int width, int height);

/// Deterministic given (config, seed): a static world (road, sidewalk, obstacles,
/// vegetation) plus constant-velocity vehicles, voxelized into each ego frame.
SceneSequence generate_synthetic_sequence(const SceneGenConfig& config, uint64_t seed);

}  // namespace geniedrive
