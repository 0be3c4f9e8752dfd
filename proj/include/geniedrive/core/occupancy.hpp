#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "geniedrive/core/types.hpp"

namespace geniedrive {

/// Resamples labels into the frame reached by the ego motion `motion`
/// (nearest neighbor): out[q] = grid[voxel_of(motion * center(q))]. Voxels whose
/// source falls outside the volume become `free_id`.
OccupancyGrid transform_grid(const OccupancyGrid& grid, const RigidTransform2D& motion, uint8_t free_id = 0);

/// Binary IoU of occupied (label != free_id) voxels; 1.0 when both are empty.
double compute_iou(const OccupancyGrid& pred, const OccupancyGrid& gt, uint8_t free_id = 0);

struct MiouResult {
  /// IoU per class id; empty for free_id and for classes absent from both grids.
  std::vector<std::optional<double>> per_class;
  double mean = 1.0;
};

/// Per-class IoU excluding free_id; the mean runs over classes that occur in
/// either grid. Two all-free grids give mean 1.0.
MiouResult compute_miou(const OccupancyGrid& pred, const OccupancyGrid& gt, const LabelPalette& palette);

/// Dataset-level metric accumulation (intersections and unions summed before division).
class MetricAccumulator {
 public:
  explicit MetricAccumulator(const LabelPalette& palette);
  void add(const OccupancyGrid& pred, const OccupancyGrid& gt);
  double iou() const;
  MiouResult miou() const;
  size_t samples() const { return samples_; }

 private:
  int n_classes_;
  int free_id_;
  std::vector<uint64_t> inter_, uni_;
  uint64_t occ_inter_ = 0, occ_union_ = 0;
  size_t samples_ = 0;
};

/// Half-open voxel box [lo, hi).
struct VoxelBox {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> hi{0, 0, 0};
};

struct EditSpec {
  enum class Kind { Remove, Insert };
  Kind kind = Kind::Remove;
  VoxelBox box;
  int class_id = 0;  // Insert only

  static EditSpec remove(VoxelBox b) { return {Kind::Remove, b, 0}; }
  static EditSpec insert(VoxelBox b, int cls) { return {Kind::Insert, b, cls}; }
};

/// REMOVE clears the box to free_id; INSERT stamps class_id into it.
OccupancyGrid edit_grid(const OccupancyGrid& grid, const EditSpec& op, const LabelPalette& palette);

}  // namespace geniedrive
