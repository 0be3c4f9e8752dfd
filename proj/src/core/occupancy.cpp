#include "geniedrive/core/occupancy.hpp"

#include <cmath>

#include "geniedrive/core/errors.hpp"

namespace geniedrive {

OccupancyGrid transform_grid(const OccupancyGrid& grid, const RigidTransform2D& motion, uint8_t free_id) {
  OccupancyGrid out = grid;
  const double c = std::cos(motion.theta), s = std::sin(motion.theta);
  for (int i = 0; i < grid.H; ++i) {
    for (int j = 0; j < grid.W; ++j) {
      const auto q = grid.voxel_center(i, j, 0);
      const double px = c * q[0] - s * q[1] + motion.tx;
      const double py = s * q[0] + c * q[1] + motion.ty;
      const double fi = std::floor((px - grid.origin[0]) / grid.voxel_size);
      const double fj = std::floor((py - grid.origin[1]) / grid.voxel_size);
      const bool inside = fi >= 0 && fj >= 0 && fi < grid.H && fj < grid.W;
      for (int k = 0; k < grid.D; ++k) {
        out.set(i, j, k, inside ? grid.at(static_cast<int>(fi), static_cast<int>(fj), k) : free_id);
      }
    }
  }
  return out;
}

double compute_iou(const OccupancyGrid& pred, const OccupancyGrid& gt, uint8_t free_id) {
  if (!pred.same_shape(gt)) throw ShapeError("compute_iou: grid shapes differ");
  uint64_t inter = 0, uni = 0;
  for (size_t n = 0; n < gt.size(); ++n) {
    const bool p = pred.labels[n] != free_id;
    const bool g = gt.labels[n] != free_id;
    inter += (p && g);
    uni += (p || g);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MiouResult compute_miou(const OccupancyGrid& pred, const OccupancyGrid& gt, const LabelPalette& palette) {
  MetricAccumulator acc(palette);
  acc.add(pred, gt);
  return acc.miou();
}

MetricAccumulator::MetricAccumulator(const LabelPalette& palette)
    : n_classes_(palette.n_classes),
      free_id_(palette.free_id),
      inter_(static_cast<size_t>(palette.n_classes), 0),
      uni_(static_cast<size_t>(palette.n_classes), 0) {}

void MetricAccumulator::add(const OccupancyGrid& pred, const OccupancyGrid& gt) {
  if (!pred.same_shape(gt)) throw ShapeError("metrics: grid shapes differ");
  for (size_t n = 0; n < gt.size(); ++n) {
    const int p = pred.labels[n];
    const int g = gt.labels[n];
    if (p >= n_classes_ || g >= n_classes_) throw ShapeError("metrics: label exceeds palette");
    const bool po = p != free_id_, go = g != free_id_;
    occ_inter_ += (po && go);
    occ_union_ += (po || go);
    if (p == g) {
      ++inter_[p];
      ++uni_[p];
    } else {
      ++uni_[p];
      ++uni_[g];
    }
  }
  ++samples_;
}

double MetricAccumulator::iou() const {
  return occ_union_ == 0 ? 1.0 : static_cast<double>(occ_inter_) / static_cast<double>(occ_union_);
}

MiouResult MetricAccumulator::miou() const {
  MiouResult r;
  r.per_class.resize(static_cast<size_t>(n_classes_));
  double total = 0.0;
  int counted = 0;
  for (int c = 0; c < n_classes_; ++c) {
    if (c == free_id_ || uni_[c] == 0) continue;
    const double v = static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
    r.per_class[c] = v;
    total += v;
    ++counted;
  }
  r.mean = counted == 0 ? 1.0 : total / counted;
  return r;
}

OccupancyGrid edit_grid(const OccupancyGrid& grid, const EditSpec& op, const LabelPalette& palette) {
  const auto& b = op.box;
  const std::array<int, 3> dims{grid.H, grid.W, grid.D};
  for (int a = 0; a < 3; ++a) {
    if (b.lo[a] < 0 || b.hi[a] > dims[a] || b.lo[a] > b.hi[a]) {
      throw ConfigError("edit box is out of the grid bounds");
    }
  }
  uint8_t value = static_cast<uint8_t>(palette.free_id);
  if (op.kind == EditSpec::Kind::Insert) {
    if (op.class_id < 0 || op.class_id >= palette.n_classes) throw ConfigError("edit class id out of range");
    value = static_cast<uint8_t>(op.class_id);
  }
  OccupancyGrid out = grid;
  for (int i = b.lo[0]; i < b.hi[0]; ++i)
    for (int j = b.lo[1]; j < b.hi[1]; ++j)
      for (int k = b.lo[2]; k < b.hi[2]; ++k) out.set(i, j, k, value);
  return out;
}

}  // namespace geniedrive
