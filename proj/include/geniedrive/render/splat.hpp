#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "geniedrive/core/types.hpp"

namespace geniedrive::render {

/// Label for rays that hit nothing; distinct from every class id and from free space.
inline constexpr uint8_t kBackground = 255;
/// Preview color of background pixels.
inline constexpr std::array<uint8_t, 3> kBackgroundColor{135, 206, 235};
inline constexpr char kSemanticMapMagic[8] = {'S', 'E', 'M', 'M', 'A', 'P', 'v', '1'};

struct Primitive {
  Vec3 center{};
  int class_id = 0;
  double opacity = 0.95;
  double radius = 0.25;
};

struct SemanticMap {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> labels;  // row-major (row, col)

  static SemanticMap blank(int width, int height) {
    return {width, height, std::vector<uint8_t>(static_cast<size_t>(width) * height, kBackground)};
  }
  uint8_t at(int row, int col) const { return labels[static_cast<size_t>(row) * width + col]; }
  friend bool operator==(const SemanticMap&, const SemanticMap&) = default;
};

/// One primitive per occupied voxel at its center, radius voxel_size / 2.
std::vector<Primitive> voxels_to_primitives(const OccupancyGrid& grid, const LabelPalette& palette, double alpha);

/// Square: side max(1, projected diameter) around the projected center.
/// Silhouette: pixels whose center ray crosses the primitive's cube (one pixel
/// minimum), which tracks voxel edges seen at an angle.
enum class Footprint { Square, Silhouette };

struct SplatOptions {
  double transmittance_cutoff = 1e-3;
  bool early_exit = true;
  Footprint footprint = Footprint::Silhouette;
};

/// Front-to-back compositing of primitive footprints; each pixel takes the class
/// with the largest accumulated weight alpha_i * prod_{j<i} (1 - alpha_j).
SemanticMap splat(const std::vector<Primitive>& primitives, const Camera& camera, const LabelPalette& palette,
                  const SplatOptions& options = {});

/// Flat index of the first occupied voxel along each pixel-center ray (steps of
/// voxel_size / 8), or -1 when the ray leaves the grid.
std::vector<int64_t> first_hits(const OccupancyGrid& grid, const Camera& camera, const LabelPalette& palette);

/// Labels of `first_hits`; background where nothing is hit.
SemanticMap raymarch_oracle(const OccupancyGrid& grid, const Camera& camera, const LabelPalette& palette);

/// Fraction of pixels with equal labels.
double agreement(const SemanticMap& a, const SemanticMap& b);

/// Maps for every (frame, view); index frame * views + view.
struct ConditionStack {
  int views = 0;
  int frames = 0;
  std::vector<SemanticMap> maps;

  const SemanticMap& at(int view, int frame) const { return maps[static_cast<size_t>(frame) * views + view]; }
  friend bool operator==(const ConditionStack&, const ConditionStack&) = default;
};

ConditionStack render_sequence(const std::vector<OccupancyGrid>& frames, const std::vector<Camera>& rig,
                               const LabelPalette& palette, double alpha = 0.95);

/// `dir/cond_manifest` plus `view{v}_frame{t}.bin`; PNG previews when `png` is set.
void export_condition_stack(const ConditionStack& stack, const LabelPalette& palette,
                            const std::filesystem::path& dir, bool png = false);
ConditionStack import_condition_stack(const std::filesystem::path& dir, LabelPalette* palette = nullptr);

/// 8-bit RGB PNG; `rgb` holds width * height * 3 bytes, row-major.
void write_png(const std::filesystem::path& path, int width, int height, const std::vector<uint8_t>& rgb);
void write_map_png(const std::filesystem::path& path, const SemanticMap& map, const LabelPalette& palette);

}  // namespace geniedrive::render
