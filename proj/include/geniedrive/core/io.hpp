#pragma once

#include <filesystem>
#include <iosfwd>

#include "geniedrive/core/types.hpp"

namespace geniedrive {

inline constexpr char kGridMagic[8] = {'O', 'C', 'C', 'G', 'R', 'I', 'D', 'v'};
inline constexpr int kSequenceFormatVersion = 1;

/// Writes `dir/manifest` (JSON) and `dir/frames.bin` (one magic-prefixed block per frame).
void save_sequence(const SceneSequence& seq, const std::filesystem::path& dir);

/// Errors: FormatError (bad magic, malformed manifest), ConsistencyError (frame
/// count disagreement), TruncatedError (short blob), ShapeError (block dims differ
/// from the manifest).
SceneSequence load_sequence(const std::filesystem::path& dir);

/// Single-frame block codec shared with other binary artifacts.
void write_grid_block(std::ostream& out, const OccupancyGrid& grid);
OccupancyGrid read_grid_block(std::istream& in, double voxel_size, const Vec3& origin);

void write_u32(std::ostream& out, uint32_t v);
/// Throws TruncatedError on EOF.
uint32_t read_u32(std::istream& in);

/// All sequences below `root` whose directory holds a manifest, sorted by name.
std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& root);

}  // namespace geniedrive
