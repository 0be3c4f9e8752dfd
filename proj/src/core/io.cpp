#include "geniedrive/core/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "geniedrive/core/errors.hpp"

namespace geniedrive {

namespace fs = std::filesystem;
using nlohmann::json;

void write_u32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw TruncatedError("unexpected end of data while reading a uint32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_grid_block(std::ostream& out, const OccupancyGrid& grid) {
  out.write(kGridMagic, 8);
  write_u32(out, static_cast<uint32_t>(grid.H));
  write_u32(out, static_cast<uint32_t>(grid.W));
  write_u32(out, static_cast<uint32_t>(grid.D));
  out.write(reinterpret_cast<const char*>(grid.labels.data()), static_cast<std::streamsize>(grid.labels.size()));
}

OccupancyGrid read_grid_block(std::istream& in, double voxel_size, const Vec3& origin) {
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8) throw TruncatedError("frame block ends inside its magic header");
  if (std::memcmp(magic, kGridMagic, 8) != 0) throw FormatError("bad frame magic (expected OCCGRIDv)");
  const uint32_t H = read_u32(in), W = read_u32(in), D = read_u32(in);
  if (H == 0 || W == 0 || D == 0 || H > 4096 || W > 4096 || D > 4096) {
    throw FormatError("implausible frame dimensions in block header");
  }
  OccupancyGrid g = OccupancyGrid::filled(static_cast<int>(H), static_cast<int>(W), static_cast<int>(D), 0,
                                          voxel_size, origin);
  in.read(reinterpret_cast<char*>(g.labels.data()), static_cast<std::streamsize>(g.labels.size()));
  if (static_cast<size_t>(in.gcount()) != g.labels.size()) throw TruncatedError("frame label payload is truncated");
  return g;
}

namespace {

json transform_json(const RigidTransform2D& t) { return json::array({t.theta, t.tx, t.ty}); }

RigidTransform2D transform_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("transform must be [theta, tx, ty]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

template <size_t N>
std::array<double, N> fixed_array(const json& j, const char* what) {
  if (!j.is_array() || j.size() != N) throw FormatError(std::string(what) + " has the wrong number of entries");
  std::array<double, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = j[i].get<double>();
  return out;
}

const json& field(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("manifest is missing key '") + key + "'");
  return j.at(key);
}

}  // namespace

void save_sequence(const SceneSequence& seq, const fs::path& dir) {
  if (seq.frames.empty()) throw ConsistencyError("cannot save a sequence without frames");
  fs::create_directories(dir);
  const auto& f0 = seq.frames.front();
  json m;
  m["version"] = kSequenceFormatVersion;
  m["H"] = f0.H;
  m["W"] = f0.W;
  m["D"] = f0.D;
  m["n_classes"] = seq.n_classes;
  m["free_id"] = seq.free_id;
  m["fps"] = seq.fps;
  m["frame_count"] = seq.frames.size();
  m["voxel_size"] = f0.voxel_size;
  m["origin"] = f0.origin;
  m["ego_poses"] = json::array();
  for (const auto& p : seq.ego_poses) m["ego_poses"].push_back(transform_json(p));
  m["controls"] = json::array();
  for (const auto& c : seq.controls) {
    json jc;
    jc["command"] = to_string(c.command);
    jc["waypoints"] = c.waypoints;
    jc["gt_transform"] = transform_json(c.gt_transform);
    m["controls"].push_back(jc);
  }
  m["cameras"] = json::array();
  for (const auto& cam : seq.camera_rig) {
    m["cameras"].push_back({{"K", cam.K}, {"extrinsic", cam.extrinsic}, {"width", cam.width}, {"height", cam.height}});
  }
  {
    std::ofstream out(dir / "manifest");
    if (!out) throw Error("cannot write " + (dir / "manifest").string());
    out << m.dump(1) << '\n';
  }
  std::ofstream blob(dir / "frames.bin", std::ios::binary);
  if (!blob) throw Error("cannot write " + (dir / "frames.bin").string());
  for (const auto& f : seq.frames) write_grid_block(blob, f);
}

SceneSequence load_sequence(const fs::path& dir) {
  std::ifstream in(dir / "manifest");
  if (!in) throw FormatError("missing manifest in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  SceneSequence seq;
  int H, W, D;
  size_t frame_count;
  double voxel_size;
  Vec3 origin;
  try {
    if (field(m, "version").get<int>() != kSequenceFormatVersion) throw FormatError("unsupported sequence version");
    H = field(m, "H").get<int>();
    W = field(m, "W").get<int>();
    D = field(m, "D").get<int>();
    seq.n_classes = field(m, "n_classes").get<int>();
    seq.free_id = field(m, "free_id").get<int>();
    seq.fps = field(m, "fps").get<double>();
    frame_count = field(m, "frame_count").get<size_t>();
    voxel_size = field(m, "voxel_size").get<double>();
    origin = m.contains("origin") ? fixed_array<3>(m["origin"], "origin")
                                  : Vec3{-0.5 * H * voxel_size, -0.5 * W * voxel_size, -voxel_size};
    for (const auto& p : field(m, "ego_poses")) seq.ego_poses.push_back(transform_from(p));
    for (const auto& jc : field(m, "controls")) {
      ControlSignal c;
      c.command = command_from_string(field(jc, "command").get<std::string>());
      for (const auto& w : field(jc, "waypoints")) c.waypoints.push_back(fixed_array<2>(w, "waypoint"));
      c.gt_transform = transform_from(field(jc, "gt_transform"));
      seq.controls.push_back(std::move(c));
    }
    for (const auto& jc : field(m, "cameras")) {
      Camera cam;
      cam.K = fixed_array<9>(field(jc, "K"), "K");
      cam.extrinsic = fixed_array<16>(field(jc, "extrinsic"), "extrinsic");
      cam.width = field(jc, "width").get<int>();
      cam.height = field(jc, "height").get<int>();
      seq.camera_rig.push_back(cam);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest field has the wrong type: ") + e.what());
  }

  std::ifstream blob(dir / "frames.bin", std::ios::binary);
  if (!blob) throw FormatError("missing frames.bin in " + dir.string());
  while (blob.peek() != std::char_traits<char>::eof()) {
    auto g = read_grid_block(blob, voxel_size, origin);
    if (g.H != H || g.W != W || g.D != D) {
      throw ShapeError("frame " + std::to_string(seq.frames.size()) + " is " + std::to_string(g.H) + "x" +
                       std::to_string(g.W) + "x" + std::to_string(g.D) + " but the manifest declares " +
                       std::to_string(H) + "x" + std::to_string(W) + "x" + std::to_string(D));
    }
    seq.frames.push_back(std::move(g));
  }
  if (seq.frames.size() != frame_count) {
    throw ConsistencyError("manifest declares " + std::to_string(frame_count) + " frames but frames.bin holds " +
                           std::to_string(seq.frames.size()));
  }
  seq.validate();
  return seq;
}

std::vector<fs::path> list_sequences(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest") && fs::exists(e.path() / "frames.bin")) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace geniedrive
