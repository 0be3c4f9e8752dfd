#include "geniedrive/render/splat.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <nlohmann/json.hpp>
#include <tuple>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/core/io.hpp"

namespace geniedrive::render {

using nlohmann::json;

namespace {

constexpr double kNear = 1e-3;

struct Hit {
  double depth;
  int class_id;
  double opacity;
  Vec3 center;

  bool operator<(const Hit& o) const {
    return std::tie(depth, class_id, opacity, center) < std::tie(o.depth, o.class_id, o.opacity, o.center);
  }
};

std::string map_name(int view, int frame, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "view%d_frame%d.%s", view, frame, ext);
  return buf;
}

// Ray/box slab test; returns [t0, t1] or an empty interval.
std::pair<double, double> clip_ray(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return {1.0, 0.0};
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return {t0, t1};
}


using Bounds = std::array<double, 4>;  // u_lo, u_hi, v_lo, v_hi

// Square of side max(1, s) around (u, v).
Bounds square_bounds(double u, double v, double su, double sv) {
  su = std::max(1.0, su), sv = std::max(1.0, sv);
  return {u - 0.5 * su, u + 0.5 * su, v - 0.5 * sv, v + 0.5 * sv};
}

// Image-space bounds of the primitive's cube; empty if a corner is behind the near plane.
std::optional<Bounds> cube_bounds(const Camera& camera, const Primitive& p) {
  const double inf = std::numeric_limits<double>::infinity();
  Bounds b{inf, -inf, inf, -inf};
  for (int corner = 0; corner < 8; ++corner) {
    Vec3 q = p.center;
    for (int a = 0; a < 3; ++a) q[a] += (corner >> a & 1) ? p.radius : -p.radius;
    const auto qc = camera.to_camera(q);
    if (qc[2] <= kNear) return std::nullopt;
    const double qu = camera.fx() * qc[0] / qc[2] + camera.cx(), qv = camera.fy() * qc[1] / qc[2] + camera.cy();
    b = {std::min(b[0], qu), std::max(b[1], qu), std::min(b[2], qv), std::max(b[3], qv)};
  }
  return b;
}

// Pixels whose centers (i + 0.5) lie in [lo, hi), clipped to [0, n).
std::pair<int, int> pixel_span(double lo, double hi, int n) {
  const double first = std::max(0.0, std::ceil(lo - 0.5));
  const double last = std::min(n - 1.0, std::ceil(hi - 0.5) - 1.0);
  if (last < first) return {0, -1};
  return {static_cast<int>(first), static_cast<int>(last)};
}

bool ray_hits_cube(const Vec3& o, const Vec3& d, const Primitive& p) {
  const Vec3 lo{p.center[0] - p.radius, p.center[1] - p.radius, p.center[2] - p.radius};
  const Vec3 hi{p.center[0] + p.radius, p.center[1] + p.radius, p.center[2] + p.radius};
  const auto [t0, t1] = clip_ray(o, d, lo, hi);
  return t0 <= t1;
}

}  // namespace

std::vector<Primitive> voxels_to_primitives(const OccupancyGrid& grid, const LabelPalette& palette, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("primitive opacity must be in (0, 1]");
  std::vector<Primitive> out;
  for (int i = 0; i < grid.H; ++i)
    for (int j = 0; j < grid.W; ++j)
      for (int k = 0; k < grid.D; ++k) {
        const int c = grid.at(i, j, k);
        if (c == palette.free_id) continue;
        out.push_back({grid.voxel_center(i, j, k), c, alpha, 0.5 * grid.voxel_size});
      }
  return out;
}

SemanticMap splat(const std::vector<Primitive>& primitives, const Camera& camera, const LabelPalette& palette,
                  const SplatOptions& options) {
  camera.validate();
  const int W = camera.width, H = camera.height;
  const Vec3 eye = camera.center();
  std::vector<std::vector<Hit>> per_pixel(static_cast<size_t>(W) * H);
  for (const auto& p : primitives) {
    if (p.class_id < 0 || p.class_id >= palette.n_classes || p.class_id == palette.free_id) {
      throw ConfigError("primitive class " + std::to_string(p.class_id) + " is not a drawable class");
    }
    const auto pc = camera.to_camera(p.center);
    if (pc[2] <= kNear) continue;
    const double u = camera.fx() * pc[0] / pc[2] + camera.cx();
    const double v = camera.fy() * pc[1] / pc[2] + camera.cy();
    const Hit hit{pc[2], p.class_id, p.opacity, p.center};
    auto bounds = square_bounds(u, v, 2.0 * p.radius * camera.fx() / pc[2], 2.0 * p.radius * camera.fy() / pc[2]);
    const bool silhouette = options.footprint == Footprint::Silhouette;
    if (silhouette) {
      if (auto cube = cube_bounds(camera, p)) bounds = *cube;
    }
    const auto [c0, c1] = pixel_span(bounds[0], bounds[1], W);
    const auto [r0, r1] = pixel_span(bounds[2], bounds[3], H);
    bool covered = false;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        if (silhouette && !ray_hits_cube(eye, camera.ray_direction(c + 0.5, r + 0.5), p)) continue;
        per_pixel[static_cast<size_t>(r) * W + c].push_back(hit);
        covered = true;
      }
    // Sub-pixel primitives still claim the pixel under their center.
    if (silhouette && !covered && u >= 0 && u < W && v >= 0 && v < H) {
      per_pixel[static_cast<size_t>(v) * W + static_cast<size_t>(u)].push_back(hit);
    }
  }
  auto out = SemanticMap::blank(W, H);
  std::vector<double> weight(static_cast<size_t>(palette.n_classes));
  for (size_t px = 0; px < per_pixel.size(); ++px) {
    auto& hits = per_pixel[px];
    if (hits.empty()) continue;
    std::sort(hits.begin(), hits.end());
    std::fill(weight.begin(), weight.end(), 0.0);
    double T = 1.0, total = 0.0;
    for (const auto& h : hits) {
      const double w = h.opacity * T;
      weight[static_cast<size_t>(h.class_id)] += w;
      total += w;
      T *= 1.0 - h.opacity;
      if (options.early_exit && T < options.transmittance_cutoff) break;
    }
    if (total <= 0.0) continue;
    // max_element returns the first maximum, i.e. the lowest class id on ties.
    out.labels[px] = static_cast<uint8_t>(std::max_element(weight.begin(), weight.end()) - weight.begin());
  }
  return out;
}

std::vector<int64_t> first_hits(const OccupancyGrid& grid, const Camera& camera, const LabelPalette& palette) {
  camera.validate();
  std::vector<int64_t> out(static_cast<size_t>(camera.width) * camera.height, -1);
  const Vec3 lo = grid.origin;
  const Vec3 hi{lo[0] + grid.H * grid.voxel_size, lo[1] + grid.W * grid.voxel_size, lo[2] + grid.D * grid.voxel_size};
  const Vec3 o = camera.center();
  const double step = grid.voxel_size / 8.0;
  for (int r = 0; r < camera.height; ++r)
    for (int c = 0; c < camera.width; ++c) {
      const auto d = camera.ray_direction(c + 0.5, r + 0.5);
      auto [t0, t1] = clip_ray(o, d, lo, hi);
      // Points behind the near plane are culled by the splatter as well.
      const auto dc = camera.to_camera({o[0] + d[0], o[1] + d[1], o[2] + d[2]});
      const double t_near = kNear / std::max(dc[2], 1e-12);
      for (double t = std::max(t0, t_near) + 0.5 * step; t <= t1; t += step) {
        const auto v = grid.voxel_of({o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]});
        if (!v) continue;
        const size_t idx = grid.index((*v)[0], (*v)[1], (*v)[2]);
        if (grid.labels[idx] != palette.free_id) {
          out[static_cast<size_t>(r) * camera.width + c] = static_cast<int64_t>(idx);
          break;
        }
      }
    }
  return out;
}

SemanticMap raymarch_oracle(const OccupancyGrid& grid, const Camera& camera, const LabelPalette& palette) {
  const auto hits = first_hits(grid, camera, palette);
  auto out = SemanticMap::blank(camera.width, camera.height);
  for (size_t i = 0; i < hits.size(); ++i)
    if (hits[i] >= 0) out.labels[i] = grid.labels[static_cast<size_t>(hits[i])];
  return out;
}

double agreement(const SemanticMap& a, const SemanticMap& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("semantic maps differ in size");
  size_t same = 0;
  for (size_t i = 0; i < a.labels.size(); ++i) same += a.labels[i] == b.labels[i];
  return a.labels.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(a.labels.size());
}

ConditionStack render_sequence(const std::vector<OccupancyGrid>& frames, const std::vector<Camera>& rig,
                               const LabelPalette& palette, double alpha) {
  if (rig.empty()) throw ConfigError("render_sequence needs at least one camera");
  ConditionStack out;
  out.views = static_cast<int>(rig.size());
  out.frames = static_cast<int>(frames.size());
  for (const auto& f : frames) {
    const auto prims = voxels_to_primitives(f, palette, alpha);
    for (const auto& cam : rig) out.maps.push_back(splat(prims, cam, palette));
  }
  return out;
}

void export_condition_stack(const ConditionStack& stack, const LabelPalette& palette, const std::filesystem::path& dir,
                            bool png) {
  if (stack.maps.size() != static_cast<size_t>(stack.views) * stack.frames) throw ShapeError("condition stack size");
  std::filesystem::create_directories(dir);
  json colors = json::array();
  for (const auto& c : palette.colors) colors.push_back({c[0], c[1], c[2]});
  const int h = stack.maps.empty() ? 0 : stack.maps.front().height;
  const int w = stack.maps.empty() ? 0 : stack.maps.front().width;
  json manifest = {{"views", stack.views},
                   {"frames", stack.frames},
                   {"height", h},
                   {"width", w},
                   {"background", kBackground},
                   {"palette", {{"n_classes", palette.n_classes}, {"free_id", palette.free_id}, {"names", palette.names},
                                {"colors", colors}}}};
  {
    std::ofstream m(dir / "cond_manifest");
    m << manifest.dump(2) << '\n';
    if (!m) throw Error("cannot write " + (dir / "cond_manifest").string());
  }
  for (int t = 0; t < stack.frames; ++t)
    for (int v = 0; v < stack.views; ++v) {
      const auto& map = stack.at(v, t);
      std::ofstream out(dir / map_name(v, t, "bin"), std::ios::binary);
      out.write(kSemanticMapMagic, 8);
      write_u32(out, static_cast<uint32_t>(map.height));
      write_u32(out, static_cast<uint32_t>(map.width));
      out.write(reinterpret_cast<const char*>(map.labels.data()), static_cast<std::streamsize>(map.labels.size()));
      if (!out) throw Error("cannot write semantic map");
      if (png) write_map_png(dir / map_name(v, t, "png"), map, palette);
    }
}

ConditionStack import_condition_stack(const std::filesystem::path& dir, LabelPalette* palette) {
  std::ifstream m(dir / "cond_manifest");
  if (!m) throw FormatError("missing cond_manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(m);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed cond_manifest: ") + e.what());
  }
  ConditionStack stack;
  int h = 0, w = 0;
  try {
    stack.views = manifest.at("views").get<int>();
    stack.frames = manifest.at("frames").get<int>();
    h = manifest.at("height").get<int>();
    w = manifest.at("width").get<int>();
    if (palette) {
      const auto& p = manifest.at("palette");
      palette->n_classes = p.at("n_classes").get<int>();
      palette->free_id = p.at("free_id").get<int>();
      palette->names = p.at("names").get<std::vector<std::string>>();
      palette->colors.clear();
      for (const auto& c : p.at("colors")) palette->colors.push_back({c[0].get<uint8_t>(), c[1].get<uint8_t>(), c[2].get<uint8_t>()});
      palette->validate();
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed cond_manifest: ") + e.what());
  }
  for (int t = 0; t < stack.frames; ++t)
    for (int v = 0; v < stack.views; ++v) {
      std::ifstream in(dir / map_name(v, t, "bin"), std::ios::binary);
      if (!in) throw FormatError("missing " + map_name(v, t, "bin"));
      char magic[8];
      in.read(magic, 8);
      if (in.gcount() != 8) throw TruncatedError("semantic map header is truncated");
      if (std::memcmp(magic, kSemanticMapMagic, 8) != 0) throw FormatError("bad semantic map magic");
      const int mh = static_cast<int>(read_u32(in)), mw = static_cast<int>(read_u32(in));
      if (mh != h || mw != w) throw ShapeError("semantic map size differs from the manifest");
      auto map = SemanticMap::blank(mw, mh);
      in.read(reinterpret_cast<char*>(map.labels.data()), static_cast<std::streamsize>(map.labels.size()));
      if (in.gcount() != static_cast<std::streamsize>(map.labels.size())) throw TruncatedError("semantic map is truncated");
      stack.maps.push_back(std::move(map));
    }
  return stack;
}

void write_png(const std::filesystem::path& path, int width, int height, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(width) * height * 3) throw ShapeError("RGB buffer size mismatch");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw Error("cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<size_t>(r) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void write_map_png(const std::filesystem::path& path, const SemanticMap& map, const LabelPalette& palette) {
  std::vector<uint8_t> rgb;
  rgb.reserve(map.labels.size() * 3);
  for (uint8_t l : map.labels) {
    const auto& c = l < palette.colors.size() ? palette.colors[l] : kBackgroundColor;
    rgb.insert(rgb.end(), c.begin(), c.end());
  }
  write_png(path, map.width, map.height, rgb);
}

}  // namespace geniedrive::render
