#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/core/rng.hpp"
#include "geniedrive/core/scene_gen.hpp"
#include "geniedrive/render/splat.hpp"

using namespace geniedrive;
using namespace geniedrive::render;

namespace {

const LabelPalette kPalette = LabelPalette::standard(6);

Camera forward_camera(int size = 33) {
  // Looking down +x from the origin; odd size puts the principal point mid-pixel.
  return Camera::look({0, 0, 0}, 0.0, 0.0, 1.2, size, size);
}

OccupancyGrid random_grid(Rng& rng, double fill) {
  auto g = OccupancyGrid::filled(8, 8, 4, 0, 0.5, {1.0, -2.0, -1.0});
  for (auto& l : g.labels)
    if (rng.uniform() < fill) l = static_cast<uint8_t>(1 + rng.uniform_int(0, 4));
  return g;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("geniedrive_render_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Primitives, CountsMatchOccupiedVoxels) {
  auto empty = OccupancyGrid::filled(4, 4, 2, 0);
  EXPECT_TRUE(voxels_to_primitives(empty, kPalette, 0.95).empty());

  auto three = OccupancyGrid::filled(4, 4, 2, 0);
  three.set(0, 0, 0, 1);
  three.set(1, 2, 1, 2);
  three.set(3, 3, 1, 5);
  auto prims = voxels_to_primitives(three, kPalette, 0.95);
  ASSERT_EQ(prims.size(), 3u);
  std::vector<int> classes;
  for (const auto& p : prims) {
    classes.push_back(p.class_id);
    EXPECT_DOUBLE_EQ(p.radius, 0.25);
    EXPECT_DOUBLE_EQ(p.opacity, 0.95);
  }
  EXPECT_EQ(classes, (std::vector<int>{1, 2, 5}));
  EXPECT_EQ(prims[1].center, three.voxel_center(1, 2, 1));

  Rng rng(7);
  for (int s = 0; s < 20; ++s) {
    auto g = random_grid(rng, rng.uniform());
    EXPECT_EQ(voxels_to_primitives(g, kPalette, 0.95).size(), g.count_not(0));
  }
  EXPECT_THROW(voxels_to_primitives(three, kPalette, 0.0), ConfigError);
}

TEST(Splat, SinglePrimitiveOnAxis) {
  auto cam = forward_camera();
  std::vector<Primitive> prims{{{5.0, 0.0, 0.0}, 3, 0.95, 0.25}};
  const int pr = static_cast<int>(cam.cy()), pc = static_cast<int>(cam.cx());
  // Square: side 2 * 0.25 * f / 5 around the principal point. Silhouette: the
  // cube's front face, 0.5 m wide at 4.75 m.
  const double square_side = std::max(1.0, 0.5 * cam.fx() / 5.0);
  const double face_side = 0.5 * cam.fx() / 4.75;
  for (auto mode : {Footprint::Square, Footprint::Silhouette}) {
    SplatOptions opt;
    opt.footprint = mode;
    auto map = splat(prims, cam, kPalette, opt);
    EXPECT_EQ(map.at(pr, pc), 3);
    const double half = (mode == Footprint::Square ? square_side : face_side) / 2;
    int labeled = 0;
    for (int r = 0; r < map.height; ++r)
      for (int c = 0; c < map.width; ++c) {
        const bool inside = std::abs(c + 0.5 - cam.cx()) < half && std::abs(r + 0.5 - cam.cy()) < half;
        EXPECT_EQ(map.at(r, c), inside ? 3 : kBackground) << r << "," << c;
        labeled += inside;
      }
    EXPECT_GE(labeled, 1);
  }
}

TEST(Splat, SubPixelPrimitiveKeepsOnePixel) {
  auto cam = forward_camera();
  std::vector<Primitive> prims{{{5.0, 0.0, 0.0}, 2, 0.95, 0.01}};
  for (auto mode : {Footprint::Square, Footprint::Silhouette}) {
    SplatOptions opt;
    opt.footprint = mode;
    auto map = splat(prims, cam, kPalette, opt);
    EXPECT_EQ(std::count(map.labels.begin(), map.labels.end(), 2), 1);
  }
}

TEST(Splat, CompositingPrefersNearPrimitive) {
  auto cam = forward_camera();
  // Far primitive listed first: sorting is internal.
  std::vector<Primitive> prims{{{8.0, 0.0, 0.0}, 2, 0.95, 0.25}, {{4.0, 0.0, 0.0}, 4, 0.95, 0.25}};
  auto map = splat(prims, cam, kPalette);
  EXPECT_EQ(map.at(static_cast<int>(cam.cy()), static_cast<int>(cam.cx())), 4);
  // 0.95 vs 0.05 * 0.95 = 0.0475.
  EXPECT_NEAR(0.95 * (1 - 0.95), 0.0475, 1e-15);

  // With a thin near layer the far class dominates: 0.3 vs 0.7 * 0.95.
  prims[1].opacity = 0.3;
  map = splat(prims, cam, kPalette);
  EXPECT_EQ(map.at(static_cast<int>(cam.cy()), static_cast<int>(cam.cx())), 2);
}

TEST(Splat, TiesGoToLowestClass) {
  auto cam = forward_camera();
  // Same depth, same opacity 1 / 2: weights 0.5 and 0.25, so the first in
  // sort order wins; with alpha 1/3 and a third primitive the classes tie.
  std::vector<Primitive> prims{{{5.0, 0.0, 0.0}, 5, 0.5, 0.25}, {{5.0, 0.0, 0.0}, 2, 0.5, 0.25}};
  auto map = splat(prims, cam, kPalette);
  EXPECT_EQ(map.at(static_cast<int>(cam.cy()), static_cast<int>(cam.cx())), 2);
  // Exact tie: class 3 gets 0.5, class 1 gets 0.25 + 0.25 (two layers behind).
  std::vector<Primitive> tie{{{5.0, 0.0, 0.0}, 3, 0.5, 0.25}, {{6.0, 0.0, 0.0}, 1, 0.5, 0.25},
                             {{7.0, 0.0, 0.0}, 1, 1.0, 0.25}};
  map = splat(tie, cam, kPalette);
  EXPECT_EQ(map.at(static_cast<int>(cam.cy()), static_cast<int>(cam.cx())), 1);
}

TEST(Splat, EmptyAndBehindCamera) {
  auto cam = forward_camera();
  EXPECT_EQ(splat({}, cam, kPalette), SemanticMap::blank(cam.width, cam.height));
  std::vector<Primitive> behind{{{-5.0, 0.0, 0.0}, 1, 0.95, 0.25}};
  EXPECT_EQ(splat(behind, cam, kPalette), SemanticMap::blank(cam.width, cam.height));
}

TEST(Splat, RejectsDegenerateCameraAndBadClass) {
  auto cam = forward_camera();
  auto bad = cam;
  bad.K[0] = 0.0;
  EXPECT_THROW(splat({}, bad, kPalette), ConfigError);
  bad = cam;
  bad.K[4] = -1.0;
  auto g = OccupancyGrid::filled(2, 2, 2, 0);
  EXPECT_THROW(raymarch_oracle(g, bad, kPalette), ConfigError);
  std::vector<Primitive> free_prim{{{5.0, 0.0, 0.0}, 0, 0.95, 0.25}};
  EXPECT_THROW(splat(free_prim, cam, kPalette), ConfigError);
}

TEST(Splat, PermutationInvariant) {
  Rng rng(11);
  auto cam = forward_camera(24);
  for (int s = 0; s < 10; ++s) {
    auto prims = voxels_to_primitives(random_grid(rng, 0.3), kPalette, 0.5 + 0.5 * rng.uniform());
    for (auto& p : prims) p.opacity = 0.3 + 0.7 * rng.uniform();
    auto ref = splat(prims, cam, kPalette);
    for (int k = 0; k < 3; ++k) {
      for (size_t i = prims.size(); i > 1; --i) std::swap(prims[i - 1], prims[rng.uniform_int(0, static_cast<int>(i) - 1)]);
      EXPECT_EQ(splat(prims, cam, kPalette), ref);
    }
  }
}

TEST(Splat, MonotoneOcclusion) {
  Rng rng(12);
  auto cam = forward_camera(24);
  for (int s = 0; s < 10; ++s) {
    auto g = random_grid(rng, 0.2);
    auto prims = voxels_to_primitives(g, kPalette, 0.95);
    auto before = splat(prims, cam, kPalette);
    // An opaque blocker nearer than the whole grid.
    Primitive blocker{{0.8, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)}, static_cast<int>(1 + rng.uniform_int(0, 4)), 1.0, 0.1};
    prims.push_back(blocker);
    auto after = splat(prims, cam, kPalette);
    for (size_t i = 0; i < before.labels.size(); ++i) {
      if (after.labels[i] != before.labels[i]) EXPECT_EQ(after.labels[i], blocker.class_id);
    }
  }
}

TEST(Splat, EarlyExitMatchesFullComposite) {
  Rng rng(13);
  auto cam = forward_camera(24);
  SplatOptions full;
  full.early_exit = false;
  for (int s = 0; s < 10; ++s) {
    auto prims = voxels_to_primitives(random_grid(rng, 0.5), kPalette, 0.5);
    for (auto& p : prims) p.opacity = 0.5 + 0.5 * rng.uniform();
    EXPECT_EQ(splat(prims, cam, kPalette), splat(prims, cam, kPalette, full));
  }
}

TEST(Oracle, SingleVoxelMatchesSplat) {
  auto g = OccupancyGrid::filled(16, 16, 4, 0, 0.5, {0.0, -4.0, -1.0});
  g.set(8, 8, 2, 3);  // center (4.25, 0.25, 0.25)
  auto cam = Camera::look({0, 0.25, 0.25}, 0.0, 0.0, 1.2, 33, 33);
  auto oracle = raymarch_oracle(g, cam, kPalette);
  auto splatted = splat(voxels_to_primitives(g, kPalette, 0.99), cam, kPalette);
  EXPECT_EQ(oracle.at(16, 16), 3);
  EXPECT_EQ(oracle, splatted);
}

TEST(Oracle, AllFreeIsBackground) {
  auto g = OccupancyGrid::filled(8, 8, 4, 0, 0.5, {-2.0, -2.0, -1.0});
  auto cam = Camera::look({0, 0, 0}, 0.7, 0.1, 1.5, 16, 16);
  EXPECT_EQ(raymarch_oracle(g, cam, kPalette), SemanticMap::blank(16, 16));
}

TEST(Oracle, AgreesWithSplatOnGeneratedScenes) {
  SceneGenConfig cfg;
  cfg.frames = 2;
  double worst = 1.0, total = 0.0;
  int maps = 0;
  for (int s = 0; s < 20; ++s) {
    auto seq = generate_synthetic_sequence(cfg, 500 + s);
    const auto prims = voxels_to_primitives(seq.frames[0], kPalette, 0.99);
    for (const auto& cam : seq.camera_rig) {
      const double a = agreement(splat(prims, cam, kPalette), raymarch_oracle(seq.frames[0], cam, kPalette));
      worst = std::min(worst, a);
      total += a;
      ++maps;
    }
  }
  RecordProperty("mean_agreement", std::to_string(total / maps));
  EXPECT_GE(total / maps, 0.99) << "worst map " << worst;
}

TEST(RenderSequence, CountsAndDeterminism) {
  SceneGenConfig cfg;
  cfg.static_world = true;
  auto seq = generate_synthetic_sequence(cfg, 3);
  auto rig = make_camera_rig(6, 16, 16);
  auto stack = render_sequence(seq.frames, rig, kPalette);
  EXPECT_EQ(stack.views, 6);
  EXPECT_EQ(stack.frames, 10);
  EXPECT_EQ(stack.maps.size(), 60u);
  EXPECT_EQ(render_sequence(seq.frames, rig, kPalette), stack);

  std::vector<OccupancyGrid> same(3, seq.frames[0]);
  auto still = render_sequence(same, rig, kPalette);
  for (int v = 0; v < 6; ++v) {
    EXPECT_EQ(still.at(v, 0), still.at(v, 1));
    EXPECT_EQ(still.at(v, 1), still.at(v, 2));
  }
  EXPECT_THROW(render_sequence(same, {}, kPalette), ConfigError);
}

TEST(RenderSequence, ExportImportRoundTrip) {
  SceneGenConfig cfg;
  cfg.frames = 3;
  auto seq = generate_synthetic_sequence(cfg, 4);
  auto stack = render_sequence(seq.frames, seq.camera_rig, kPalette);
  auto dir = scratch("roundtrip");
  export_condition_stack(stack, kPalette, dir, true);
  EXPECT_TRUE(std::filesystem::exists(dir / "cond_manifest"));
  EXPECT_TRUE(std::filesystem::exists(dir / "view1_frame2.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "view0_frame0.png"));
  EXPECT_EQ(std::filesystem::file_size(dir / "view0_frame0.bin"), 8u + 8u + 32u * 32u);

  LabelPalette pal;
  auto back = import_condition_stack(dir, &pal);
  EXPECT_EQ(back, stack);
  EXPECT_EQ(pal.n_classes, kPalette.n_classes);
  EXPECT_EQ(pal.colors, kPalette.colors);

  // Corrupt magic and truncated payload.
  {
    std::fstream f(dir / "view0_frame1.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(import_condition_stack(dir), FormatError);
  export_condition_stack(stack, kPalette, dir);
  std::filesystem::resize_file(dir / "view1_frame0.bin", 100);
  EXPECT_THROW(import_condition_stack(dir), TruncatedError);
  std::filesystem::remove_all(dir);
}
