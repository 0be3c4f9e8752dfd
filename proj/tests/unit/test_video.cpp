#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/video/mva_video.hpp"
#include "gradcheck.hpp"

using namespace geniedrive;
using namespace geniedrive::video;
using geniedrive::testing::gradcheck;
using geniedrive::testing::random_tensor;
using nn::Tensor;

namespace {

// Small enough for unit tests; patch 2 keeps the video embedding unsqueezed.
VideoConfig tiny_config() {
  VideoConfig c;
  c.frames = 2;
  c.height = c.width = 16;
  c.patch = 2;
  c.dim = 32;
  c.cond_dim = 8;
  c.blocks = 2;
  return c;
}

MvaParams make_mva(int64_t dim, int heads, uint64_t seed, MvaNorm norm = MvaNorm::Group, double eta = 1.0) {
  nn::ParamStore ps;
  Rng rng(seed);
  MvaParams p;
  p.attn = nn::MultiHeadAttention(ps, "mva", dim, heads, rng);
  p.norm = norm;
  p.eta = eta;
  return p;
}

std::pair<double, double> stats(std::span<const double> v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("geniedrive_video_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Rearrange, RoundTripIsIdentity) {
  Rng rng(1);
  for (auto [n, t, h, w, C] : std::vector<std::array<int, 5>>{{2, 3, 2, 4, 5}, {3, 1, 4, 2, 2}, {1, 2, 3, 3, 4}}) {
    auto z = random_tensor({n, static_cast<int64_t>(t) * h * w, C}, rng);
    auto g = rearrange_views(z, t, h, w);
    EXPECT_EQ(g.shape(), (nn::Shape{static_cast<int64_t>(t) * h, static_cast<int64_t>(n) * w, C}));
    auto back = restore_views(g, n, t, h, w);
    ASSERT_EQ(back.shape(), z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) EXPECT_EQ(back.at(i), z.at(i));
  }
}

TEST(Rearrange, SingleViewIsReshape) {
  Rng rng(2);
  auto z = random_tensor({1, 2 * 3 * 4, 5}, rng);
  auto g = rearrange_views(z, 2, 3, 4);
  EXPECT_EQ(g.shape(), (nn::Shape{6, 4, 5}));
  for (int64_t i = 0; i < z.numel(); ++i) EXPECT_EQ(g.at(i), z.at(i));
}

TEST(Rearrange, MatchesEnumeratedIndexMap) {
  // n = 2, t = h = w = 2, C = 1; entry value = its flat input index.
  const int n = 2, t = 2, h = 2, w = 2;
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<size_t>(i)] = i;
  auto g = rearrange_views(Tensor::from({n, t * h * w, 1}, v), t, h, w);
  for (int view = 0; view < n; ++view)
    for (int ti = 0; ti < t; ++ti)
      for (int hi = 0; hi < h; ++hi)
        for (int wi = 0; wi < w; ++wi) {
          const int in = view * (t * h * w) + (ti * h + hi) * w + wi;
          const int out = (ti * h + hi) * (n * w) + view * w + wi;
          EXPECT_EQ(g.at(out), in);
        }
  // Spot values written out by hand: group (t=0, h=1) holds view0 tokens 2,3 then view1 tokens 10,11.
  EXPECT_EQ(g.at(4), 2);
  EXPECT_EQ(g.at(5), 3);
  EXPECT_EQ(g.at(6), 10);
  EXPECT_EQ(g.at(7), 11);
  EXPECT_THROW(rearrange_views(Tensor::zeros({2, 7, 1}), 2, 2, 2), ShapeError);
  EXPECT_THROW(restore_views(Tensor::zeros({4, 5, 1}), 2, 2, 2, 2), ShapeError);
}

TEST(NormalizedMva, ZeroEtaPassesThrough) {
  Rng rng(3);
  auto p = make_mva(8, 2, 4, MvaNorm::Group, 0.0);
  for (int s = 0; s < 5; ++s) {
    auto z = random_tensor({3, 6, 8}, rng, 1.0 + s);
    auto out = normalized_mva(z, p);
    for (int64_t i = 0; i < z.numel(); ++i) ASSERT_EQ(out.at(i), z.at(i));
  }
  p.eta = -1.0;
  EXPECT_THROW(normalized_mva(Tensor::zeros({1, 2, 8}), p), ConfigError);
}

// The epsilon in (sigma_M + eps) shrinks the branch std by sigma_M / (sigma_M + eps),
// so the std bound is relative to sigma_Z; the exact factor is checked as well.
TEST(NormalizedMva, BranchMatchesGroupStatistics) {
  Rng rng(5);
  for (int s = 0; s < 10; ++s) {
    auto p = make_mva(8, 2, 100 + s);
    auto raw = p;
    raw.norm = MvaNorm::None;
    // Offsets and scales differ per group.
    auto z = random_tensor({4, 6, 8}, rng, 3.0);
    auto zm = z.mutable_data();
    for (int64_t g = 0; g < 4; ++g)
      for (int64_t i = 0; i < 48; ++i) zm[static_cast<size_t>(g * 48 + i)] = zm[static_cast<size_t>(g * 48 + i)] * (1 + g) + 2.0 * g;
    auto b = mva_branch(z, p);
    auto m = mva_branch(z, raw);
    for (int64_t g = 0; g < 4; ++g) {
      auto [mz, sz] = stats(z.data().subspan(static_cast<size_t>(g * 48), 48));
      auto [mb, sb] = stats(b.data().subspan(static_cast<size_t>(g * 48), 48));
      auto [mm, sm] = stats(m.data().subspan(static_cast<size_t>(g * 48), 48));
      EXPECT_NEAR(mb, mz, 1e-5 * std::max(1.0, std::abs(mz)));
      EXPECT_NEAR(sb, sz, 1e-5 * sz);
      EXPECT_NEAR(sb, sz * sm / (sm + 1e-5), 1e-12 * sz);
    }
  }
}

TEST(NormalizedMva, PerChannelStatistics) {
  // Per-channel std over few tokens is small, so only the exact factor is tight here.
  Rng rng(6);
  auto p = make_mva(4, 1, 7, MvaNorm::PerChannel);
  auto raw = p;
  raw.norm = MvaNorm::None;
  auto z = random_tensor({2, 5, 4}, rng, 3.0);
  auto b = mva_branch(z, p);
  auto m = mva_branch(z, raw);
  for (int64_t g = 0; g < 2; ++g)
    for (int64_t c = 0; c < 4; ++c) {
      std::vector<double> zc, bc, mc;
      for (int64_t l = 0; l < 5; ++l) {
        zc.push_back(z.at((g * 5 + l) * 4 + c));
        bc.push_back(b.at((g * 5 + l) * 4 + c));
        mc.push_back(m.at((g * 5 + l) * 4 + c));
      }
      auto [mz, sz] = stats(zc);
      auto [mb, sb] = stats(bc);
      auto [mm, sm] = stats(mc);
      EXPECT_NEAR(mb, mz, 1e-5 * std::max(1.0, std::abs(mz)));
      EXPECT_NEAR(sb, sz * sm / (sm + 1e-5), 1e-12 * sz);
      EXPECT_NEAR(sb, sz, 1e-4 * sz);
    }
}

TEST(NormalizedMva, GroupsDoNotMix) {
  Rng rng(8);
  for (auto norm : {MvaNorm::Group, MvaNorm::PerChannel, MvaNorm::None}) {
    auto p = make_mva(4, 2, 9, norm);
    auto z = random_tensor({2, 3, 4}, rng, 2.0);
    auto base = normalized_mva(z, p);
    // Finite-difference probe: perturbing group 1 leaves group 0 bitwise unchanged, and vice versa.
    for (int64_t i = 0; i < z.numel(); ++i) {
      const int64_t group = i / 12;
      auto zp = z.clone();
      zp.mutable_data()[static_cast<size_t>(i)] += 1e-3;
      auto out = normalized_mva(zp, p);
      for (int64_t j = 0; j < 12; ++j) {
        const int64_t other = (1 - group) * 12 + j;
        ASSERT_EQ(out.at(other), base.at(other));
      }
    }
    // Analytic Jacobian block: d out[group 0] / d z[group 1] is exactly zero.
    auto zl = z.clone();
    zl.set_requires_grad(true);
    auto out = normalized_mva(zl, p);
    auto w = random_tensor({2, 3, 4}, rng);
    auto wm = w.mutable_data();
    for (size_t j = 12; j < 24; ++j) wm[j] = 0.0;
    nn::sum(nn::mul(out, w)).backward();
    for (size_t j = 12; j < 24; ++j) EXPECT_EQ(zl.grad()[j], 0.0);
  }
}

TEST(NormalizedMva, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto p = make_mva(4, 2, 11);
  auto z = random_tensor({2, 3, 4}, rng, 2.0);
  auto w = random_tensor({2, 3, 4}, rng);
  std::vector<Tensor> leaves{z, p.attn.q.weight, p.attn.v.weight};
  EXPECT_LT(gradcheck(leaves, [&] { return nn::sum(nn::mul(normalized_mva(z, p), w)); }), 1e-4);
}

TEST(Flow, InterpolationEndpoints) {
  Rng rng(12);
  auto x0 = random_tensor({2, 3}, rng), x1 = random_tensor({2, 3}, rng);
  auto a = flow_interpolate(x0, x1, 0.0);
  auto b = flow_interpolate(x0, x1, 1.0);
  auto c = flow_interpolate(x0, x1, 0.5);
  for (int64_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.xt.at(i), x0.at(i));
    EXPECT_EQ(b.xt.at(i), x1.at(i));
    EXPECT_EQ(c.xt.at(i), (x0.at(i) + x1.at(i)) / 2);
    EXPECT_EQ(c.v.at(i), x1.at(i) - x0.at(i));
  }
  EXPECT_THROW(flow_interpolate(x0, Tensor::zeros({3, 2}), 0.5), ShapeError);
  EXPECT_THROW(flow_interpolate(x0, x1, 1.5), ConfigError);
}

TEST(Flow, OracleModelHasZeroLoss) {
  Rng data_rng(13);
  std::vector<Tensor> x0{random_tensor({2, 4}, data_rng), random_tensor({2, 4}, data_rng)};
  std::vector<Tensor> cond{Tensor::zeros({1}), Tensor::zeros({1})};
  size_t which = 0;
  // Knows x0, so (x_t - x0) / time = x1 - x0.
  VelocityField oracle = [&](const Tensor& x, const Tensor&, double time) {
    auto v = nn::scale(nn::sub(x, x0[which]), 1.0 / time);
    which = (which + 1) % x0.size();
    return v;
  };
  Rng rng(14);
  EXPECT_LT(video_loss(oracle, x0, cond, rng).item(), 1e-20);
}

TEST(Flow, ZeroModelMatchesAnalyticExpectation) {
  // E||x1 - x0||^2 / dim = 2 for independent unit-variance x0 and x1.
  Rng data_rng(15), rng(16);
  VelocityField zero = [](const Tensor& x, const Tensor&, double) { return Tensor::zeros(x.shape()); };
  double total = 0;
  const int samples = 1000;
  for (int s = 0; s < samples; ++s) {
    auto x0 = random_tensor({16}, data_rng);
    total += video_loss(zero, {x0}, {Tensor::zeros({1})}, rng).item();
  }
  EXPECT_NEAR(total / samples, 2.0, 0.1);
}

TEST(Flow, LossGradientOnLinearModel) {
  Rng data_rng(17);
  std::vector<Tensor> x0{random_tensor({3, 4}, data_rng), random_tensor({3, 4}, data_rng)};
  std::vector<Tensor> cond{Tensor::zeros({1}), Tensor::zeros({1})};
  auto a = Tensor::from({1}, {0.3}), b = Tensor::from({1}, {-0.2});
  VelocityField model = [&](const Tensor& x, const Tensor&, double time) {
    return nn::add(nn::mul(x, a), nn::scale(b, time));
  };
  auto loss = [&] {
    Rng rng(18);  // identical draws for every evaluation
    return video_loss(model, x0, cond, rng);
  };
  EXPECT_LT(gradcheck({a, b}, loss), 1e-4);
}

TEST(Flow, LossRejectsNonFinite) {
  VelocityField bad = [](const Tensor& x, const Tensor&, double) {
    return Tensor::full(x.shape(), std::numeric_limits<double>::quiet_NaN());
  };
  Rng rng(19);
  EXPECT_THROW(video_loss(bad, {Tensor::zeros({2})}, {Tensor::zeros({1})}, rng), NumericError);
  EXPECT_THROW(video_loss(bad, {Tensor::zeros({2})}, {}, rng), ShapeError);
}

TEST(Sampler, ConstantFieldIsIntegratedExactly) {
  const nn::Shape shape{2, 3};
  const uint64_t seed = 21;
  auto x1 = initial_noise(shape, seed);
  Rng rng(22);
  auto x0 = random_tensor(shape, rng);
  auto d = nn::sub(x1, x0);
  VelocityField constant = [&](const Tensor&, const Tensor&, double) { return d; };
  for (int steps : {1, 7, 20}) {
    auto out = sample_video(constant, Tensor::zeros({1}), shape, steps, seed);
    for (int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.at(i), x0.at(i), 1e-12);
  }
  EXPECT_THROW(sample_video(constant, Tensor::zeros({1}), shape, 0, seed), ConfigError);
}

TEST(Model, ShapesDeterminismAndInit) {
  auto cfg = tiny_config();
  auto data = make_toy_video_dataset(cfg, 1, 3);
  VideoModel model(cfg, 4);
  auto u = model.velocity(data[0].video, data[0].condition, 0.3);
  EXPECT_EQ(u.shape(), cfg.video_shape());
  // adaLN-zero: the output projection starts at zero.
  for (double v : u.data()) EXPECT_EQ(v, 0.0);
  auto s1 = model.sample(data[0].condition, 3, 9);
  auto s2 = model.sample(data[0].condition, 3, 9);
  EXPECT_EQ(s1.shape(), cfg.video_shape());
  EXPECT_TRUE(std::equal(s1.data().begin(), s1.data().end(), s2.data().begin()));
  EXPECT_THROW(model.velocity(Tensor::zeros({1, 2, 3, 16, 16}), data[0].condition, 0.5), ShapeError);
}

TEST(Model, LossGradientThroughNetwork) {
  VideoConfig cfg;
  cfg.views = 2;
  cfg.frames = 1;
  cfg.height = cfg.width = 4;
  cfg.patch = 2;
  cfg.dim = 8;
  cfg.cond_dim = 2;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.n_labels = 2;
  VideoModel model(cfg, 5);
  // Leave the zero-initialized heads so every path carries gradient.
  Rng rng(6);
  for (const auto& [name, t] : model.params().entries()) {
    auto v = Tensor(t).mutable_data();
    for (auto& x : v) x += 0.3 * rng.normal();
  }
  auto x0 = random_tensor(cfg.video_shape(), rng);
  auto cond = random_tensor(cfg.condition_shape(), rng);
  std::vector<Tensor> leaves;
  for (auto& [name, t] : model.params().entries())
    if (name == "final_proj.weight" || name == "block0.mva.v.weight" || name == "block0.modulation.weight" ||
        name == "cond_embed.weight")
      leaves.push_back(t);
  ASSERT_EQ(leaves.size(), 4u);
  auto loss = [&] {
    Rng r(7);
    return video_loss(model.field(), {x0}, {cond}, r);
  };
  EXPECT_LT(gradcheck(leaves, loss), 1e-4);
}

TEST(Model, NormalizationKeepsBranchStatistics) {
  // At init the normalized branch matches the trunk's scale; the raw one drifts.
  auto cfg = tiny_config();
  auto data = make_toy_video_dataset(cfg, 2, 30);
  double drift_norm = 0, drift_raw = 0;
  for (int seed = 0; seed < 3; ++seed) {
    auto raw_cfg = cfg;
    raw_cfg.norm = MvaNorm::None;
    VideoModel normalized(cfg, seed), raw(raw_cfg, seed);
    for (const auto& ex : data) {
      auto x = nn::add(nn::scale(ex.video, 0.5), nn::scale(initial_noise(cfg.video_shape(), seed), 0.5));
      for (auto s : normalized.branch_stats(x, ex.condition, 0.5)) drift_norm += std::abs(std::log(s.branch_std / s.trunk_std));
      for (auto s : raw.branch_stats(x, ex.condition, 0.5)) drift_raw += std::abs(std::log(s.branch_std / s.trunk_std));
    }
  }
  EXPECT_LT(drift_norm, 0.1 * drift_raw);
}

TEST(Data, ConditionIsOneHot) {
  auto cfg = tiny_config();
  auto data = make_toy_video_dataset(cfg, 2, 31);
  for (const auto& ex : data) {
    EXPECT_EQ(ex.condition.shape(), cfg.condition_shape());
    EXPECT_EQ(ex.video.shape(), cfg.video_shape());
    const int64_t K = cfg.n_labels + 1, HW = 16 * 16;
    for (int64_t v = 0; v < 2; ++v)
      for (int64_t t = 0; t < 2; ++t)
        for (int64_t px = 0; px < HW; ++px) {
          double s = 0;
          int hot = -1;
          for (int64_t k = 0; k < K; ++k) {
            const double x = ex.condition.at(((v * 2 + t) * K + k) * HW + px);
            s += x;
            if (x == 1.0) hot = static_cast<int>(k);
          }
          ASSERT_EQ(s, 1.0);
          const int label = ex.maps.at(static_cast<int>(v), static_cast<int>(t)).labels[static_cast<size_t>(px)];
          EXPECT_EQ(hot, label == render::kBackground ? cfg.n_labels : label);
        }
    // Ground-truth videos are consistent across views up to splat edges.
    EXPECT_LT(cross_view_discrepancy(ex.video, ex, LabelPalette::standard(6)), 0.05);
  }
}

TEST(Data, ConfigJsonIsStrict) {
  auto cfg = tiny_config();
  cfg.norm = MvaNorm::PerChannel;
  auto back = VideoConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  auto j = cfg.to_json();
  j["typo"] = 1;
  EXPECT_THROW(VideoConfig::from_json(j), ConfigError);
  j = cfg.to_json();
  j["eta"] = -0.5;
  EXPECT_THROW(VideoConfig::from_json(j), ConfigError);
  j = cfg.to_json();
  j["patch"] = 3;
  EXPECT_THROW(VideoConfig::from_json(j), ConfigError);
  EXPECT_THROW(VideoTrainConfig::from_json({{"stepz", 3}}), ConfigError);
}

TEST(Export, RawTensorRoundTrip) {
  Rng rng(40);
  auto v = random_tensor({2, 3, 3, 4, 5}, rng, 0.5);
  auto dir = scratch("export");
  export_video(v, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "frame2.png"));
  EXPECT_EQ(std::filesystem::file_size(dir / "video.f32"), static_cast<uintmax_t>(v.numel() * 4));
  auto back = import_video(dir);
  ASSERT_EQ(back.shape(), v.shape());
  for (int64_t i = 0; i < v.numel(); ++i) EXPECT_EQ(back.at(i), static_cast<double>(static_cast<float>(v.at(i))));
  std::filesystem::resize_file(dir / "video.f32", 10);
  EXPECT_THROW(import_video(dir), TruncatedError);
  std::filesystem::remove_all(dir);
}

TEST(Export, CheckpointRoundTrip) {
  auto cfg = tiny_config();
  VideoModel model(cfg, 41);
  auto dir = scratch("ckpt");
  save_video_model(model, dir);
  auto back = load_video_model(dir);
  EXPECT_EQ(back.config().to_json(), cfg.to_json());
  EXPECT_EQ(back.params().parameter_count(), model.params().parameter_count());
  std::filesystem::remove_all(dir);
}

TEST(Training, LossHalvesOnMostSeeds) {
  auto cfg = tiny_config();
  int ok = 0;
  for (uint64_t seed : {0, 1, 2}) {
    auto data = make_toy_video_dataset(cfg, 8, 50 + seed);
    VideoModel model(cfg, seed);
    VideoTrainConfig tc;
    tc.steps = 300;
    tc.lr = 2e-3;
    tc.seed = seed;
    tc.eval_samples = 4;
    auto s = train_toy_video(model, data, tc);
    RecordProperty("seed" + std::to_string(seed), std::to_string(s.initial_loss) + " -> " + std::to_string(s.final_loss));
    ok += s.final_loss <= 0.5 * s.initial_loss;
  }
  EXPECT_GE(ok, 2);
}

TEST(Training, CrossViewBlockImprovesConsistency) {
  auto cfg = tiny_config();
  auto train_set = make_toy_video_dataset(cfg, 16, 100);
  auto held_out = make_toy_video_dataset(cfg, 6, 999);
  const auto palette = LabelPalette::standard(cfg.n_labels);
  auto discrepancy = [&](int stride) {
    auto c = cfg;
    c.mva_stride = stride;
    VideoModel model(c, 0);
    VideoTrainConfig tc;
    tc.steps = 800;
    tc.lr = 2e-3;
    tc.eval_samples = 1;
    train_toy_video(model, train_set, tc);
    double d = 0;
    for (size_t i = 0; i < held_out.size(); ++i) {
      d += cross_view_discrepancy(model.sample(held_out[i].condition, 20, 7 + i), held_out[i], palette);
    }
    return d / static_cast<double>(held_out.size());
  };
  const double with_mva = discrepancy(1), without = discrepancy(0);
  RecordProperty("with_mva", std::to_string(with_mva));
  RecordProperty("without_mva", std::to_string(without));
  EXPECT_LT(with_mva, without);
}
